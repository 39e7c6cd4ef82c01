//! Per-unit dictionary learning and the block-diagonal dictionary.
//!
//! Each feature unit gets its own sub-dictionary, learned by alternating an
//! ℓ1 sparse-coding pass over the samples with a block-coordinate update of
//! the atoms (each atom projected back onto the unit ball). The learned
//! sub-dictionaries are then stacked along the diagonal so that every atom
//! only touches its own unit's rows.

use std::ops::Range;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::FeatureSchema;
use crate::{Error, Result};

pub const DEFAULT_ATOMS: usize = 200;
pub const DEFAULT_DICT_LAMBDA: f64 = 0.15;
pub const DEFAULT_EPOCHS: usize = 10;

const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_ITER: usize = 2000;
/// An atom whose squared coefficient mass over an epoch is below this is dead.
const DEAD_ATOM_MASS: f64 = 1e-12;

pub(crate) fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

pub(crate) fn spectral_norm_sq(gram: &DMatrix<f64>) -> f64 {
    if gram.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(gram.clone()).eigenvalues.max().max(0.0)
}

fn check_finite<'a>(what: &str, mut values: impl Iterator<Item = &'a f64>) -> Result<()> {
    if values.all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

/// Lasso solver for a fixed dictionary: minimizes `½‖f − Dα‖² + λ‖α‖₁`.
///
/// Caches the Gram matrix and its spectral norm so that many signals can be
/// coded against the same dictionary cheaply. Uses accelerated proximal
/// gradient with function-value restart, so accepted iterates never increase
/// the objective; a warm start therefore never makes things worse.
pub struct LassoSolver<'a> {
    dict: &'a DMatrix<f64>,
    gram: DMatrix<f64>,
    lipschitz: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl<'a> LassoSolver<'a> {
    pub fn new(dict: &'a DMatrix<f64>) -> Result<Self> {
        check_finite("dictionary", dict.iter())?;
        let gram = dict.transpose() * dict;
        let lipschitz = spectral_norm_sq(&gram);
        Ok(LassoSolver { dict, gram, lipschitz, tol: LASSO_TOL, max_iter: LASSO_MAX_ITER })
    }

    pub fn objective(&self, f: &DVector<f64>, alpha: &DVector<f64>, lambda: f64) -> f64 {
        lasso_objective(self.dict, f, alpha, lambda)
    }

    pub fn solve(&self, f: &DVector<f64>, lambda: f64, warm: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        let k = self.dict.ncols();
        if f.len() != self.dict.nrows() {
            return Err(Error::DimensionMismatch { expected: self.dict.nrows(), got: f.len() });
        }
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lasso lambda must be positive, got {lambda}")));
        }
        check_finite("signal", f.iter())?;
        let b = self.dict.transpose() * f;
        let ff = f.norm_squared();
        let b_scale = b.amax();
        let mut x = match warm {
            Some(w) if w.len() == k => w.clone(),
            Some(w) => return Err(Error::DimensionMismatch { expected: k, got: w.len() }),
            None => DVector::zeros(k),
        };
        if self.lipschitz == 0.0 {
            return Ok(DVector::zeros(k));
        }
        let objective = |x: &DVector<f64>| {
            0.5 * ((&self.gram * x).dot(x) - 2.0 * b.dot(x) + ff) + lambda * x.lp_norm(1)
        };
        let step = 1.0 / self.lipschitz;
        let mut fx = objective(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        for _ in 0..self.max_iter {
            let grad = &self.gram * &y - &b;
            let z = (&y - grad * step).map(|v| soft_threshold(v, lambda * step));
            let fz = objective(&z);
            if fz > fx {
                // momentum overshoot: restart from the last accepted point
                if t == 1.0 {
                    break;
                }
                t = 1.0;
                y = x.clone();
                continue;
            }
            // gradient mapping at y, a KKT residual
            let mapping = (&y - &z).amax() / step;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z + (&z - &x) * ((t - 1.0) / t_next);
            x = z;
            t = t_next;
            fx = fz;
            if mapping <= self.tol * (1.0 + b_scale) {
                break;
            }
        }
        Ok(x)
    }
}

pub fn lasso_objective(dict: &DMatrix<f64>, f: &DVector<f64>, alpha: &DVector<f64>, lambda: f64) -> f64 {
    0.5 * (f - dict * alpha).norm_squared() + lambda * alpha.lp_norm(1)
}

/// Sparse code of `f` over the columns of `dict`.
pub fn sparse_code_lasso(f: &DVector<f64>, dict: &DMatrix<f64>, lambda: f64) -> Result<DVector<f64>> {
    LassoSolver::new(dict)?.solve(f, lambda, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubDictionary {
    pub unit_name: String,
    /// `d_k × K`, one atom per column.
    pub atoms: DMatrix<f64>,
}

impl SubDictionary {
    pub fn atom_count(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn dim(&self) -> usize {
        self.atoms.nrows()
    }

    pub fn max_atom_norm(&self) -> f64 {
        self.atoms.column_iter().map(|c| c.norm()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LearnMode {
    /// Full coding pass then one atom sweep per epoch.
    Batch,
    /// Shuffled mini-batches, one atom sweep per batch with running statistics.
    MiniBatch { batch_size: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictLearnOptions {
    pub atoms: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub mode: LearnMode,
}

impl Default for DictLearnOptions {
    fn default() -> Self {
        DictLearnOptions {
            atoms: DEFAULT_ATOMS,
            lambda: DEFAULT_DICT_LAMBDA,
            epochs: DEFAULT_EPOCHS,
            seed: 0,
            mode: LearnMode::Batch,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnitDictionaryFit {
    pub dictionary: SubDictionary,
    /// Mean per-sample objective after each epoch.
    pub objective_trace: Vec<f64>,
    /// Codes of the training samples, one column per sample.
    pub codes: DMatrix<f64>,
}

/// Mean over samples of `½‖f_i − Dα_i‖² + λ‖α_i‖₁`.
pub fn dictionary_objective(data: &DMatrix<f64>, dict: &DMatrix<f64>, codes: &DMatrix<f64>, lambda: f64) -> f64 {
    let n = data.ncols();
    if n == 0 {
        return 0.0;
    }
    let resid = data - dict * codes;
    let fit: f64 = resid.column_iter().map(|c| 0.5 * c.norm_squared()).sum();
    let reg: f64 = codes.iter().map(|v| v.abs()).sum::<f64>() * lambda;
    (fit + reg) / n as f64
}

/// Learns a `data.nrows() × atoms` dictionary from the columns of `data`.
pub fn learn_unit_dictionary(unit_name: &str, data: &DMatrix<f64>, opts: &DictLearnOptions) -> Result<UnitDictionaryFit> {
    let (dim, n) = data.shape();
    let k = opts.atoms;
    if k == 0 {
        return Err(Error::InvalidConfig("dictionary needs at least one atom".into()));
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    if !(opts.lambda > 0.0) {
        return Err(Error::InvalidConfig(format!("dictionary lambda must be positive, got {}", opts.lambda)));
    }
    check_finite("training data", data.iter())?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut dict = DMatrix::zeros(dim, k);
    for (j, i) in index::sample(&mut rng, n, k).into_iter().enumerate() {
        let col = data.column(i);
        let norm = col.norm();
        if norm > 0.0 {
            dict.set_column(j, &(col / norm));
        }
    }

    let mut codes = DMatrix::zeros(k, n);
    let mut trace = Vec::with_capacity(opts.epochs);
    match opts.mode {
        LearnMode::Batch => {
            let all: Vec<usize> = (0..n).collect();
            for _ in 0..opts.epochs {
                code_samples(data, &dict, &mut codes, &all, opts.lambda)?;
                let (a, b) = sufficient_stats(data, &codes, &all);
                update_atoms(&mut dict, &a, &b, data, &codes);
                trace.push(dictionary_objective(data, &dict, &codes, opts.lambda));
            }
        }
        LearnMode::MiniBatch { batch_size } => {
            let batch_size = batch_size.clamp(1, n);
            let mut a = DMatrix::zeros(k, k);
            let mut b = DMatrix::zeros(dim, k);
            let mut order: Vec<usize> = (0..n).collect();
            for _ in 0..opts.epochs {
                rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
                for batch in order.chunks(batch_size) {
                    code_samples(data, &dict, &mut codes, batch, opts.lambda)?;
                    let (da, db) = sufficient_stats(data, &codes, batch);
                    a += da;
                    b += db;
                    update_atoms(&mut dict, &a, &b, data, &codes);
                }
                trace.push(dictionary_objective(data, &dict, &codes, opts.lambda));
            }
        }
    }
    Ok(UnitDictionaryFit {
        dictionary: SubDictionary { unit_name: unit_name.to_string(), atoms: dict },
        objective_trace: trace,
        codes,
    })
}

fn code_samples(data: &DMatrix<f64>, dict: &DMatrix<f64>, codes: &mut DMatrix<f64>, which: &[usize], lambda: f64) -> Result<()> {
    let solver = LassoSolver::new(dict)?;
    let solved: Vec<DVector<f64>> = which
        .par_iter()
        .map(|&i| {
            let f = data.column(i).into_owned();
            let warm = codes.column(i).into_owned();
            solver.solve(&f, lambda, Some(&warm))
        })
        .collect::<Result<_>>()?;
    for (&i, alpha) in which.iter().zip(solved) {
        codes.set_column(i, &alpha);
    }
    Ok(())
}

/// `(Σ α αᵀ, Σ f αᵀ)` over the selected samples.
fn sufficient_stats(data: &DMatrix<f64>, codes: &DMatrix<f64>, which: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = codes.nrows();
    let mut a = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(data.nrows(), k);
    for &i in which {
        let alpha = codes.column(i);
        a.ger(1.0, &alpha, &alpha, 1.0);
        b.ger(1.0, &data.column(i), &alpha, 1.0);
    }
    (a, b)
}

/// One block-coordinate sweep over the atoms. Each column update exactly
/// minimizes the reconstruction term over that column inside the unit ball.
fn update_atoms(dict: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, data: &DMatrix<f64>, codes: &DMatrix<f64>) {
    let k = dict.ncols();
    let mut dead: Vec<usize> = Vec::new();
    for j in 0..k {
        let ajj = a[(j, j)];
        if ajj <= DEAD_ATOM_MASS {
            dead.push(j);
            continue;
        }
        let u = dict.column(j) + (b.column(j) - &*dict * a.column(j)) / ajj;
        let norm = u.norm();
        dict.set_column(j, &(u / norm.max(1.0)));
        debug_assert!(dict.column(j).norm() <= 1.0 + 1e-9);
    }
    if dead.is_empty() {
        return;
    }
    // reseed unused atoms with the worst-reconstructed samples
    let resid = data - &*dict * codes;
    let mut worst: Vec<(usize, f64)> = resid.column_iter().map(|c| c.norm_squared()).enumerate().collect();
    worst.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    for (j, &(i, err)) in dead.into_iter().zip(worst.iter()) {
        if err <= 0.0 {
            break;
        }
        let col = data.column(i);
        let norm = col.norm();
        if norm > 0.0 {
            dict.set_column(j, &(col / norm));
        }
    }
}

/// Per-unit sub-dictionaries laid out block-diagonally.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockDictionary {
    schema: FeatureSchema,
    subs: Vec<SubDictionary>,
    atoms_per_unit: usize,
}

impl BlockDictionary {
    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn subs(&self) -> &[SubDictionary] {
        &self.subs
    }

    pub fn atoms_per_unit(&self) -> usize {
        self.atoms_per_unit
    }

    /// Total atom count `U·K`.
    pub fn total_atoms(&self) -> usize {
        self.atoms_per_unit * self.subs.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.schema.total_dim()
    }

    /// Coefficient range belonging to unit `k`.
    pub fn coef_span(&self, k: usize) -> Range<usize> {
        k * self.atoms_per_unit..(k + 1) * self.atoms_per_unit
    }

    /// Coefficient groups, one per feature unit.
    pub fn coef_groups(&self) -> Vec<Range<usize>> {
        (0..self.subs.len()).map(|k| self.coef_span(k)).collect()
    }

    /// `D x`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.feature_dim());
        for (k, sub) in self.subs.iter().enumerate() {
            let xs = x.rows_range(self.coef_span(k));
            let span = self.schema.span(k);
            out.rows_range_mut(span).gemv(1.0, &sub.atoms, &xs, 0.0);
        }
        out
    }

    /// `Dᵀ r`.
    pub fn apply_transpose(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.total_atoms());
        for (k, sub) in self.subs.iter().enumerate() {
            let rs = r.rows_range(self.schema.span(k));
            out.rows_range_mut(self.coef_span(k)).gemv_tr(1.0, &sub.atoms, &rs, 0.0);
        }
        out
    }

    /// Squared spectral norm of `D`, the max over blocks.
    pub fn spectral_norm_sq(&self) -> f64 {
        self.subs
            .iter()
            .map(|s| spectral_norm_sq(&(s.atoms.transpose() * &s.atoms)))
            .fold(0.0, f64::max)
    }

    /// Dense `d × U·K` matrix.
    pub fn materialize(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.feature_dim(), self.total_atoms());
        for (k, sub) in self.subs.iter().enumerate() {
            let span = self.schema.span(k);
            let cs = self.coef_span(k);
            d.view_mut((span.start, cs.start), (span.len(), cs.len())).copy_from(&sub.atoms);
        }
        d
    }
}

/// Stacks sub-dictionaries along the diagonal, in schema order.
pub fn assemble_block_diagonal(subs: Vec<SubDictionary>, schema: &FeatureSchema) -> Result<BlockDictionary> {
    if subs.len() != schema.unit_count() {
        return Err(Error::SchemaMismatch(format!(
            "{} sub-dictionaries for {} feature units",
            subs.len(),
            schema.unit_count()
        )));
    }
    let atoms = subs[0].atom_count();
    for (sub, unit) in subs.iter().zip(schema.units()) {
        if sub.unit_name != unit.name {
            return Err(Error::SchemaMismatch(format!(
                "sub-dictionary {:?} found where unit {:?} was expected",
                sub.unit_name, unit.name
            )));
        }
        if sub.dim() != unit.dim {
            return Err(Error::SchemaMismatch(format!(
                "sub-dictionary {:?} has {} rows, unit has dim {}",
                sub.unit_name,
                sub.dim(),
                unit.dim
            )));
        }
        if sub.atom_count() != atoms {
            return Err(Error::SchemaMismatch(format!(
                "sub-dictionary {:?} has {} atoms, expected {atoms}",
                sub.unit_name,
                sub.atom_count()
            )));
        }
    }
    Ok(BlockDictionary { schema: schema.clone(), subs, atoms_per_unit: atoms })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn normalized_columns(mut m: DMatrix<f64>) -> DMatrix<f64> {
        for mut c in m.column_iter_mut() {
            let n = c.norm();
            c /= n;
        }
        m
    }

    #[test]
    fn orthonormal_atom_recovery() {
        let d = DMatrix::<f64>::identity(4, 4);
        let f = DVector::from_column_slice(&[0.0, 1.0, 0.0, 0.0]);
        let a = sparse_code_lasso(&f, &d, 0.1).unwrap();
        assert!((a[1] - 0.9).abs() < 1e-9);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[2], 0.0);
        assert_eq!(a[3], 0.0);
    }

    #[test]
    fn null_threshold_gives_zero() {
        let d = normalized_columns(random_matrix(10, 25, 3));
        let f = DVector::from_iterator(10, random_matrix(10, 1, 4).iter().copied());
        let lmax = (d.transpose() * &f).amax();
        let a = sparse_code_lasso(&f, &d, lmax).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let d = DMatrix::<f64>::identity(3, 3);
        let f = DVector::from_column_slice(&[1.0, f64::NAN, 0.0]);
        assert!(matches!(sparse_code_lasso(&f, &d, 0.1), Err(Error::Numeric(_))));
        let f = DVector::from_column_slice(&[1.0, 0.0]);
        assert!(matches!(sparse_code_lasso(&f, &d, 0.1), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn lasso_optimality_conditions() {
        for seed in 0..10 {
            let d = normalized_columns(random_matrix(10, 25, seed));
            let f = DVector::from_iterator(10, random_matrix(10, 1, 100 + seed).iter().copied());
            let lambda = 0.1;
            let a = sparse_code_lasso(&f, &d, lambda).unwrap();
            let corr = d.transpose() * (&f - &d * &a);
            for i in 0..a.len() {
                if a[i] == 0.0 {
                    assert!(corr[i].abs() <= lambda + 1e-6, "seed {seed} coord {i}: {}", corr[i]);
                } else {
                    assert!((corr[i] - lambda * a[i].signum()).abs() <= 1e-6, "seed {seed} coord {i}");
                }
            }
        }
    }

    #[test]
    fn single_direction_data() {
        let v = DVector::from_column_slice(&[0.6, 0.0, 0.8]);
        let data = DMatrix::from_fn(3, 12, |r, _| v[r]);
        let opts = DictLearnOptions { atoms: 1, lambda: 0.15, epochs: 5, seed: 1, mode: LearnMode::Batch };
        let fit = learn_unit_dictionary("u", &data, &opts).unwrap();
        assert!(fit.dictionary.atoms.column(0).dot(&v).abs() >= 0.99);
    }

    #[test]
    fn insufficient_data() {
        let data = random_matrix(4, 3, 0);
        let opts = DictLearnOptions { atoms: 5, ..Default::default() };
        assert!(matches!(
            learn_unit_dictionary("u", &data, &opts),
            Err(Error::InsufficientData { needed: 5, got: 3 })
        ));
    }

    #[test]
    fn default_atom_count() {
        assert_eq!(DictLearnOptions::default().atoms, 200);
        assert_eq!(DictLearnOptions::default().lambda, 0.15);
    }

    #[test]
    fn seeded_learning_is_reproducible() {
        let data = random_matrix(6, 40, 9);
        let opts = DictLearnOptions { atoms: 5, lambda: 0.1, epochs: 4, seed: 42, mode: LearnMode::Batch };
        let a = learn_unit_dictionary("u", &data, &opts).unwrap();
        let b = learn_unit_dictionary("u", &data, &opts).unwrap();
        assert_eq!(a.dictionary, b.dictionary);
        assert_eq!(a.objective_trace, b.objective_trace);
    }

    #[test]
    fn mini_batch_mode_keeps_atoms_feasible() {
        let data = random_matrix(6, 60, 11);
        let opts = DictLearnOptions {
            atoms: 6,
            lambda: 0.1,
            epochs: 3,
            seed: 5,
            mode: LearnMode::MiniBatch { batch_size: 16 },
        };
        let fit = learn_unit_dictionary("u", &data, &opts).unwrap();
        assert!(fit.dictionary.max_atom_norm() <= 1.0 + 1e-9);
        assert_eq!(fit.objective_trace.len(), 3);
        assert!(*fit.objective_trace.last().unwrap() < fit.objective_trace[0] * 1.5);
    }

    #[test]
    fn dead_atoms_are_reseeded() {
        // two directions only; with 4 atoms at least one starts as a duplicate
        let mut data = DMatrix::zeros(3, 20);
        for i in 0..20 {
            data[(i % 2, i)] = 1.0;
        }
        data[(2, 19)] = 0.5;
        let opts = DictLearnOptions { atoms: 4, lambda: 0.05, epochs: 3, seed: 2, mode: LearnMode::Batch };
        let fit = learn_unit_dictionary("u", &data, &opts).unwrap();
        assert!(fit.dictionary.max_atom_norm() <= 1.0 + 1e-9);
        assert!(fit.dictionary.atoms.column_iter().all(|c| c.norm() > 0.5));
    }

    fn sub(name: &str, rows: usize, k: usize, seed: u64) -> SubDictionary {
        SubDictionary { unit_name: name.into(), atoms: normalized_columns(random_matrix(rows, k, seed)) }
    }

    #[test]
    fn block_diagonal_layout() {
        let schema = FeatureSchema::from_dims([("a", 3), ("b", 2), ("c", 4)]).unwrap();
        let bd = assemble_block_diagonal(vec![sub("a", 3, 5, 1), sub("b", 2, 5, 2), sub("c", 4, 5, 3)], &schema).unwrap();
        assert_eq!(bd.total_atoms(), 15);
        let d = bd.materialize();
        assert_eq!(d.shape(), (9, 15));
        for k in 0..3 {
            let rows = schema.span(k);
            for c in bd.coef_span(k) {
                for r in 0..9 {
                    if !rows.contains(&r) {
                        assert_eq!(d[(r, c)], 0.0);
                    }
                }
            }
        }
        let x = DVector::from_iterator(15, (0..15).map(|i| i as f64 * 0.3 - 2.0));
        assert!((bd.apply(&x) - &d * &x).amax() < 1e-12);
        let r = DVector::from_iterator(9, (0..9).map(|i| (i as f64).sin()));
        assert!((bd.apply_transpose(&r) - d.transpose() * &r).amax() < 1e-12);
        let dense = spectral_norm_sq(&(d.transpose() * &d));
        assert!((bd.spectral_norm_sq() - dense).abs() < 1e-9);
    }

    #[test]
    fn default_atom_count_is_200() {
        let dims: Vec<(String, usize)> = (0..5).map(|i| (format!("u{i}"), 3)).collect();
        let schema = FeatureSchema::from_dims(dims).unwrap();
        let subs = (0..5).map(|i| sub(&format!("u{i}"), 3, 200, i)).collect();
        assert_eq!(assemble_block_diagonal(subs, &schema).unwrap().total_atoms(), 1000);
    }

    #[test]
    fn single_unit_is_identity_case() {
        let schema = FeatureSchema::from_dims([("a", 4)]).unwrap();
        let s = sub("a", 4, 6, 8);
        let bd = assemble_block_diagonal(vec![s.clone()], &schema).unwrap();
        assert_eq!(bd.materialize(), s.atoms);
    }

    #[test]
    fn assembly_mismatches() {
        let schema = FeatureSchema::from_dims([("a", 3), ("b", 2)]).unwrap();
        let wrong_k = vec![sub("a", 3, 5, 1), sub("b", 2, 4, 2)];
        assert!(matches!(assemble_block_diagonal(wrong_k, &schema), Err(Error::SchemaMismatch(_))));
        let wrong_order = vec![sub("b", 2, 5, 1), sub("a", 3, 5, 2)];
        assert!(matches!(assemble_block_diagonal(wrong_order, &schema), Err(Error::SchemaMismatch(_))));
        let wrong_dim = vec![sub("a", 2, 5, 1), sub("b", 2, 5, 2)];
        assert!(matches!(assemble_block_diagonal(wrong_dim, &schema), Err(Error::SchemaMismatch(_))));
    }
}
