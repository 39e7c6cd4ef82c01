//! Mahalanobis metric learning from similar and dissimilar pairs.
//!
//! Learns a PSD matrix `A` maximizing `g(A) = Σ_D ‖x − y‖_A` subject to
//! `f(A) = Σ_S ‖x − y‖²_A ≤ 1` and `A ⪰ 0`, by gradient ascent on `g`
//! followed by alternating projections onto the half-space and the PSD cone.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::io::{decode_matrix, encode_matrix};
use crate::{Error, Result};

/// Quadratic forms down to this negative value are clamped to zero.
const QUAD_CLAMP: f64 = -1e-10;
/// Lower bound on `‖δ‖_A` in the ascent direction.
const GRAD_GUARD: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const MAX_PROJECTION_CYCLES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricVariant {
    Eucl,
    Diag,
    Full,
}

impl MetricVariant {
    pub const ALL: [MetricVariant; 3] = [MetricVariant::Eucl, MetricVariant::Diag, MetricVariant::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricVariant::Eucl => "eucl",
            MetricVariant::Diag => "diag",
            MetricVariant::Full => "full",
        }
    }
}

impl fmt::Display for MetricVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MetricVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown metric variant {s:?}")))
    }
}

/// Storage of `A` for each variant.
#[derive(Debug, Clone, PartialEq)]
pub enum MetricMatrix {
    Identity,
    Diagonal(DVector<f64>),
    Full(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricModel {
    dim: usize,
    matrix: MetricMatrix,
}

impl MetricModel {
    pub fn euclidean(dim: usize) -> Self {
        MetricModel { dim, matrix: MetricMatrix::Identity }
    }

    /// Diagonal metric; entries must be non-negative.
    pub fn diagonal(diag: DVector<f64>) -> Result<Self> {
        if diag.iter().any(|&v| !(v >= -FEAS_TOL) || !v.is_finite()) {
            return Err(Error::Numeric("diagonal metric has negative or non-finite entries".into()));
        }
        Ok(MetricModel { dim: diag.len(), matrix: MetricMatrix::Diagonal(diag) })
    }

    /// Full metric; must be square, symmetric and PSD within tolerance.
    pub fn full(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch { expected: a.nrows(), got: a.ncols() });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("metric matrix has non-finite entries".into()));
        }
        if (&a - a.transpose()).amax() > 1e-10 {
            return Err(Error::Numeric("metric matrix is not symmetric".into()));
        }
        if min_eigenvalue(&a) < -FEAS_TOL {
            return Err(Error::Numeric("metric matrix is not positive semi-definite".into()));
        }
        Ok(MetricModel { dim: a.nrows(), matrix: MetricMatrix::Full(a) })
    }

    pub fn variant(&self) -> MetricVariant {
        match self.matrix {
            MetricMatrix::Identity => MetricVariant::Eucl,
            MetricMatrix::Diagonal(_) => MetricVariant::Diag,
            MetricMatrix::Full(_) => MetricVariant::Full,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &MetricMatrix {
        &self.matrix
    }

    /// Dense `A`.
    pub fn dense(&self) -> DMatrix<f64> {
        match &self.matrix {
            MetricMatrix::Identity => DMatrix::identity(self.dim, self.dim),
            MetricMatrix::Diagonal(d) => DMatrix::from_diagonal(d),
            MetricMatrix::Full(a) => a.clone(),
        }
    }

    /// `δᵀ A δ`, without clamping.
    pub fn quad_form(&self, delta: &[f64]) -> f64 {
        match &self.matrix {
            MetricMatrix::Identity => delta.iter().map(|v| v * v).sum(),
            MetricMatrix::Diagonal(d) => delta.iter().zip(d.iter()).map(|(v, a)| a * v * v).sum(),
            MetricMatrix::Full(a) => {
                let dv = DVector::from_column_slice(delta);
                (a * &dv).dot(&dv)
            }
        }
    }

    pub fn distance(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        mahalanobis_distance(x, y, self)
    }
}

/// `sqrt((x − y)ᵀ A (x − y))`.
pub fn mahalanobis_distance(x: &[f64], y: &[f64], m: &MetricModel) -> Result<f64> {
    if x.len() != m.dim {
        return Err(Error::DimensionMismatch { expected: m.dim, got: x.len() });
    }
    if y.len() != m.dim {
        return Err(Error::DimensionMismatch { expected: m.dim, got: y.len() });
    }
    let delta: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
    let q = m.quad_form(&delta);
    if q < QUAD_CLAMP {
        return Err(Error::Numeric(format!("negative quadratic form {q:e}")));
    }
    Ok(q.max(0.0).sqrt())
}

/// Similar and dissimilar descriptor pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairSets {
    pub similar: Vec<(DVector<f64>, DVector<f64>)>,
    pub dissimilar: Vec<(DVector<f64>, DVector<f64>)>,
}

impl PairSets {
    pub fn dim(&self) -> Option<usize> {
        self.similar.iter().chain(&self.dissimilar).map(|(x, _)| x.len()).next()
    }

    fn differences(pairs: &[(DVector<f64>, DVector<f64>)], dim: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(pairs.len(), dim);
        for (i, (x, y)) in pairs.iter().enumerate() {
            for v in [x, y] {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: v.len() });
                }
            }
            out.set_row(i, &(x - y).transpose());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Ascent step as a fraction of the initial metric's Frobenius norm.
    pub step: f64,
    pub iters: usize,
    /// Stop once the relative change of `g` falls below this.
    pub tol: f64,
    /// Recorded with the model; training itself is deterministic.
    pub seed: u64,
    /// Optional ridge, added to `M_S` as `ridge · tr(M_S)/d · I`.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    0.0
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { step: 0.1, iters: 500, tol: 1e-7, seed: 0, ridge: default_ridge() }
    }
}

#[derive(Debug, Clone)]
pub struct MetricFit {
    pub model: MetricModel,
    /// `g` at the feasible scaled identity the ascent starts from.
    pub initial_objective: f64,
    pub objective: f64,
    /// `g` after every ascent iteration.
    pub trace: Vec<f64>,
}

/// `Σ_S ‖δ‖²_A`.
pub fn similar_constraint(pairs: &PairSets, model: &MetricModel) -> f64 {
    pairs.similar.iter().map(|(x, y)| model.quad_form((x - y).as_slice())).sum()
}

/// `Σ_D ‖δ‖_A`.
pub fn dissimilar_objective(pairs: &PairSets, model: &MetricModel) -> f64 {
    pairs
        .dissimilar
        .iter()
        .map(|(x, y)| model.quad_form((x - y).as_slice()).max(0.0).sqrt())
        .sum()
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    SymmetricEigen::new(0.5 * (a + a.transpose())).eigenvalues.min()
}

fn frob_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.component_mul(b).sum()
}

fn clip_psd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.min() >= 0.0 {
        return None;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    let out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    Some(0.5 * (&out + out.transpose()))
}

/// Alternating projections onto `{⟨A, M_S⟩ ≤ 1}` and the PSD cone.
///
/// Returns `A` unchanged when it already satisfies both constraints.
pub fn project_feasible(a: &DMatrix<f64>, m_s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut a = if (a - a.transpose()).amax() == 0.0 { a.clone() } else { 0.5 * (a + a.transpose()) };
    let ms_norm2 = m_s.norm_squared();
    for _ in 0..MAX_PROJECTION_CYCLES {
        let viol = frob_inner(&a, m_s) - 1.0;
        if viol > 0.0 && ms_norm2 > 0.0 {
            a -= m_s * (viol / ms_norm2);
        }
        let clipped = clip_psd(&a);
        let changed = clipped.is_some();
        if let Some(c) = clipped {
            a = c;
        }
        if !changed || frob_inner(&a, m_s) <= 1.0 + FEAS_TOL {
            break;
        }
    }
    let f = frob_inner(&a, m_s);
    if f > 1.0 + FEAS_TOL {
        // scaling keeps A in the cone and lands exactly on the boundary
        a /= f;
    }
    a
}

/// Diagonal counterpart of [`project_feasible`]; `m_s` is the diagonal of `M_S`.
pub fn project_feasible_diag(a: &DVector<f64>, m_s: &DVector<f64>) -> DVector<f64> {
    let mut a = a.clone();
    let ms_norm2 = m_s.norm_squared();
    for _ in 0..MAX_PROJECTION_CYCLES {
        let viol = a.dot(m_s) - 1.0;
        if viol > 0.0 && ms_norm2 > 0.0 {
            a -= m_s * (viol / ms_norm2);
        }
        let negative = a.iter().any(|&v| v < 0.0);
        a.apply(|v| *v = v.max(0.0));
        if !negative || a.dot(m_s) <= 1.0 + FEAS_TOL {
            break;
        }
    }
    let f = a.dot(m_s);
    if f > 1.0 + FEAS_TOL {
        a /= f;
    }
    a
}

/// Learns `A` from the pair sets. `Eucl` returns the identity untouched.
pub fn learn_metric(pairs: &PairSets, variant: MetricVariant, opts: &MetricOptions) -> Result<MetricFit> {
    let dim = pairs
        .dim()
        .ok_or_else(|| Error::DegenerateObjective("no training pairs".into()))?;
    if variant == MetricVariant::Eucl {
        let model = MetricModel::euclidean(dim);
        let g = dissimilar_objective(pairs, &model);
        return Ok(MetricFit { model, initial_objective: g, objective: g, trace: vec![] });
    }
    if pairs.similar.is_empty() {
        return Err(Error::DegenerateObjective("no similar pairs".into()));
    }
    if pairs.dissimilar.is_empty() {
        return Err(Error::DegenerateObjective("no dissimilar pairs".into()));
    }
    let ds = PairSets::differences(&pairs.similar, dim)?;
    let dd = PairSets::differences(&pairs.dissimilar, dim)?;
    if dd.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateObjective("every dissimilar pair has identical descriptors".into()));
    }
    let scale = ds.norm_squared();
    if scale == 0.0 {
        return Err(Error::DegenerateObjective("every similar pair has identical descriptors; the constraint is vacuous".into()));
    }
    if ds.iter().chain(dd.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("pair descriptors contain non-finite values".into()));
    }
    if !(opts.ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("metric ridge must be nonnegative, got {}", opts.ridge)));
    }
    let ridge = opts.ridge * scale / dim as f64;
    match variant {
        MetricVariant::Diag => learn_diag(&ds, &dd, ridge, opts),
        MetricVariant::Full => learn_full(&ds, &dd, ridge, opts),
        MetricVariant::Eucl => unreachable!(),
    }
}

/// Projected ascent shared by both trained variants. `State` is the stored
/// form of `A` (a vector of diagonal entries or a full matrix).
struct Ascent<State> {
    objective: Box<dyn Fn(&State) -> f64>,
    gradient: Box<dyn Fn(&State) -> State>,
    project: Box<dyn Fn(&State) -> State>,
    axpy: fn(&State, f64, &State) -> State,
    norm: fn(&State) -> f64,
}

impl<S: Clone> Ascent<S> {
    fn run(&self, a0: S, opts: &MetricOptions) -> (S, f64, f64, Vec<f64>) {
        let step_len = opts.step * (self.norm)(&a0);
        let g0 = (self.objective)(&a0);
        let mut a = a0.clone();
        let mut g = g0;
        let mut best = (a0, g0);
        let mut step = step_len;
        let mut trace = Vec::with_capacity(opts.iters);
        for _ in 0..opts.iters {
            let grad = (self.gradient)(&a);
            let gn = (self.norm)(&grad);
            if gn == 0.0 || step == 0.0 {
                break;
            }
            let next = (self.project)(&(self.axpy)(&a, step / gn, &grad));
            let g_next = (self.objective)(&next);
            trace.push(g_next);
            if g_next > best.1 {
                best = (next.clone(), g_next);
            } else {
                // no progress at this step length: shrink it
                step *= 0.5;
            }
            let rel = (g_next - g).abs() / g.abs().max(f64::MIN_POSITIVE);
            a = next;
            g = g_next;
            if rel < opts.tol {
                break;
            }
        }
        (best.0, g0, best.1, trace)
    }
}

fn learn_diag(ds: &DMatrix<f64>, dd: &DMatrix<f64>, ridge: f64, opts: &MetricOptions) -> Result<MetricFit> {
    let dim = ds.ncols();
    let sq_s = ds.map(|v| v * v);
    let m_s = DVector::from_iterator(dim, sq_s.column_iter().map(|c| c.sum() + ridge));
    let scale = m_s.sum();
    let sq_d = dd.map(|v| v * v);
    let quad = {
        let sq_d = sq_d.clone();
        move |a: &DVector<f64>| &sq_d * a
    };
    let objective = {
        let quad = quad.clone();
        move |a: &DVector<f64>| quad(a).iter().map(|q| q.max(0.0).sqrt()).sum::<f64>()
    };
    let gradient = {
        let sq_d = sq_d.clone();
        move |a: &DVector<f64>| {
            let w = quad(a).map(|q| 0.5 / q.max(0.0).sqrt().max(GRAD_GUARD));
            sq_d.transpose() * w
        }
    };
    let ascent = Ascent {
        objective: Box::new(objective.clone()),
        gradient: Box::new(gradient),
        project: Box::new(move |a: &DVector<f64>| project_feasible_diag(a, &m_s)),
        axpy: |a, s, g| a + g * s,
        norm: |a| a.norm(),
    };
    let a0 = DVector::from_element(dim, 1.0 / scale);
    let (a, g0, g, trace) = ascent.run(a0, opts);
    Ok(MetricFit { model: MetricModel::diagonal(a)?, initial_objective: g0, objective: g, trace })
}

fn learn_full(ds: &DMatrix<f64>, dd: &DMatrix<f64>, ridge: f64, opts: &MetricOptions) -> Result<MetricFit> {
    let dim = ds.ncols();
    let mut m_s = ds.transpose() * ds;
    for i in 0..dim {
        m_s[(i, i)] += ridge;
    }
    let scale = m_s.trace();
    let dd = dd.clone();
    let quad = {
        let dd = dd.clone();
        move |a: &DMatrix<f64>| {
            let da = &dd * a;
            DVector::from_iterator(dd.nrows(), da.row_iter().zip(dd.row_iter()).map(|(x, y)| x.dot(&y)))
        }
    };
    let objective = {
        let quad = quad.clone();
        move |a: &DMatrix<f64>| quad(a).iter().map(|q| q.max(0.0).sqrt()).sum::<f64>()
    };
    let gradient = move |a: &DMatrix<f64>| {
        let w = quad(a).map(|q| 0.5 / q.max(0.0).sqrt().max(GRAD_GUARD));
        let weighted = DMatrix::from_fn(dd.nrows(), dd.ncols(), |r, c| dd[(r, c)] * w[r]);
        dd.transpose() * weighted
    };
    let ascent = Ascent {
        objective: Box::new(objective),
        gradient: Box::new(gradient),
        project: Box::new(move |a: &DMatrix<f64>| project_feasible(a, &m_s)),
        axpy: |a, s, g| a + g * s,
        norm: |a| a.norm(),
    };
    let a0 = DMatrix::identity(dim, dim) / scale;
    let (a, g0, g, trace) = ascent.run(a0, opts);
    let a = 0.5 * (&a + a.transpose());
    Ok(MetricFit { model: MetricModel::full(a)?, initial_objective: g0, objective: g, trace })
}

/// JSON header line of a metric file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricHeader {
    pub variant: MetricVariant,
    pub dim: usize,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Metric file: one JSON header line, then a CFM1 matrix (`0×0` for
/// `eucl`, `1×dim` for `diag`, `dim×dim` for `full`).
pub fn encode_metric_file(model: &MetricModel, extra: BTreeMap<String, serde_json::Value>) -> Result<Vec<u8>> {
    let header = MetricHeader { variant: model.variant(), dim: model.dim, extra };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    let m = match &model.matrix {
        MetricMatrix::Identity => DMatrix::zeros(0, 0),
        MetricMatrix::Diagonal(d) => DMatrix::from_row_slice(1, d.len(), d.as_slice()),
        MetricMatrix::Full(a) => a.clone(),
    };
    out.extend(encode_matrix(&m));
    Ok(out)
}

pub fn decode_metric_file(bytes: &[u8]) -> Result<(MetricHeader, MetricModel)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Parse("metric file has no header line".into()))?;
    let header: MetricHeader = serde_json::from_slice(&bytes[..nl])?;
    let (m, used) = decode_matrix(&bytes[nl + 1..])?;
    if nl + 1 + used != bytes.len() {
        return Err(Error::Parse("trailing bytes after metric matrix".into()));
    }
    let dim = header.dim;
    let model = match header.variant {
        MetricVariant::Eucl if m.is_empty() => MetricModel::euclidean(dim),
        MetricVariant::Diag if m.shape() == (1, dim) => MetricModel::diagonal(m.row(0).transpose())?,
        MetricVariant::Full if m.shape() == (dim, dim) => MetricModel::full(m)?,
        v => {
            return Err(Error::Parse(format!("{v} metric of dim {dim} cannot hold a {}x{} matrix", m.nrows(), m.ncols())));
        }
    };
    Ok((header, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn distance_examples() {
        let e = MetricModel::euclidean(2);
        assert_eq!(mahalanobis_distance(&[3.0, 4.0], &[0.0, 0.0], &e).unwrap(), 5.0);
        let d = MetricModel::diagonal(v(&[4.0, 1.0])).unwrap();
        assert!((mahalanobis_distance(&[1.0, 1.0], &[0.0, 0.0], &d).unwrap() - 5f64.sqrt()).abs() < 1e-15);
        let f = MetricModel::full(DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0])).unwrap();
        assert_eq!(mahalanobis_distance(&[0.3, -0.7], &[0.3, -0.7], &f).unwrap(), 0.0);
        assert!(matches!(mahalanobis_distance(&[1.0], &[0.0, 0.0], &e), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn model_validation() {
        assert!(MetricModel::full(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
        assert!(MetricModel::full(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
        assert!(MetricModel::diagonal(v(&[1.0, -0.5])).is_err());
    }

    #[test]
    fn projection_fixed_point() {
        let m_s = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let a = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.4]);
        assert!(frob_inner(&a, &m_s) <= 1.0);
        let p = project_feasible(&a, &m_s);
        assert!((p - a).amax() < 1e-12);
    }

    #[test]
    fn projection_of_negative_identity() {
        let m_s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let p = project_feasible(&(-DMatrix::<f64>::identity(2, 2)), &m_s);
        assert!(p.amax() < 1e-12);
    }

    #[test]
    fn projection_of_random_indefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let b = DMatrix::from_fn(5, 5, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = &b + b.transpose();
            let c = DMatrix::from_fn(5, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
            let m_s = &c * c.transpose();
            let p = project_feasible(&a, &m_s);
            assert!(min_eigenvalue(&p) >= -1e-8);
            assert!(frob_inner(&p, &m_s) <= 1.0 + 1e-8);
            assert!((&p - p.transpose()).amax() < 1e-10);
        }
    }

    #[test]
    fn eucl_is_identity_without_training() {
        let pairs = PairSets { similar: vec![(v(&[1.0, 0.0]), v(&[0.0, 0.0]))], dissimilar: vec![] };
        let fit = learn_metric(&pairs, MetricVariant::Eucl, &MetricOptions::default()).unwrap();
        assert_eq!(fit.model.variant(), MetricVariant::Eucl);
        assert_eq!(fit.model.dense(), DMatrix::identity(2, 2));
        assert!(fit.trace.is_empty());
    }

    #[test]
    fn degenerate_inputs() {
        let z = v(&[0.5, 0.5]);
        let pairs = PairSets { similar: vec![(v(&[1.0, 0.0]), v(&[0.0, 0.0]))], dissimilar: vec![(z.clone(), z.clone())] };
        assert!(matches!(learn_metric(&pairs, MetricVariant::Diag, &MetricOptions::default()), Err(Error::DegenerateObjective(_))));
        let pairs = PairSets { similar: vec![(v(&[1.0, 0.0]), v(&[0.0, 0.0]))], dissimilar: vec![] };
        assert!(matches!(learn_metric(&pairs, MetricVariant::Full, &MetricOptions::default()), Err(Error::DegenerateObjective(_))));
    }

    fn random_pairs(dim: usize, n: usize, seed: u64) -> PairSets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |s: f64| DVector::from_fn(dim, |_, _| s * rng.sample::<f64, _>(StandardNormal));
        PairSets {
            similar: (0..n).map(|_| (draw(1.0), draw(1.0))).collect(),
            dissimilar: (0..n).map(|_| (draw(1.0), draw(2.0))).collect(),
        }
    }

    #[test]
    fn learned_models_are_feasible_and_improve() {
        for seed in 0..4 {
            let pairs = random_pairs(6, 15, seed);
            for variant in [MetricVariant::Diag, MetricVariant::Full] {
                let fit = learn_metric(&pairs, variant, &MetricOptions::default()).unwrap();
                assert!(similar_constraint(&pairs, &fit.model) <= 1.0 + 1e-6);
                assert!(min_eigenvalue(&fit.model.dense()) >= -1e-8);
                assert!(fit.objective >= fit.initial_objective);
                assert!((dissimilar_objective(&pairs, &fit.model) - fit.objective).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn diag_keeps_off_diagonals_zero() {
        let fit = learn_metric(&random_pairs(5, 10, 3), MetricVariant::Diag, &MetricOptions::default()).unwrap();
        assert!(matches!(fit.model.matrix(), MetricMatrix::Diagonal(_)));
        let a = fit.model.dense();
        for r in 0..5 {
            for c in 0..5 {
                if r != c {
                    assert_eq!(a[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn metric_file_roundtrip() {
        let fit = learn_metric(&random_pairs(4, 8, 5), MetricVariant::Full, &MetricOptions::default()).unwrap();
        let mut extra = BTreeMap::new();
        extra.insert("seed".to_string(), serde_json::json!(5));
        let bytes = encode_metric_file(&fit.model, extra.clone()).unwrap();
        let (header, back) = decode_metric_file(&bytes).unwrap();
        assert_eq!(header.extra, extra);
        assert_eq!(back, fit.model);

        let diag = MetricModel::diagonal(v(&[1.0, 2.0, 3.0])).unwrap();
        let bytes = encode_metric_file(&diag, BTreeMap::new()).unwrap();
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).to_string();
        assert_eq!(text, r#"{"variant":"diag","dim":3}"#);
        assert_eq!(decode_metric_file(&bytes).unwrap().1, diag);
        let eucl = MetricModel::euclidean(7);
        assert_eq!(decode_metric_file(&encode_metric_file(&eucl, BTreeMap::new()).unwrap()).unwrap().1, eucl);
    }
}
