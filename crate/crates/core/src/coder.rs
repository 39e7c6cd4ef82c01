//! Collection descriptors.
//!
//! A collection of `m` images is represented by one coefficient vector `x`
//! over the block-diagonal dictionary, found by minimizing
//!
//! ```text
//! (1/m) Σ_i loss(f_i − D x) + λ Ω(x)
//! ```
//!
//! where the loss is either the Huber function of the per-image residual
//! norm or half the squared residual norm, and `Ω` is either ℓ1 or the ℓ2,1
//! norm over the per-unit coefficient blocks. With the squared loss the
//! problem reduces to coding the mean feature vector, which is how the
//! `Avg*` variants are computed. `RawAvg` skips coding entirely.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dictionary::{soft_threshold, BlockDictionary};
use crate::features::ImageFeature;
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TARGET_DENSITY: f64 = 0.10;
pub const DENSITY_TOLERANCE: f64 = 0.05;
pub const MAX_TUNING_PROBES: usize = 30;
/// Ridge weight that makes the composite objective strictly convex.
const RIDGE: f64 = 1e-10;
const TAU_FLOOR: f64 = 1e-6;
/// Warm-start solve used to pick a default knee.
const TAU_WARM_LAMBDA_FRACTION: f64 = 0.05;
const TAU_WARM_ITERS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    HuberL1,
    HuberG,
    AvgL1,
    AvgG,
    RawAvg,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::HuberL1, Variant::HuberG, Variant::AvgL1, Variant::AvgG, Variant::RawAvg];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::HuberL1 => "huber-l1",
            Variant::HuberG => "huber-g",
            Variant::AvgL1 => "avg-l1",
            Variant::AvgG => "avg-g",
            Variant::RawAvg => "raw-avg",
        }
    }

    pub fn penalty(self) -> Option<Penalty> {
        match self {
            Variant::HuberL1 | Variant::AvgL1 => Some(Penalty::L1),
            Variant::HuberG | Variant::AvgG => Some(Penalty::Group),
            Variant::RawAvg => None,
        }
    }

    pub fn is_huber(self) -> bool {
        matches!(self, Variant::HuberL1 | Variant::HuberG)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown descriptor variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    L1,
    /// ℓ2,1 over the per-unit coefficient blocks.
    Group,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    Huber { tau: f64 },
    LeastSquares,
}

/// Huber knee and regularization weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HuberParams {
    pub tau: f64,
    pub lambda: f64,
}

impl HuberParams {
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) || !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("huber params must be positive (tau {tau}, lambda {lambda})")));
        }
        Ok(HuberParams { tau, lambda })
    }
}

/// Huber function of the residual norm and its gradient.
///
/// `‖ε‖²/(2τ)` inside the knee, `‖ε‖ − τ/2` outside; the gradient has norm at
/// most one.
pub fn huber_value_grad(eps: &DVector<f64>, tau: f64) -> (f64, DVector<f64>) {
    let norm = eps.norm();
    if norm <= tau {
        (norm * norm / (2.0 * tau), eps / tau)
    } else {
        (norm - tau / 2.0, eps / norm)
    }
}

fn huber_value(norm: f64, tau: f64) -> f64 {
    if norm <= tau {
        norm * norm / (2.0 * tau)
    } else {
        norm - tau / 2.0
    }
}

/// Elementwise soft threshold, the prox of `t‖·‖₁`.
pub fn prox_l1(v: &DVector<f64>, t: f64) -> DVector<f64> {
    v.map(|x| soft_threshold(x, t))
}

/// Index spans that partition `0..len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    groups: Vec<Range<usize>>,
    len: usize,
}

impl GroupLayout {
    pub fn new(mut groups: Vec<Range<usize>>, len: usize) -> Result<Self> {
        groups.sort_by_key(|g| (g.start, g.end));
        let mut next = 0;
        for g in &groups {
            if g.start < next {
                return Err(Error::Layout(format!("group {g:?} overlaps a previous group")));
            }
            if g.start > next {
                return Err(Error::Layout(format!("indices {next}..{} are not covered", g.start)));
            }
            if g.is_empty() {
                return Err(Error::Layout(format!("empty group at {}", g.start)));
            }
            next = g.end;
        }
        if next != len {
            return Err(Error::Layout(format!("groups cover 0..{next}, expected 0..{len}")));
        }
        Ok(GroupLayout { groups, len })
    }

    pub fn groups(&self) -> &[Range<usize>] {
        &self.groups
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Block soft threshold, the prox of `t Σ_g ‖v_g‖₂`.
pub fn prox_group_l21(v: &DVector<f64>, t: f64, groups: &[Range<usize>]) -> Result<DVector<f64>> {
    let layout = GroupLayout::new(groups.to_vec(), v.len())?;
    Ok(block_soft_threshold(v, t, &layout))
}

fn block_soft_threshold(v: &DVector<f64>, t: f64, layout: &GroupLayout) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    for g in layout.groups() {
        let vg = v.rows_range(g.clone());
        let norm = vg.norm();
        if norm > t {
            out.rows_range_mut(g.clone()).copy_from(&(vg * (1.0 - t / norm)));
        }
    }
    out
}

fn penalty_value(x: &DVector<f64>, penalty: Penalty, layout: &GroupLayout) -> f64 {
    match penalty {
        Penalty::L1 => x.lp_norm(1),
        Penalty::Group => layout.groups().iter().map(|g| x.rows_range(g.clone()).norm()).sum(),
    }
}

fn penalty_prox(v: &DVector<f64>, t: f64, penalty: Penalty, layout: &GroupLayout) -> DVector<f64> {
    match penalty {
        Penalty::L1 => prox_l1(v, t),
        Penalty::Group => block_soft_threshold(v, t, layout),
    }
}

/// Dual norm of the penalty: the smallest `λ` for which `x = 0` is optimal
/// given the smooth gradient at zero.
fn null_threshold(grad0: &DVector<f64>, penalty: Penalty, layout: &GroupLayout) -> f64 {
    match penalty {
        Penalty::L1 => grad0.amax(),
        Penalty::Group => layout
            .groups()
            .iter()
            .map(|g| grad0.rows_range(g.clone()).norm())
            .fold(0.0, f64::max),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Stop when the relative objective decrease of an accepted step falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: DEFAULT_TOL, max_iter: DEFAULT_MAX_ITER }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

/// Smooth data term over a shared reconstruction `D x`.
enum DataTerm<'a> {
    /// `(1/m) Σ loss(f_i − Dx)` over the individual members.
    Joint { members: &'a [DVector<f64>], loss: Loss },
    /// `½‖f̄ − Dx‖²`.
    Mean { mean: &'a DVector<f64> },
}

struct Problem<'a> {
    dict: &'a BlockDictionary,
    data: DataTerm<'a>,
    penalty: Penalty,
    lambda: f64,
    layout: GroupLayout,
}

impl Problem<'_> {
    fn smooth_value(&self, x: &DVector<f64>) -> f64 {
        let dx = self.dict.apply(x);
        let ridge = 0.5 * RIDGE * x.norm_squared();
        ridge
            + match &self.data {
                DataTerm::Joint { members, loss } => {
                    let m = members.len() as f64;
                    members
                        .iter()
                        .map(|f| {
                            let r = f - &dx;
                            match *loss {
                                Loss::Huber { tau } => huber_value(r.norm(), tau),
                                Loss::LeastSquares => 0.5 * r.norm_squared(),
                            }
                        })
                        .sum::<f64>()
                        / m
                }
                DataTerm::Mean { mean } => 0.5 * (*mean - &dx).norm_squared(),
            }
    }

    fn smooth_value_grad(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let dx = self.dict.apply(x);
        let (value, back) = match &self.data {
            DataTerm::Joint { members, loss } => {
                let m = members.len() as f64;
                let mut value = 0.0;
                let mut psi = DVector::zeros(dx.len());
                for f in members.iter() {
                    let r = f - &dx;
                    match *loss {
                        Loss::Huber { tau } => {
                            let (v, g) = huber_value_grad(&r, tau);
                            value += v;
                            psi += g;
                        }
                        Loss::LeastSquares => {
                            value += 0.5 * r.norm_squared();
                            psi += r;
                        }
                    }
                }
                (value / m, psi / m)
            }
            DataTerm::Mean { mean } => {
                let r = *mean - &dx;
                (0.5 * r.norm_squared(), r)
            }
        };
        let grad = -self.dict.apply_transpose(&back) + x * RIDGE;
        (value + 0.5 * RIDGE * x.norm_squared(), grad)
    }

    fn objective(&self, x: &DVector<f64>) -> f64 {
        self.smooth_value(x) + self.lambda * penalty_value(x, self.penalty, &self.layout)
    }

    /// Global Lipschitz bound of the smooth gradient.
    fn lipschitz_bound(&self) -> f64 {
        let dd = self.dict.spectral_norm_sq();
        RIDGE
            + match &self.data {
                DataTerm::Joint { loss: Loss::Huber { tau }, .. } => dd / tau,
                _ => dd,
            }
    }

    fn null_threshold(&self) -> f64 {
        let (_, g0) = self.smooth_value_grad(&DVector::zeros(self.dict.total_atoms()));
        null_threshold(&g0, self.penalty, &self.layout)
    }

    /// Accelerated proximal gradient with backtracking and function-value
    /// restart; the accepted objective sequence is non-increasing.
    fn solve(&self, opts: &SolverOptions) -> Solution {
        let n = self.dict.total_atoms();
        let l_max = self.lipschitz_bound().max(f64::MIN_POSITIVE);
        let mut lip = l_max;
        let mut x = DVector::zeros(n);
        let mut fx = self.objective(&x);
        let mut trace = vec![fx];
        let mut y = x.clone();
        let mut t = 1.0f64;
        let mut iterations = 0;
        let scale = 1.0 + self.smooth_value_grad(&x).1.amax();
        // after a failed plain step, retry once with the global bound
        let mut safe = false;
        while iterations < opts.max_iter {
            iterations += 1;
            let (fy, gy) = self.smooth_value_grad(&y);
            // local Lipschitz estimate: try a longer step first, back off until the
            // quadratic upper bound holds
            lip = if safe { l_max } else { (lip * 0.5).max(l_max * 1e-6) };
            let z = loop {
                let z = penalty_prox(&(&y - &gy * (1.0 / lip)), self.lambda / lip, self.penalty, &self.layout);
                let d = &z - &y;
                let bound = fy + gy.dot(&d) + 0.5 * lip * d.norm_squared();
                if self.smooth_value(&z) <= bound + 1e-12 * fy.abs().max(1.0) || lip >= l_max {
                    break z;
                }
                lip = (lip * 2.0).min(l_max);
            };
            let fz = self.objective(&z);
            // gradient mapping at y; zero exactly at the minimizer
            let converged = (&y - &z).amax() * lip <= opts.tol * scale;
            // increases at rounding level do not trigger a restart
            if fz > fx + 8.0 * f64::EPSILON * fx.abs() {
                if converged || (t == 1.0 && safe) {
                    break;
                }
                safe = t == 1.0;
                t = 1.0;
                y = x.clone();
                continue;
            }
            safe = false;
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &z + (&z - &x) * ((t - 1.0) / t_next);
            x = z;
            t = t_next;
            fx = fz;
            trace.push(fx);
            if converged {
                break;
            }
        }
        Solution { x, objective: fx, iterations, trace }
    }
}

fn validate_members(members: &[DVector<f64>], dict: &BlockDictionary) -> Result<()> {
    if members.is_empty() {
        return Err(Error::EmptyCollection);
    }
    for f in members {
        if f.len() != dict.feature_dim() {
            return Err(Error::SchemaMismatch(format!(
                "member has {} features, dictionary expects {}",
                f.len(),
                dict.feature_dim()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("member features contain non-finite values".into()));
        }
    }
    Ok(())
}

fn validate_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("lambda must be non-negative, got {lambda}")));
    }
    Ok(())
}

fn coef_layout(dict: &BlockDictionary) -> GroupLayout {
    GroupLayout::new(dict.coef_groups(), dict.total_atoms()).expect("coefficient blocks partition the atoms")
}

/// Minimizes `(1/m) Σ loss(f_i − Dx) + λ Ω(x)` over the members jointly.
pub fn solve_joint(
    members: &[DVector<f64>],
    dict: &BlockDictionary,
    loss: Loss,
    penalty: Penalty,
    lambda: f64,
    opts: &SolverOptions,
) -> Result<Solution> {
    validate_members(members, dict)?;
    validate_lambda(lambda)?;
    if let Loss::Huber { tau } = loss {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("huber knee must be positive, got {tau}")));
        }
    }
    let problem = Problem { dict, data: DataTerm::Joint { members, loss }, penalty, lambda, layout: coef_layout(dict) };
    finite_solution(problem.solve(opts))
}

/// Minimizes `½‖f̄ − Dx‖² + λ Ω(x)`.
pub fn solve_mean(mean: &DVector<f64>, dict: &BlockDictionary, penalty: Penalty, lambda: f64, opts: &SolverOptions) -> Result<Solution> {
    validate_members(std::slice::from_ref(mean), dict)?;
    validate_lambda(lambda)?;
    let problem = Problem { dict, data: DataTerm::Mean { mean }, penalty, lambda, layout: coef_layout(dict) };
    finite_solution(problem.solve(opts))
}

fn finite_solution(s: Solution) -> Result<Solution> {
    if s.x.iter().all(|v| v.is_finite()) && s.objective.is_finite() {
        Ok(s)
    } else {
        Err(Error::Numeric("solver diverged".into()))
    }
}

/// Objective value of [`solve_joint`] at an arbitrary point.
pub fn joint_objective(members: &[DVector<f64>], dict: &BlockDictionary, loss: Loss, penalty: Penalty, lambda: f64, x: &DVector<f64>) -> f64 {
    Problem { dict, data: DataTerm::Joint { members, loss }, penalty, lambda, layout: coef_layout(dict) }.objective(x)
}

/// Smallest `λ` giving the all-zero descriptor.
pub fn lambda_max(members: &[DVector<f64>], dict: &BlockDictionary, loss: Loss, penalty: Penalty) -> Result<f64> {
    validate_members(members, dict)?;
    Ok(Problem { dict, data: DataTerm::Joint { members, loss }, penalty, lambda: 0.0, layout: coef_layout(dict) }
        .null_threshold())
}

pub fn mean_vector(members: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(members[0].len());
    for f in members {
        acc += f;
    }
    acc / members.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCollection {
    pub collection_id: String,
    pub members: Vec<ImageFeature>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub title: Vec<String>,
}

impl ImageCollection {
    pub fn member_vectors(&self) -> Vec<DVector<f64>> {
        self.members.iter().map(|f| DVector::from_column_slice(&f.values)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionDescriptor {
    pub collection_id: String,
    pub variant: Variant,
    pub x: Vec<f64>,
    pub density: f64,
    pub lambda: Option<f64>,
    pub tau: Option<f64>,
}

pub fn density(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|v| **v != 0.0).count() as f64 / x.len() as f64
}

/// How the Huber knee is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauRule {
    Fixed(f64),
    /// Median per-image residual norm of a least-squares warm start.
    #[default]
    MedianResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeParams {
    pub lambda: f64,
    pub tau: TauRule,
    pub solver: SolverOptions,
}

impl EncodeParams {
    pub fn new(lambda: f64) -> Self {
        EncodeParams { lambda, tau: TauRule::default(), solver: SolverOptions::default() }
    }
}

/// Resolves the Huber knee for a set of members.
pub fn resolve_tau(members: &[DVector<f64>], dict: &BlockDictionary, penalty: Penalty, rule: TauRule) -> Result<f64> {
    match rule {
        TauRule::Fixed(tau) if tau > 0.0 && tau.is_finite() => Ok(tau),
        TauRule::Fixed(tau) => Err(Error::InvalidConfig(format!("huber knee must be positive, got {tau}"))),
        TauRule::MedianResidual => {
            validate_members(members, dict)?;
            let mean = mean_vector(members);
            let warm_lambda = TAU_WARM_LAMBDA_FRACTION * lambda_max(std::slice::from_ref(&mean), dict, Loss::LeastSquares, penalty)?;
            let opts = SolverOptions { tol: DEFAULT_TOL, max_iter: TAU_WARM_ITERS };
            let x = solve_mean(&mean, dict, penalty, warm_lambda, &opts)?.x;
            let dx = dict.apply(&x);
            let mut norms: Vec<f64> = members.iter().map(|f| (f - &dx).norm()).collect();
            Ok(median(&mut norms).max(TAU_FLOOR))
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Computes the descriptor of one collection.
pub fn encode_collection(c: &ImageCollection, dict: &BlockDictionary, variant: Variant, params: &EncodeParams) -> Result<CollectionDescriptor> {
    let members = c.member_vectors();
    validate_members(&members, dict)?;
    let (x, lambda, tau) = match variant {
        Variant::RawAvg => (mean_vector(&members), None, None),
        Variant::AvgL1 | Variant::AvgG => {
            let penalty = variant.penalty().unwrap();
            let s = solve_mean(&mean_vector(&members), dict, penalty, params.lambda, &params.solver)?;
            (s.x, Some(params.lambda), None)
        }
        Variant::HuberL1 | Variant::HuberG => {
            let penalty = variant.penalty().unwrap();
            let tau = resolve_tau(&members, dict, penalty, params.tau)?;
            let s = solve_joint(&members, dict, Loss::Huber { tau }, penalty, params.lambda, &params.solver)?;
            (s.x, Some(params.lambda), Some(tau))
        }
    };
    let x: Vec<f64> = x.iter().copied().collect();
    Ok(CollectionDescriptor {
        collection_id: c.collection_id.clone(),
        variant,
        density: density(&x),
        x,
        lambda,
        tau,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub lambda: f64,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaTuning {
    pub lambda: f64,
    pub density: f64,
    pub tau: Option<f64>,
    pub probes: Vec<Probe>,
}

/// Bisection over `log λ` for a descriptor density of `target ± 0.05`.
///
/// On success returns the first probe inside the band. When 30 probes do not
/// reach it, returns [`Error::TuningNotReached`] carrying the nearest probe.
pub fn tune_lambda_for_density(
    c: &ImageCollection,
    dict: &BlockDictionary,
    variant: Variant,
    target: f64,
    tau_rule: TauRule,
    solver: &SolverOptions,
) -> Result<LambdaTuning> {
    let penalty = variant
        .penalty()
        .ok_or_else(|| Error::InvalidConfig("raw-avg has no regularization weight to tune".into()))?;
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidConfig(format!("target density must lie in (0, 1], got {target}")));
    }
    let members = c.member_vectors();
    validate_members(&members, dict)?;
    let tau = if variant.is_huber() { Some(resolve_tau(&members, dict, penalty, tau_rule)?) } else { None };
    let mean = mean_vector(&members);
    let run = |lambda: f64| -> Result<f64> {
        let s = match tau {
            Some(tau) => solve_joint(&members, dict, Loss::Huber { tau }, penalty, lambda, solver)?,
            None => solve_mean(&mean, dict, penalty, lambda, solver)?,
        };
        Ok(density(s.x.as_slice()))
    };
    let loss = match tau {
        Some(tau) => Loss::Huber { tau },
        None => Loss::LeastSquares,
    };
    let hi0 = match tau {
        Some(_) => lambda_max(&members, dict, loss, penalty)?,
        None => lambda_max(std::slice::from_ref(&mean), dict, loss, penalty)?,
    };
    if hi0 <= 0.0 {
        return Err(Error::TuningNotReached { lambda: 0.0, density: 0.0 });
    }
    let (mut lo, mut hi) = ((hi0 * 1e-4).ln(), hi0.ln());
    let mut probes: Vec<Probe> = Vec::new();
    for _ in 0..MAX_TUNING_PROBES {
        let mid = 0.5 * (lo + hi);
        let lambda = mid.exp();
        let d = run(lambda)?;
        probes.push(Probe { lambda, density: d });
        if (d - target).abs() <= DENSITY_TOLERANCE {
            return Ok(LambdaTuning { lambda, density: d, tau, probes });
        }
        if d > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = probes
        .iter()
        .min_by(|a, b| (a.density - target).abs().total_cmp(&(b.density - target).abs()))
        .copied()
        .unwrap();
    Err(Error::TuningNotReached { lambda: best.lambda, density: best.density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::{assemble_block_diagonal, SubDictionary};
    use crate::features::FeatureSchema;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_dict(dims: &[usize], k: usize, seed: u64) -> BlockDictionary {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let schema = FeatureSchema::from_dims(dims.iter().enumerate().map(|(i, &d)| (format!("u{i}"), d))).unwrap();
        let subs = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut atoms = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
                for mut c in atoms.column_iter_mut() {
                    let n = c.norm();
                    c /= n;
                }
                SubDictionary { unit_name: format!("u{i}"), atoms }
            })
            .collect();
        assemble_block_diagonal(subs, &schema).unwrap()
    }

    fn collection(members: Vec<DVector<f64>>) -> ImageCollection {
        ImageCollection {
            collection_id: "c".into(),
            members: members
                .into_iter()
                .enumerate()
                .map(|(i, v)| ImageFeature { image_id: format!("i{i}"), values: v.iter().copied().collect() })
                .collect(),
            category: None,
            title: vec![],
        }
    }

    #[test]
    fn huber_examples() {
        let (v, g) = huber_value_grad(&DVector::zeros(3), 1.0);
        assert_eq!(v, 0.0);
        assert_eq!(g, DVector::zeros(3));

        let knee = DVector::from_column_slice(&[1.2, 1.6]);
        let (v, _) = huber_value_grad(&knee, 2.0);
        assert!((v - 1.0).abs() < 1e-12);
        assert!((huber_value(2.0, 2.0) - (2.0 - 1.0)).abs() < 1e-12);

        let far = DVector::from_column_slice(&[3.0, 4.0]);
        let (v, g) = huber_value_grad(&far, 2.0);
        assert_eq!(v, 4.0);
        assert!((g.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huber_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for tau in [0.3, 1.0, 5.0] {
            for _ in 0..20 {
                let e = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
                let (_, g) = huber_value_grad(&e, tau);
                assert!(g.norm() <= 1.0 + 1e-12);
                for i in 0..4 {
                    let h = 1e-6;
                    let mut p = e.clone();
                    p[i] += h;
                    let mut q = e.clone();
                    q[i] -= h;
                    let fd = (huber_value_grad(&p, tau).0 - huber_value_grad(&q, tau).0) / (2.0 * h);
                    assert!((fd - g[i]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prox_l1_examples() {
        let v = DVector::from_column_slice(&[3.0, -0.5, 0.2]);
        assert_eq!(prox_l1(&v, 1.0), DVector::from_column_slice(&[2.0, 0.0, 0.0]));
        assert_eq!(prox_l1(&v, 0.0), v);
    }

    #[test]
    fn prox_group_examples() {
        let v = DVector::from_column_slice(&[3.0, 4.0]);
        let p = prox_group_l21(&v, 1.0, &[0..2]).unwrap();
        assert!((p[0] - 2.4).abs() < 1e-12 && (p[1] - 3.2).abs() < 1e-12);

        let v = DVector::from_column_slice(&[0.3, 0.4, 5.0]);
        let p = prox_group_l21(&v, 0.5, &[0..2, 2..3]).unwrap();
        assert_eq!(p[0], 0.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn group_layout_errors() {
        let v = DVector::zeros(4);
        assert!(matches!(prox_group_l21(&v, 1.0, &[0..3, 2..4]), Err(Error::Layout(_))));
        assert!(matches!(prox_group_l21(&v, 1.0, &[0..2]), Err(Error::Layout(_))));
        assert!(matches!(prox_group_l21(&v, 1.0, &[0..2, 3..4]), Err(Error::Layout(_))));
        assert!(prox_group_l21(&v, 1.0, &[2..4, 0..2]).is_ok());
    }

    #[test]
    fn atom_recovery_avg_l1() {
        let dict = random_dict(&[6, 5], 4, 1);
        let dense = dict.materialize();
        let atom = dense.column(5).into_owned();
        let c = collection(vec![atom.clone(); 5]);
        let d = encode_collection(&c, &dict, Variant::AvgL1, &EncodeParams::new(0.01)).unwrap();
        let best = (0..d.x.len()).max_by(|&a, &b| d.x[a].abs().total_cmp(&d.x[b].abs())).unwrap();
        assert_eq!(best, 5);
    }

    #[test]
    fn null_lambda_gives_zero_descriptor() {
        let dict = random_dict(&[5, 4], 6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let members: Vec<DVector<f64>> = (0..4).map(|_| DVector::from_fn(9, |_, _| rng.sample(StandardNormal))).collect();
        let c = collection(members.clone());
        for variant in [Variant::HuberL1, Variant::HuberG, Variant::AvgL1, Variant::AvgG] {
            let penalty = variant.penalty().unwrap();
            let lmax = if variant.is_huber() {
                let tau = resolve_tau(&members, &dict, penalty, TauRule::MedianResidual).unwrap();
                lambda_max(&members, &dict, Loss::Huber { tau }, penalty).unwrap()
            } else {
                lambda_max(&[mean_vector(&members)], &dict, Loss::LeastSquares, penalty).unwrap()
            };
            let d = encode_collection(&c, &dict, variant, &EncodeParams::new(lmax * 1.0001)).unwrap();
            assert_eq!(d.density, 0.0, "{variant}");
            assert!(d.x.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn raw_avg_is_the_mean() {
        let dict = random_dict(&[3, 2], 2, 3);
        let a = DVector::from_column_slice(&[1.0, 0.0, 0.0, 2.0, 0.0]);
        let b = DVector::from_column_slice(&[3.0, 0.0, 0.0, 0.0, 0.0]);
        let d = encode_collection(&collection(vec![a, b]), &dict, Variant::RawAvg, &EncodeParams::new(0.1)).unwrap();
        assert_eq!(d.x, vec![2.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.density, 0.4);
        assert_eq!(d.lambda, None);
    }

    #[test]
    fn encode_errors() {
        let dict = random_dict(&[3, 2], 2, 3);
        let empty = collection(vec![]);
        assert!(matches!(encode_collection(&empty, &dict, Variant::HuberL1, &EncodeParams::new(0.1)), Err(Error::EmptyCollection)));
        let bad = collection(vec![DVector::from_column_slice(&[f64::INFINITY, 0.0, 0.0, 0.0, 0.0])]);
        assert!(matches!(encode_collection(&bad, &dict, Variant::AvgL1, &EncodeParams::new(0.1)), Err(Error::Numeric(_))));
        let short = collection(vec![DVector::zeros(4)]);
        assert!(matches!(encode_collection(&short, &dict, Variant::AvgG, &EncodeParams::new(0.1)), Err(Error::SchemaMismatch(_))));
    }

    #[test]
    fn objective_trace_is_monotone() {
        let dict = random_dict(&[6, 6, 4], 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let members: Vec<DVector<f64>> = (0..7).map(|_| DVector::from_fn(16, |_, _| rng.sample(StandardNormal))).collect();
        for (loss, penalty) in [
            (Loss::Huber { tau: 0.5 }, Penalty::L1),
            (Loss::Huber { tau: 0.5 }, Penalty::Group),
            (Loss::LeastSquares, Penalty::L1),
        ] {
            let s = solve_joint(&members, &dict, loss, penalty, 0.05, &SolverOptions::default()).unwrap();
            for w in s.trace.windows(2) {
                assert!(w[1] <= w[0], "{loss:?} {penalty:?}: {} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn zero_groups_are_entirely_zero() {
        let dict = random_dict(&[6, 6, 6, 6], 5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let members: Vec<DVector<f64>> = (0..5).map(|_| DVector::from_fn(24, |_, _| rng.sample(StandardNormal))).collect();
        let lmax = lambda_max(&members, &dict, Loss::Huber { tau: 1.0 }, Penalty::Group).unwrap();
        let mut prev_active = usize::MAX;
        for frac in [0.05, 0.2, 0.4, 0.6, 0.8, 0.95] {
            let s = solve_joint(&members, &dict, Loss::Huber { tau: 1.0 }, Penalty::Group, lmax * frac, &SolverOptions::default()).unwrap();
            let mut active = 0;
            for g in dict.coef_groups() {
                let block = s.x.rows_range(g);
                if block.iter().any(|&v| v != 0.0) {
                    active += 1;
                    assert!(block.norm() > 0.0);
                } else {
                    assert!(block.iter().all(|&v| v == 0.0));
                }
            }
            assert!(active <= prev_active, "active groups grew with lambda");
            prev_active = active;
        }
    }

    #[test]
    fn tuning_probes_are_monotone() {
        let dict = random_dict(&[8, 8, 8], 10, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let members: Vec<DVector<f64>> = (0..6).map(|_| DVector::from_fn(24, |_, _| rng.sample(StandardNormal))).collect();
        let c = collection(members);
        let t = tune_lambda_for_density(&c, &dict, Variant::HuberL1, 0.2, TauRule::MedianResidual, &SolverOptions::default()).unwrap();
        assert!((t.density - 0.2).abs() <= DENSITY_TOLERANCE);
        let mut probes = t.probes.clone();
        probes.sort_by(|a, b| a.lambda.total_cmp(&b.lambda));
        for w in probes.windows(2) {
            assert!(w[1].density <= w[0].density);
        }
    }

    #[test]
    fn dense_target_reports_nearest() {
        let dict = random_dict(&[4, 4], 12, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let members: Vec<DVector<f64>> = (0..3).map(|_| DVector::from_fn(8, |_, _| rng.sample(StandardNormal))).collect();
        let c = collection(members);
        // the densest reachable code of an 8-dim signal over 24 atoms is far below 1
        match tune_lambda_for_density(&c, &dict, Variant::AvgL1, 1.0, TauRule::MedianResidual, &SolverOptions::default()) {
            Err(Error::TuningNotReached { density, .. }) => assert!(density > 0.0 && density < 0.95),
            other => panic!("unexpected {other:?}"),
        }
        assert!(tune_lambda_for_density(&c, &dict, Variant::RawAvg, 0.1, TauRule::MedianResidual, &SolverOptions::default()).is_err());
    }

    #[test]
    fn variant_names() {
        for v in Variant::ALL {
            assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.as_str()));
        }
        assert!("huber".parse::<Variant>().is_err());
    }
}
