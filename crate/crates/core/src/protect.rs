//! Gradient protections applied by the active party before the cut-layer
//! gradient matrix leaves it: isotropic noise, the max-norm heuristic and
//! Marvell, the symmetric-KL-optimal Gaussian perturbation.
//!
//! Marvell models the per-class gradients as spherical Gaussians
//! `g1 ~ N(mean_pos, u I)` and `g0 ~ N(mean_neg, v I)` and adds zero-mean noise
//! whose covariances are rank-one along `delta = mean_pos - mean_neg` plus an
//! isotropic part. Choosing those four eigenvalues is a small constrained
//! problem solved by [`marvell_solve`]; [`tune_power`] then searches for the
//! smallest noise budget reaching a symmetric-KL target.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{fit_spherical_pair, sum_kl_target_for_detection_error};
use crate::numerics::{norm2_unchecked, sample_structured_gaussian, Mat, Rng, StructuredCov};

/// Floor applied to fitted class variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Isotropic Gaussian noise `N(0, (s/d) max_i |g_i|^2 I)` on every row.
pub fn iso_protect(grads: &Mat, s: f64, rng: &mut Rng) -> Result<Mat> {
    if !(s >= 0.0) || !s.is_finite() {
        return Err(Error::arg(format!("iso scale s = {s}")));
    }
    let d = grads.cols() as f64;
    let max_sq = grads
        .row_iter()
        .map(|r| r.iter().map(|x| x * x).sum::<f64>())
        .fold(0.0, f64::max);
    let sd = (s / d * max_sq).sqrt();
    let mut out = grads.clone();
    if sd == 0.0 {
        return Ok(out);
    }
    for x in out.as_mut_slice() {
        *x += sd * rng.normal();
    }
    Ok(out)
}

/// Max-norm heuristic: each non-zero row `g_j` gets noise `l_j g_j` with
/// `l_j ~ N(0, M^2 / |g_j|^2 - 1)`, `M` the largest row norm, so that every
/// row's expected squared norm equals `M^2`. Zero rows pass through.
pub fn max_norm_protect(grads: &Mat, rng: &mut Rng) -> Mat {
    let norms: Vec<f64> = grads.row_iter().map(norm2_unchecked).collect();
    let max = norms.iter().copied().fold(0.0, f64::max);
    let mut out = grads.clone();
    for (j, &n) in norms.iter().enumerate() {
        if n == 0.0 {
            continue;
        }
        let var = (max * max / (n * n) - 1.0).max(0.0);
        if var == 0.0 {
            continue;
        }
        let l = var.sqrt() * rng.normal();
        for x in out.row_mut(j) {
            *x += l * *x;
        }
    }
    out
}

/// Batch statistics feeding the Marvell solver.
#[derive(Debug, Clone, PartialEq)]
pub struct GradStats {
    pub mean_pos: Vec<f64>,
    pub mean_neg: Vec<f64>,
    /// positive-class spherical variance
    pub u: f64,
    /// negative-class spherical variance
    pub v: f64,
    pub delta_norm_sq: f64,
    /// fraction of positive examples
    pub p: f64,
    pub d: usize,
}

impl GradStats {
    /// Fits the statistics from one mini-batch. Returns `None` for
    /// single-class batches. Variances are floored at [`VARIANCE_FLOOR`].
    pub fn from_batch(grads: &Mat, labels: &[u8]) -> Result<Option<Self>> {
        if labels.len() != grads.rows() {
            return Err(Error::arg("labels and gradient rows differ"));
        }
        let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
        if pos.is_empty() || neg.is_empty() {
            return Ok(None);
        }
        let fit = fit_spherical_pair(&grads.select_rows(&pos), &grads.select_rows(&neg))?;
        let delta_norm_sq = fit.delta.iter().map(|x| x * x).sum();
        Ok(Some(Self {
            mean_pos: fit.pos.mean,
            mean_neg: fit.neg.mean,
            u: fit.pos.var_iso.max(VARIANCE_FLOOR),
            v: fit.neg.var_iso.max(VARIANCE_FLOOR),
            delta_norm_sq,
            p: pos.len() as f64 / labels.len() as f64,
            d: grads.cols(),
        }))
    }

    /// Statistics without the mean vectors, for solver-only use.
    pub fn scalar(u: f64, v: f64, delta_norm_sq: f64, p: f64, d: usize) -> Self {
        Self {
            mean_pos: Vec::new(),
            mean_neg: Vec::new(),
            u,
            v,
            delta_norm_sq,
            p,
            d,
        }
    }

    fn delta(&self) -> Vec<f64> {
        self.mean_pos
            .iter()
            .zip(&self.mean_neg)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// The four noise eigenvalues: `lam1_*` along `delta`, `lam2_*` on its
/// orthogonal complement.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Lambdas {
    pub lam1_pos: f64,
    pub lam2_pos: f64,
    pub lam1_neg: f64,
    pub lam2_neg: f64,
}

impl Lambdas {
    /// `p tr(Sigma_1) + (1 - p) tr(Sigma_0)`.
    pub fn power(&self, p: f64, d: usize) -> f64 {
        let k = d as f64 - 1.0;
        p * (self.lam1_pos + k * self.lam2_pos) + (1.0 - p) * (self.lam1_neg + k * self.lam2_neg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarvellSolution {
    pub lams: Lambdas,
    pub power: f64,
    pub objective: f64,
    /// `objective - 2d`. This is twice the symmetric KL of the perturbed
    /// Gaussian pair, so it is zero exactly when the two coincide.
    pub sum_kl_star: f64,
}

fn obj_raw(l: &Lambdas, s: &GradStats) -> f64 {
    let k = s.d as f64 - 1.0;
    let (a2, b2) = (l.lam2_neg + s.v, l.lam2_pos + s.u);
    let (a1, b1) = (l.lam1_neg + s.v, l.lam1_pos + s.u);
    let dd = s.delta_norm_sq;
    k * a2 / b2 + k * b2 / a2 + (a1 + dd) / b1 + (b1 + dd) / a1
}

/// The four-term Marvell objective. It equals `2 sumKL + 2d` where sumKL is
/// the symmetric KL between `N(mean_pos, u I + Sigma_1)` and
/// `N(mean_neg, v I + Sigma_0)`.
pub fn marvell_objective(l: &Lambdas, stats: &GradStats) -> Result<f64> {
    for x in [l.lam1_pos, l.lam2_pos, l.lam1_neg, l.lam2_neg] {
        if !(x >= 0.0) {
            return Err(Error::arg(format!("negative eigenvalue {x}")));
        }
    }
    let dens = [
        l.lam1_pos + stats.u,
        l.lam2_pos + stats.u,
        l.lam1_neg + stats.v,
        l.lam2_neg + stats.v,
    ];
    if dens.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::SingularDivergence("zero denominator in objective".into()));
    }
    Ok(obj_raw(l, stats))
}

fn solution_from(l: Lambdas, stats: &GradStats, power: f64) -> MarvellSolution {
    let objective = obj_raw(&l, stats);
    MarvellSolution {
        lams: l,
        power,
        objective,
        sum_kl_star: objective - 2.0 * stats.d as f64,
    }
}

/// Solver stopping rule.
#[derive(Debug, Clone, Copy)]
pub struct SolverConfig {
    pub max_rounds: usize,
    pub tol: f64,
    /// resolution of the warm-start grid over the budget simplex
    pub warm_grid: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_rounds: 200,
            tol: 1e-10,
            warm_grid: 40,
        }
    }
}

/// The free part of the problem once the budget is active and one isotropic
/// eigenvalue is pinned to zero. Coordinates are budget shares
/// `[lam1_pos, lam1_neg, lam2_free]`, summing to one.
pub struct ReducedProblem<'a> {
    stats: &'a GradStats,
    power: f64,
    /// true when the isotropic noise goes to the positive class (u < v)
    iso_on_pos: bool,
    weights: [f64; 3],
}

impl<'a> ReducedProblem<'a> {
    pub fn new(stats: &'a GradStats, power: f64) -> Self {
        let p = stats.p;
        let k = stats.d as f64 - 1.0;
        let iso_on_pos = stats.u < stats.v;
        let w_iso = k * if iso_on_pos { p } else { 1.0 - p };
        Self {
            stats,
            power,
            iso_on_pos,
            weights: [p, 1.0 - p, w_iso],
        }
    }

    pub fn lambdas(&self, s: &[f64; 3]) -> Lambdas {
        let lam = |i: usize| (s[i].max(0.0) * self.power / self.weights[i]).max(0.0);
        let (l1p, l1n, l2) = (lam(0), lam(1), lam(2));
        if self.iso_on_pos {
            Lambdas {
                lam1_pos: l1p,
                lam2_pos: l2,
                lam1_neg: l1n,
                lam2_neg: 0.0,
            }
        } else {
            Lambdas {
                lam1_pos: l1p,
                lam2_pos: 0.0,
                lam1_neg: l1n,
                lam2_neg: l2,
            }
        }
    }

    /// `lam2 <= lam1` for the class receiving isotropic noise, as a share
    /// inequality `g(s) <= 0`.
    fn ordering_gap(&self, s: &[f64; 3]) -> f64 {
        let c = if self.iso_on_pos { 0 } else { 1 };
        s[2] / self.weights[2] - s[c] / self.weights[c]
    }

    pub fn is_feasible(&self, s: &[f64; 3]) -> bool {
        s.iter().all(|&x| x >= -1e-15) && self.ordering_gap(s) <= 1e-12
    }

    pub fn value(&self, s: &[f64; 3]) -> f64 {
        obj_raw(&self.lambdas(s), self.stats)
    }

    /// Feasible step range `[lo, hi]` along `dir` from `s`.
    fn step_range(&self, s: &[f64; 3], dir: &[f64; 3]) -> (f64, f64) {
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if dir[i] > 0.0 {
                lo = lo.max(-s[i] / dir[i]);
            } else if dir[i] < 0.0 {
                hi = hi.min(-s[i] / dir[i]);
            }
        }
        // linear ordering constraint: g(s) + t g(dir) <= 0
        let g0 = self.ordering_gap(s).min(0.0);
        let gd = self.ordering_gap(dir);
        if gd > 0.0 {
            hi = hi.min(-g0 / gd);
        } else if gd < 0.0 {
            lo = lo.max(-g0 / gd);
        }
        (lo.min(0.0), hi.max(0.0))
    }

    /// Exhaustive scan of the share simplex at resolution `n`.
    fn grid_start(&self, n: usize) -> [f64; 3] {
        let mut best = [1.0 / 3.0, 1.0 / 3.0, 0.0];
        let mut best_v = f64::INFINITY;
        for i in 0..=n {
            for j in 0..=(n - i) {
                let s = [i as f64 / n as f64, j as f64 / n as f64, (n - i - j) as f64 / n as f64];
                if !self.is_feasible(&s) {
                    continue;
                }
                let v = self.value(&s);
                if v < best_v {
                    best_v = v;
                    best = s;
                }
            }
        }
        best
    }

    /// One exact-ish line search: coarse scan of the feasible segment, then
    /// golden section inside the best bracket.
    fn line_search(&self, s: &[f64; 3], dir: &[f64; 3]) -> Option<([f64; 3], f64)> {
        let (lo, hi) = self.step_range(s, dir);
        if hi - lo <= 1e-15 {
            return None;
        }
        let at = |t: f64| {
            let mut x = *s;
            for i in 0..3 {
                x[i] += t * dir[i];
            }
            x
        };
        let f = |t: f64| self.value(&at(t));
        const SCAN: usize = 16;
        let h = (hi - lo) / SCAN as f64;
        let mut best_k = 0;
        let mut best_v = f64::INFINITY;
        for k in 0..=SCAN {
            let v = f(lo + k as f64 * h);
            if v < best_v {
                best_v = v;
                best_k = k;
            }
        }
        let (mut a, mut b) = (
            lo + best_k.saturating_sub(1) as f64 * h,
            lo + (best_k + 1).min(SCAN) as f64 * h,
        );
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let mut c = b - ratio * (b - a);
        let mut d = a + ratio * (b - a);
        let (mut fc, mut fd) = (f(c), f(d));
        while b - a > 1e-14 * (1.0 + hi - lo) {
            if fc < fd {
                b = d;
                d = c;
                fd = fc;
                c = b - ratio * (b - a);
                fc = f(c);
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + ratio * (b - a);
                fd = f(d);
            }
        }
        let t_mid = 0.5 * (a + b);
        let mut cands = [(t_mid, f(t_mid)), (lo + best_k as f64 * h, best_v)];
        cands.sort_by(|x, y| x.1.total_cmp(&y.1));
        let (t, v) = cands[0];
        Some((at(t), v))
    }

    fn boundary_dir(&self) -> [f64; 3] {
        // keep s2/w2 = s_c/w_c while trading against the other along-share
        let c = if self.iso_on_pos { 0 } else { 1 };
        let o = 1 - c;
        let mut dir = [0.0; 3];
        dir[2] = self.weights[2];
        dir[c] = self.weights[c];
        dir[o] = -(self.weights[2] + self.weights[c]);
        dir
    }
}

/// Minimises [`marvell_objective`] under the power budget
/// `p (lam1_pos + (d-1) lam2_pos) + (1-p) (lam1_neg + (d-1) lam2_neg) <= power`,
/// non-negativity and `lam2 <= lam1` per class.
///
/// The optimum uses the whole budget, and only the class with the smaller
/// variance receives isotropic noise (`lam2_pos = 0` when `u >= v`,
/// `lam2_neg = 0` otherwise). What remains is a problem over three budget
/// shares, solved by alternating line searches (each moves budget between
/// two coordinates, or along the `lam2 = lam1` edge) from a grid warm start.
pub fn marvell_solve(stats: &GradStats, power: f64) -> Result<MarvellSolution> {
    marvell_solve_with(stats, power, SolverConfig::default())
}

pub fn marvell_solve_with(
    stats: &GradStats,
    power: f64,
    cfg: SolverConfig,
) -> Result<MarvellSolution> {
    validate_stats(stats)?;
    if !(power >= 0.0) || !power.is_finite() {
        return Err(Error::arg(format!("power budget {power}")));
    }
    if power == 0.0 {
        return Ok(solution_from(Lambdas::default(), stats, 0.0));
    }
    let prob = ReducedProblem::new(stats, power);
    let mut s = prob.grid_start(cfg.warm_grid.max(2));
    let mut val = prob.value(&s);
    let dirs = [
        [1.0, -1.0, 0.0],
        [1.0, 0.0, -1.0],
        [0.0, 1.0, -1.0],
        prob.boundary_dir(),
    ];
    let mut converged = false;
    for _ in 0..cfg.max_rounds {
        let start = val;
        for dir in &dirs {
            if let Some((next, v)) = prob.line_search(&s, dir) {
                if v < val {
                    s = next;
                    val = v;
                }
            }
        }
        if start - val < cfg.tol * val.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    // clean up round-off so the budget holds with equality
    s.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = s.iter().sum();
    s.iter_mut().for_each(|x| *x /= total);
    let lams = prob.lambdas(&s);
    let sol = solution_from(lams, stats, power);
    if !converged {
        return Err(Error::Convergence {
            message: format!("marvell solver did not settle in {} rounds", cfg.max_rounds),
            best: Some(Box::new(sol)),
        });
    }
    Ok(sol)
}

fn validate_stats(s: &GradStats) -> Result<()> {
    if !(s.u > 0.0 && s.v > 0.0) {
        return Err(Error::arg(format!("variances must be > 0 (u {}, v {})", s.u, s.v)));
    }
    if !(s.p > 0.0 && s.p < 1.0) {
        return Err(Error::arg(format!("positive fraction {} not in (0, 1)", s.p)));
    }
    if s.d < 2 {
        return Err(Error::arg("cut-layer width must be >= 2"));
    }
    if !(s.delta_norm_sq >= 0.0) {
        return Err(Error::arg("negative |delta|^2"));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct PowerSearch {
    pub power: f64,
    pub solution: MarvellSolution,
    /// `(power, sum_kl_star)` at every budget visited by the geometric phase,
    /// in visiting order (so with increasing power).
    pub trajectory: Vec<(f64, f64)>,
}

/// Grows the budget geometrically from `p0` until `sum_kl_star <= target`,
/// then bisects down to within 1% of the smallest budget that satisfies it.
pub fn tune_power(
    stats: &GradStats,
    target: f64,
    p0: f64,
    growth: f64,
    max_iters: usize,
) -> Result<PowerSearch> {
    if !(target > 0.0) {
        return Err(Error::arg(format!("sumKL target {target} must be > 0")));
    }
    if !(p0 > 0.0) || !(growth > 1.0) {
        return Err(Error::arg("need p0 > 0 and growth > 1"));
    }
    let zero = marvell_solve(stats, 0.0)?;
    if zero.sum_kl_star <= target {
        return Ok(PowerSearch {
            power: 0.0,
            trajectory: vec![(0.0, zero.sum_kl_star)],
            solution: zero,
        });
    }
    let mut trajectory = vec![(0.0, zero.sum_kl_star)];
    let mut lo = 0.0;
    let mut hi = p0;
    let mut hi_sol = None;
    for _ in 0..max_iters {
        let sol = marvell_solve(stats, hi)?;
        trajectory.push((hi, sol.sum_kl_star));
        if sol.sum_kl_star <= target {
            hi_sol = Some(sol);
            break;
        }
        lo = hi;
        hi *= growth;
    }
    let Some(mut best) = hi_sol else {
        return Err(Error::Convergence {
            message: format!("sumKL target {target} not reached within {max_iters} budget steps"),
            best: None,
        });
    };
    while hi - lo > 0.01 * hi {
        let mid = 0.5 * (lo + hi);
        let sol = marvell_solve(stats, mid)?;
        if sol.sum_kl_star <= target {
            hi = mid;
            best = sol;
        } else {
            lo = mid;
        }
    }
    Ok(PowerSearch {
        power: hi,
        solution: best,
        trajectory,
    })
}

/// Default starting budget: a quarter of the summed intrinsic variance.
pub fn default_p0(stats: &GradStats) -> f64 {
    0.25 * (stats.u + stats.v) * stats.d as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MarvellTarget {
    /// bound on `sum_kl_star`
    SumKl(f64),
    /// desired detection-error lower bound `L`, mapped to `(2 - 4L)^2`
    DetectionError(f64),
}

impl MarvellTarget {
    pub fn sum_kl(&self) -> Result<f64> {
        match *self {
            MarvellTarget::SumKl(x) if x > 0.0 => Ok(x),
            MarvellTarget::SumKl(x) => Err(Error::arg(format!("sum_kl target {x}"))),
            MarvellTarget::DetectionError(l) => sum_kl_target_for_detection_error(l),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MarvellOutcome {
    pub grads: Mat,
    /// `None` when the batch was passed through unchanged
    pub search: Option<PowerSearch>,
}

/// Fits the batch statistics, tunes the budget against `target`, and adds
/// class-dependent noise `N(0, Sigma_1)` to positive rows and
/// `N(0, Sigma_0)` to negative rows.
///
/// Single-class batches pass through. When the class means coincide the
/// direction is undefined and each class gets isotropic noise carrying its
/// share of the budget.
pub fn marvell_protect(
    grads: &Mat,
    labels: &[u8],
    target: MarvellTarget,
    rng: &mut Rng,
) -> Result<MarvellOutcome> {
    marvell_protect_with_power(grads, labels, target, None, rng)
}

/// As [`marvell_protect`], optionally skipping the search and reusing a
/// fixed budget.
pub fn marvell_protect_with_power(
    grads: &Mat,
    labels: &[u8],
    target: MarvellTarget,
    fixed_power: Option<f64>,
    rng: &mut Rng,
) -> Result<MarvellOutcome> {
    let Some(stats) = GradStats::from_batch(grads, labels)? else {
        warn!("marvell: single-class batch passed through unprotected");
        return Ok(MarvellOutcome {
            grads: grads.clone(),
            search: None,
        });
    };
    let target = target.sum_kl()?;
    let search = match fixed_power {
        Some(power) => {
            let solution = marvell_solve(&stats, power)?;
            PowerSearch {
                power,
                trajectory: vec![(power, solution.sum_kl_star)],
                solution,
            }
        }
        None => tune_power(&stats, target, default_p0(&stats), 2.0, 200)?,
    };
    let l = search.solution.lams;
    let d = stats.d;
    let (cov_pos, cov_neg) = if stats.delta_norm_sq > 0.0 {
        let delta = stats.delta();
        let n = stats.delta_norm_sq.sqrt();
        let dir: Vec<f64> = delta.iter().map(|x| x / n).collect();
        (
            StructuredCov::new(l.lam1_pos, l.lam2_pos, dir.clone())?,
            StructuredCov::new(l.lam1_neg, l.lam2_neg, dir)?,
        )
    } else {
        let k = d as f64 - 1.0;
        (
            StructuredCov::isotropic((l.lam1_pos + k * l.lam2_pos) / d as f64, d),
            StructuredCov::isotropic((l.lam1_neg + k * l.lam2_neg) / d as f64, d),
        )
    };
    let mut out = grads.clone();
    let zero = vec![0.0; d];
    for (cls, cov) in [(1u8, &cov_pos), (0u8, &cov_neg)] {
        let rows: Vec<usize> = (0..labels.len())
            .filter(|&i| (labels[i] == 1) == (cls == 1))
            .collect();
        let noise = sample_structured_gaussian(&zero, cov, rows.len(), rng)?;
        for (k, &i) in rows.iter().enumerate() {
            for (x, e) in out.row_mut(i).iter_mut().zip(noise.row(k)) {
                *x += e;
            }
        }
    }
    Ok(MarvellOutcome {
        grads: out,
        search: Some(search),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProtectionKind {
    None,
    Iso { s: f64 },
    MaxNorm,
    Marvell { target: MarvellTarget, reuse_power: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtectionConfig {
    pub kind: ProtectionKind,
    pub seed: u64,
}

impl Default for ProtectionConfig {
    fn default() -> Self {
        Self {
            kind: ProtectionKind::None,
            seed: 0,
        }
    }
}

/// The `[protection]` section of the experiment config.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProtectionSection {
    pub kind: String,
    pub s: Option<f64>,
    pub sum_kl: Option<f64>,
    #[serde(rename = "L")]
    pub l: Option<f64>,
    pub reuse_power: Option<bool>,
    pub seed: Option<u64>,
}

impl ProtectionConfig {
    pub fn from_section(sec: &ProtectionSection, default_seed: u64) -> Result<Self> {
        let kind = match sec.kind.as_str() {
            "none" => ProtectionKind::None,
            "iso" => {
                let s = sec
                    .s
                    .ok_or_else(|| Error::Config("iso protection needs `s`".into()))?;
                if !(s >= 0.0) {
                    return Err(Error::Config(format!("iso s = {s} must be >= 0")));
                }
                ProtectionKind::Iso { s }
            }
            "max_norm" => ProtectionKind::MaxNorm,
            "marvell" => {
                let target = match (sec.sum_kl, sec.l) {
                    (Some(k), None) => MarvellTarget::SumKl(k),
                    (None, Some(l)) => MarvellTarget::DetectionError(l),
                    _ => {
                        return Err(Error::Config(
                            "marvell protection needs exactly one of `sum_kl` or `L`".into(),
                        ))
                    }
                };
                target.sum_kl().map_err(|e| Error::Config(e.to_string()))?;
                ProtectionKind::Marvell {
                    target,
                    reuse_power: sec.reuse_power.unwrap_or(false),
                }
            }
            other => return Err(Error::Config(format!("unknown protection kind `{other}`"))),
        };
        Ok(Self {
            kind,
            seed: sec.seed.unwrap_or(default_seed),
        })
    }

    /// Short label used in reports, e.g. `marvell_L0.3`.
    pub fn label(&self) -> String {
        match &self.kind {
            ProtectionKind::None => "none".into(),
            ProtectionKind::Iso { s } => format!("iso_{s}"),
            ProtectionKind::MaxNorm => "max_norm".into(),
            ProtectionKind::Marvell { target, .. } => match target {
                MarvellTarget::SumKl(k) => format!("marvell_sumkl{k}"),
                MarvellTarget::DetectionError(l) => format!("marvell_L{l}"),
            },
        }
    }
}

/// Stateful protection applied batch after batch during training.
#[derive(Debug)]
pub struct Protector {
    cfg: ProtectionConfig,
    rng: Rng,
    last_power: Option<f64>,
    /// budget chosen for the most recent Marvell batch
    pub last_search: Option<PowerSearch>,
}

impl Protector {
    pub fn new(cfg: ProtectionConfig) -> Self {
        let rng = Rng::new(cfg.seed);
        Self {
            cfg,
            rng,
            last_power: None,
            last_search: None,
        }
    }

    pub fn config(&self) -> &ProtectionConfig {
        &self.cfg
    }

    pub fn apply(&mut self, grads: &Mat, labels: &[u8]) -> Result<Mat> {
        let single_class = labels.iter().all(|&y| y == 1) || labels.iter().all(|&y| y != 1);
        match self.cfg.kind {
            ProtectionKind::None => Ok(grads.clone()),
            ProtectionKind::Iso { s } => iso_protect(grads, s, &mut self.rng),
            ProtectionKind::MaxNorm => {
                if single_class {
                    warn!("max_norm: single-class batch passed through unprotected");
                    return Ok(grads.clone());
                }
                Ok(max_norm_protect(grads, &mut self.rng))
            }
            ProtectionKind::Marvell {
                target,
                reuse_power,
            } => {
                let fixed = if reuse_power { self.last_power } else { None };
                let out = marvell_protect_with_power(grads, labels, target, fixed, &mut self.rng)?;
                if let Some(search) = &out.search {
                    self.last_power = Some(search.power);
                }
                self.last_search = out.search;
                Ok(out.grads)
            }
        }
    }
}
