//! Scores and divergences: ROC AUC, adaptive calibration error, closed-form
//! Gaussian symmetric KL and a Monte Carlo total-variation estimate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{
    dot_unchecked, mean_rows, norm2, sample_structured_gaussian, Mat, Rng, StructuredCov,
};

/// ROC AUC as the Mann-Whitney statistic: the fraction of (positive,
/// negative) pairs ranked correctly, ties counted one half.
///
/// Computed in `O(n log n)` through midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::arg(format!("non-finite score {s}")));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc(format!(
            "{n_pos} positives and {n_neg} negatives"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (1-based) midranks of the positives.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum_pos += midrank * pos_in_group as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Adaptive (equal-mass) calibration error.
#[derive(Debug, Clone, Copy)]
pub struct AceConfig {
    pub n_bins: usize,
}

impl Default for AceConfig {
    fn default() -> Self {
        Self { n_bins: 10 }
    }
}

/// Sort by predicted probability, cut into `n_bins` contiguous bins of equal
/// size (the remainder goes one extra sample each to the leading bins) and
/// average `|mean prob - positive rate|` over bins.
pub fn ace(probs: &[f64], labels: &[u8], cfg: AceConfig) -> Result<f64> {
    let n = probs.len();
    if labels.len() != n {
        return Err(Error::arg("probs and labels differ in length"));
    }
    if cfg.n_bins == 0 || cfg.n_bins > n {
        return Err(Error::arg(format!(
            "n_bins = {} with {n} samples",
            cfg.n_bins
        )));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::arg(format!("probability {p} outside [0, 1]")));
    }
    // Ties broken by label so the result does not depend on input order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(labels[a].cmp(&labels[b])));

    let base = n / cfg.n_bins;
    let extra = n % cfg.n_bins;
    let mut start = 0;
    let mut total = 0.0;
    for b in 0..cfg.n_bins {
        let len = base + usize::from(b < extra);
        let bin = &order[start..start + len];
        let mean_p = bin.iter().map(|&k| probs[k]).sum::<f64>() / len as f64;
        let frac = bin.iter().filter(|&&k| labels[k] == 1).count() as f64 / len as f64;
        total += (mean_p - frac).abs();
        start += len;
    }
    Ok(total / cfg.n_bins as f64)
}

/// Gaussian with covariance `(var_along - var_iso) dir dir^T + var_iso I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub var_along: f64,
    pub var_iso: f64,
    pub dir: Vec<f64>,
}

impl GaussianSpec {
    pub fn spherical(mean: Vec<f64>, var: f64) -> Self {
        let mut dir = vec![0.0; mean.len()];
        if !dir.is_empty() {
            dir[0] = 1.0;
        }
        Self {
            mean,
            var_along: var,
            var_iso: var,
            dir,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_spherical(&self) -> bool {
        self.var_along == self.var_iso
    }

    pub fn cov(&self) -> StructuredCov {
        StructuredCov {
            lam_along: self.var_along,
            lam_iso: self.var_iso,
            dir: self.dir.clone(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Mat> {
        sample_structured_gaussian(&self.mean, &self.cov(), n, rng)
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim() as f64;
        let mut sq = 0.0;
        let mut along = 0.0;
        for ((xi, mi), ei) in x.iter().zip(&self.mean).zip(&self.dir) {
            let c = xi - mi;
            sq += c * c;
            along += c * ei;
        }
        let quad = along * along / self.var_along + (sq - along * along) / self.var_iso;
        let log_det = self.var_along.ln() + (d - 1.0) * self.var_iso.ln();
        -0.5 * (d * (2.0 * PI).ln() + log_det + quad)
    }
}

fn sym_kl_1d(var_a: f64, var_b: f64, delta_sq: f64) -> f64 {
    0.5 * (var_a / var_b + var_b / var_a - 2.0 + delta_sq * (1.0 / var_a + 1.0 / var_b))
}

/// `KL(a || b) + KL(b || a)` for two Gaussians whose covariances commute.
///
/// Splits into the shared `dir` component and the `d - 1` isotropic
/// components, each of which has a 1-D closed form.
pub fn gaussian_sum_kl(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d || a.dir.len() != d || b.dir.len() != d {
        return Err(Error::arg("dimension mismatch"));
    }
    let dir = match (a.is_spherical(), b.is_spherical()) {
        (true, true) => &a.dir,
        (false, true) => &a.dir,
        (true, false) => &b.dir,
        (false, false) => {
            if (dot_unchecked(&a.dir, &b.dir).abs() - 1.0).abs() > 1e-9 {
                return Err(Error::arg(
                    "non-spherical covariances must share their direction",
                ));
            }
            &a.dir
        }
    };
    for v in [a.var_along, a.var_iso, b.var_along, b.var_iso] {
        if !(v > 0.0) {
            return Err(Error::SingularDivergence(format!("variance {v}")));
        }
    }
    let delta: Vec<f64> = a.mean.iter().zip(&b.mean).map(|(x, y)| x - y).collect();
    let along = dot_unchecked(&delta, dir);
    let perp_sq = (dot_unchecked(&delta, &delta) - along * along).max(0.0);

    let mut total = sym_kl_1d(a.var_along, b.var_along, along * along);
    if d > 1 {
        let (ai, bi) = (a.var_iso, b.var_iso);
        total += (d as f64 - 1.0) * 0.5 * (ai / bi + bi / ai - 2.0)
            + 0.5 * perp_sq * (1.0 / ai + 1.0 / bi);
    }
    Ok(total)
}

/// Upper bound on total variation from the symmetric KL: `sqrt(sum_kl) / 2`.
pub fn tv_upper_bound(sum_kl: f64) -> f64 {
    0.5 * sum_kl.max(0.0).sqrt()
}

/// Lower bound on the best detector's error, `(1 - tv_bound) / 2`, clamped
/// to `[0, 0.5]`.
pub fn detection_error_lower_bound(sum_kl: f64) -> f64 {
    ((1.0 - tv_upper_bound(sum_kl)) / 2.0).clamp(0.0, 0.5)
}

/// The largest symmetric KL that still guarantees a detection error of at
/// least `l`: `(2 - 4 l)^2`.
pub fn sum_kl_target_for_detection_error(l: f64) -> Result<f64> {
    if !(l > 0.0 && l < 0.5) {
        return Err(Error::arg(format!("detection error bound {l} not in (0, 0.5)")));
    }
    Ok((2.0 - 4.0 * l).powi(2))
}

#[derive(Debug, Clone, Copy)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Total variation between `a` and `b` by importance sampling from their
/// equal mixture. Half the samples come from each component.
///
/// Under the mixture `m = (a + b) / 2`, `TV = E_m[|a - b| / (a + b)]`, and
/// the integrand equals `|tanh((log a - log b) / 2)|`.
pub fn mc_tv_estimate(
    a: &GaussianSpec,
    b: &GaussianSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<McEstimate> {
    if n < 2 {
        return Err(Error::arg("need at least two samples"));
    }
    let half = n / 2;
    let mut stats = Vec::with_capacity(2);
    for src in [a, b] {
        let xs = src.sample(half, rng)?;
        let vals: Vec<f64> = xs
            .row_iter()
            .map(|x| (0.5 * (a.log_density(x) - b.log_density(x))).tanh().abs())
            .collect();
        let m = vals.iter().sum::<f64>() / half as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (half as f64 - 1.0).max(1.0);
        stats.push((m, var));
    }
    let estimate = 0.5 * (stats[0].0 + stats[1].0);
    let stderr = 0.5 * ((stats[0].1 + stats[1].1) / half as f64).sqrt();
    Ok(McEstimate { estimate, stderr })
}

/// Spherical maximum-likelihood fit of the two gradient classes.
#[derive(Debug, Clone)]
pub struct SphericalFit {
    pub pos: GaussianSpec,
    pub neg: GaussianSpec,
    /// `mean_pos - mean_neg`
    pub delta: Vec<f64>,
    /// Set when a fitted variance or the mean difference is exactly zero.
    pub degenerate: bool,
}

fn spherical_var(x: &Mat, mean: &[f64]) -> f64 {
    let total: f64 = x
        .row_iter()
        .map(|r| r.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>())
        .sum();
    total / (x.rows() as f64 * x.cols() as f64)
}

/// Fits `N(mean, u I)` to each class. Both specs carry `dir = delta / |delta|`
/// (or `e_1` when the means coincide).
pub fn fit_spherical_pair(g_pos: &Mat, g_neg: &Mat) -> Result<SphericalFit> {
    if g_pos.rows() == 0 || g_neg.rows() == 0 {
        return Err(Error::arg("both classes need at least one row"));
    }
    if g_pos.cols() != g_neg.cols() || g_pos.cols() == 0 {
        return Err(Error::arg("class matrices differ in width"));
    }
    let mp = mean_rows(g_pos)?;
    let mn = mean_rows(g_neg)?;
    let u = spherical_var(g_pos, &mp);
    let v = spherical_var(g_neg, &mn);
    let delta: Vec<f64> = mp.iter().zip(&mn).map(|(a, b)| a - b).collect();
    let dn = norm2(&delta);
    let dir = if dn > 0.0 {
        delta.iter().map(|x| x / dn).collect()
    } else {
        let mut e = vec![0.0; delta.len()];
        e[0] = 1.0;
        e
    };
    let degenerate = u == 0.0 || v == 0.0 || dn == 0.0;
    Ok(SphericalFit {
        pos: GaussianSpec {
            mean: mp,
            var_along: u,
            var_iso: u,
            dir: dir.clone(),
        },
        neg: GaussianSpec {
            mean: mn,
            var_along: v,
            var_iso: v,
            dir,
        },
        delta,
        degenerate,
    })
}
