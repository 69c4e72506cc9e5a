//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the routine it checks; the oracles are slow,
//! direct transcriptions of the definitions.

#![allow(dead_code)]

use splitshield::numerics::{Mat, Rng};
use splitshield::protect::GradStats;
use splitshield::splitnn::{Activation, SplitModel};

/// Pairwise AUC: wins plus half ties over all positive/negative pairs.
pub fn auc_brute(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 1 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Equal-mass ACE straight from the definition, bins built from a stable
/// sort on `(prob, label)`.
pub fn ace_brute(probs: &[f64], labels: &[u8], n_bins: usize) -> f64 {
    let mut pairs: Vec<(f64, u8)> = probs.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let n = pairs.len();
    let mut total = 0.0;
    let mut start = 0;
    for b in 0..n_bins {
        let len = n / n_bins + usize::from(b < n % n_bins);
        let bin = &pairs[start..start + len];
        let mp: f64 = bin.iter().map(|p| p.0).sum::<f64>() / len as f64;
        let fr: f64 = bin.iter().map(|p| f64::from(p.1)).sum::<f64>() / len as f64;
        total += (mp - fr).abs();
        start += len;
    }
    total / n_bins as f64
}

/// Sample covariance (divide by n - 1) of a matrix given as rows.
pub fn cov_brute(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in rows {
        for a in 0..d {
            for b in 0..d {
                c[a][b] += (r[a] - mean[a]) * (r[b] - mean[b]) / n;
            }
        }
    }
    c
}

/// Largest eigenpair of a symmetric 3x3 matrix from the roots of its
/// characteristic cubic (trigonometric form), eigenvector from cross
/// products of the rows of `A - lambda I`.
pub fn eig3_top(a: &[Vec<f64>]) -> (f64, [f64; 3]) {
    let p1 = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
    let q = (a[0][0] + a[1][1] + a[2][2]) / 3.0;
    let p2 = (a[0][0] - q).powi(2) + (a[1][1] - q).powi(2) + (a[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let lam = if p == 0.0 {
        q
    } else {
        let mut b = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                b[i][j] = (a[i][j] - if i == j { q } else { 0.0 }) / p;
            }
        }
        let det = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
            - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
            + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
        let r = (det / 2.0).clamp(-1.0, 1.0);
        q + 2.0 * p * (r.acos() / 3.0).cos()
    };
    let m: Vec<[f64; 3]> = (0..3)
        .map(|i| {
            let mut r = [a[i][0], a[i][1], a[i][2]];
            r[i] -= lam;
            r
        })
        .collect();
    let cross = |x: [f64; 3], y: [f64; 3]| {
        [x[1] * y[2] - x[2] * y[1], x[2] * y[0] - x[0] * y[2], x[0] * y[1] - x[1] * y[0]]
    };
    let cands = [cross(m[0], m[1]), cross(m[0], m[2]), cross(m[1], m[2])];
    let best = cands
        .iter()
        .max_by(|x, y| {
            let nx: f64 = x.iter().map(|v| v * v).sum();
            let ny: f64 = y.iter().map(|v| v * v).sum();
            nx.partial_cmp(&ny).unwrap()
        })
        .unwrap();
    let n = best.iter().map(|v| v * v).sum::<f64>().sqrt();
    (lam, [best[0] / n, best[1] / n, best[2] / n])
}

/// The four-term objective with positive-class variance `u + lam_pos` and
/// negative-class variance `v + lam_neg`.
pub fn marvell_objective_brute(l1p: f64, l2p: f64, l1n: f64, l2n: f64, s: &GradStats) -> f64 {
    let k = s.d as f64 - 1.0;
    let (pos1, pos2) = (l1p + s.u, l2p + s.u);
    let (neg1, neg2) = (l1n + s.v, l2n + s.v);
    k * (neg2 / pos2 + pos2 / neg2)
        + (neg1 + s.delta_norm_sq) / pos1
        + (pos1 + s.delta_norm_sq) / neg1
}

/// Best objective value over the active budget hyperplane with the
/// isotropic eigenvalue of one class pinned to zero: a 200-step grid over
/// the three budget shares followed by shrinking local grids around the
/// incumbent.
pub fn marvell_grid_oracle(s: &GradStats, power: f64) -> f64 {
    let p = s.p;
    let k = s.d as f64 - 1.0;
    let iso_pos = s.u < s.v;
    let w_iso = k * if iso_pos { p } else { 1.0 - p };
    let eval = |a: f64, b: f64| -> Option<f64> {
        let c = 1.0 - a - b;
        if a < 0.0 || b < 0.0 || c < -1e-15 {
            return None;
        }
        let c = c.max(0.0);
        let l1p = a * power / p;
        let l1n = b * power / (1.0 - p);
        let l2 = c * power / w_iso;
        let (l2p, l2n) = if iso_pos { (l2, 0.0) } else { (0.0, l2) };
        let own1 = if iso_pos { l1p } else { l1n };
        if l2 > own1 * (1.0 + 1e-12) {
            return None;
        }
        Some(marvell_objective_brute(l1p, l2p, l1n, l2n, s))
    };
    let n = 200;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=n {
        for j in 0..=(n - i) {
            let (a, b) = (i as f64 / n as f64, j as f64 / n as f64);
            if let Some(v) = eval(a, b) {
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
    }
    let mut h = 2.0 / n as f64;
    for _ in 0..30 {
        let m = 20;
        let (_, ca, cb) = best;
        for i in -m..=m {
            for j in -m..=m {
                let a = ca + h * i as f64 / m as f64;
                let b = cb + h * j as f64 / m as f64;
                if let Some(v) = eval(a, b) {
                    if v < best.0 {
                        best = (v, a, b);
                    }
                }
            }
        }
        h /= 3.0;
    }
    best.0
}

/// Mean binary cross-entropy of `h(f(x))`, by a direct forward pass.
pub fn mean_loss_brute(model: &SplitModel, x: &Mat, y: &[f64], cal: Option<(f64, f64)>) -> f64 {
    let mut total = 0.0;
    for (i, row) in x.row_iter().enumerate() {
        let e = embed_brute(model, row);
        total += loss_at_embedding(model, &e, y[i], cal);
    }
    total / x.rows() as f64
}

pub fn embed_brute(model: &SplitModel, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    for layer in &model.f_layers {
        let mut out = vec![0.0; layer.w.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            *o = layer.b[r] + layer.w.row(r).iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            if model.activation == Activation::Relu {
                *o = o.max(0.0);
            }
        }
        a = out;
    }
    a
}

/// Pre-activations of every `f` layer for one input.
pub fn preactivations(model: &SplitModel, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let mut pre = Vec::new();
    for layer in &model.f_layers {
        let mut out = vec![0.0; layer.w.rows()];
        for (r, o) in out.iter_mut().enumerate() {
            *o = layer.b[r] + layer.w.row(r).iter().zip(&a).map(|(w, v)| w * v).sum::<f64>();
            pre.push(*o);
            if model.activation == Activation::Relu {
                *o = o.max(0.0);
            }
        }
        a = out;
    }
    pre
}

/// `-t log q - (1 - t) log(1 - q)` with `q = scale * s(l) + shift` and `l`
/// the head's logit; no calibration means `q = s(l)`.
pub fn loss_at_embedding(model: &SplitModel, e: &[f64], t: f64, cal: Option<(f64, f64)>) -> f64 {
    let l = model.h.b[0] + model.h.w.row(0).iter().zip(e).map(|(w, v)| w * v).sum::<f64>();
    let s = 1.0 / (1.0 + (-l).exp());
    let (a, b) = cal.unwrap_or((1.0, 0.0));
    let q = a * s + b;
    -t * q.ln() - (1.0 - t) * (1.0 - q).ln()
}

/// Central difference of `f` at step `h`.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// `|a - b| / max(|a|, |b|)`, with a floor on the denominator so that two
/// values that are both essentially zero compare equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// `N(mean, var_iso I + (var_along - var_iso) dir dir^T)` sampled from a
/// standard normal vector.
pub fn sample_commuting(
    mean: &[f64],
    var_along: f64,
    var_iso: f64,
    dir: &[f64],
    rng: &mut Rng,
) -> Vec<f64> {
    let z: Vec<f64> = (0..mean.len()).map(|_| rng.normal()).collect();
    let along: f64 = z.iter().zip(dir).map(|(a, b)| a * b).sum();
    let extra = (var_along.sqrt() - var_iso.sqrt()) * along;
    mean.iter()
        .zip(&z)
        .zip(dir)
        .map(|((m, zi), di)| m + var_iso.sqrt() * zi + extra * di)
        .collect()
}

/// Log density of the same family, written out from the definition.
pub fn log_density_brute(x: &[f64], mean: &[f64], var_along: f64, var_iso: f64, dir: &[f64]) -> f64 {
    let d = x.len() as f64;
    let c: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
    let along: f64 = c.iter().zip(dir).map(|(a, b)| a * b).sum();
    let sq: f64 = c.iter().map(|v| v * v).sum();
    let quad = along * along / var_along + (sq - along * along) / var_iso;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + var_along.ln() + (d - 1.0) * var_iso.ln() + quad)
}

/// Random unit vector.
pub fn unit(d: usize, rng: &mut Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Uniform in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

/// Total variation of two 1-D unit-variance normals by composite Simpson
/// quadrature of `max(0, a(x) - b(x))` on a wide interval.
pub fn tv_1d_quadrature(m0: f64, m1: f64) -> f64 {
    let pdf = |x: f64, m: f64| (-(x - m).powi(2) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi) = (m0.min(m1) - 12.0, m0.max(m1) + 12.0);
    let n = 200_000;
    let h = (hi - lo) / n as f64;
    let f = |x: f64| (pdf(x, m0) - pdf(x, m1)).max(0.0);
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

/// Spearman rank correlation of two permutations of `0..n`.
pub fn spearman(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let d2: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
