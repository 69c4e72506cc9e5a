//! Synthetic data for union-based training.
//!
//! After set union alignment, a batch contains ids one party does not own.
//! The active party fills missing labels ([`LabelStrategy`]); the passive
//! party fills missing features ([`FeatureStrategy`]), either as raw rows
//! before `f` or directly as cut-layer rows. Training on the filled data
//! shifts the learned probability; [`CalibrationConfig`] maps it back.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::attack::{joint_spectral_attack, spectral_attack};
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::numerics::{dot_unchecked, norm2_unchecked, Mat, Rng};
use crate::splitnn::{Dataset, LossCalibration};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelStrategy {
    Majority,
    Minority,
    /// Bernoulli with the positive ratio of the owned labels
    RandomPos,
    /// Bernoulli with the model's own predicted probability
    RandomPred { sample_times: usize },
    /// majority vote of the `k` most cosine-similar owned-label embeddings
    Neighbors { k: usize },
}

impl LabelStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Majority => "label-majority",
            Self::Minority => "label-minority",
            Self::RandomPos => "label-random-pos",
            Self::RandomPred { .. } => "label-random-pred",
            Self::Neighbors { .. } => "label-neighbors",
        }
    }

    pub fn parse(name: &str, sample_times: usize, k: usize) -> Result<Self> {
        let s = match name {
            "label-majority" => Self::Majority,
            "label-minority" => Self::Minority,
            "label-random-pos" => Self::RandomPos,
            "label-random-pred" => Self::RandomPred { sample_times },
            "label-neighbors" => Self::Neighbors { k },
            other => return Err(Error::Config(format!("unknown label strategy {other:?}"))),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::RandomPred { sample_times: 0 } => Err(Error::arg("sample_times must be >= 1")),
            Self::Neighbors { k: 0 } => Err(Error::arg("k must be >= 1")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureStrategy {
    /// copy a uniformly chosen owned raw row
    Sampling,
    /// cut-layer row from `N(0, (s/d) max ||f(x_i)||^2 I)`
    Gaussian { s: f64 },
    /// cut-layer row from the running per-coordinate mean and std
    RandomMoving,
}

impl FeatureStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sampling => "fea-sampling",
            Self::Gaussian { .. } => "fea-gaussian",
            Self::RandomMoving => "fea-random",
        }
    }

    pub fn parse(name: &str, s: f64) -> Result<Self> {
        let f = match name {
            "fea-sampling" => Self::Sampling,
            "fea-gaussian" => Self::Gaussian { s },
            "fea-random" => Self::RandomMoving,
            other => return Err(Error::Config(format!("unknown feature strategy {other:?}"))),
        };
        if let Self::Gaussian { s } = f {
            if !(s >= 0.0) {
                return Err(Error::arg("gaussian scale must be >= 0"));
            }
        }
        Ok(f)
    }

    fn at_cut_layer(&self) -> bool {
        !matches!(self, Self::Sampling)
    }
}

/// What the active party needs to fill labels for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LabelContext<'a> {
    /// positive ratio over all labels the active party owns
    pub owned_positive_ratio: f64,
    /// current predicted probability for every batch row
    pub probs: &'a [f64],
    /// cut-layer embeddings for every batch row
    pub embeddings: &'a Mat,
    /// batch rows with a real label, and those labels
    pub owned_rows: &'a [usize],
    pub owned_labels: &'a [u8],
}

/// Soft targets for the `missing` batch rows, in order.
///
/// For `random_pred` with several samples the target is the mean sampled
/// label. The cut-layer gradient is affine in the target, so this equals
/// averaging the per-sample gradients.
pub fn gen_labels(
    strategy: LabelStrategy,
    missing: &[usize],
    ctx: &LabelContext<'_>,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    strategy.validate()?;
    match strategy {
        LabelStrategy::Majority => Ok(vec![0.0; missing.len()]),
        LabelStrategy::Minority => Ok(vec![1.0; missing.len()]),
        LabelStrategy::RandomPos => {
            let r = ctx.owned_positive_ratio;
            Ok(missing.iter().map(|_| f64::from(u8::from(rng.bernoulli(r)))).collect())
        }
        LabelStrategy::RandomPred { sample_times } => missing
            .iter()
            .map(|&i| {
                let p = *ctx
                    .probs
                    .get(i)
                    .ok_or_else(|| Error::arg("missing row outside the batch"))?;
                let hits = (0..sample_times).filter(|_| rng.bernoulli(p)).count();
                Ok(hits as f64 / sample_times as f64)
            })
            .collect(),
        LabelStrategy::Neighbors { k } => {
            if ctx.owned_rows.is_empty() {
                return Err(Error::StrategyUnavailable(
                    "label-neighbors needs at least one owned label in the batch".into(),
                ));
            }
            missing
                .iter()
                .map(|&i| {
                    let q = ctx.embeddings.row(i);
                    let mut sims: Vec<(f64, u8)> = ctx
                        .owned_rows
                        .iter()
                        .zip(ctx.owned_labels)
                        .map(|(&j, &y)| (cosine(q, ctx.embeddings.row(j)), y))
                        .collect();
                    sims.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let top = &sims[..k.min(sims.len())];
                    let pos = top.iter().filter(|(_, y)| *y == 1).count();
                    Ok(f64::from(u8::from(2 * pos > top.len())))
                })
                .collect()
        }
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm2_unchecked(a);
    let nb = norm2_unchecked(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot_unchecked(a, b) / (na * nb)
    }
}

/// `sum_y p(y) (p - y)` for `y ~ Bernoulli(p)`: the expected logit
/// gradient of a `random_pred` label. Always zero.
pub fn expected_random_pred_gradient(p: f64) -> f64 {
    p * (p - 1.0) + (1.0 - p) * p
}

/// Running per-coordinate mean and std of real cut-layer embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MovingStats {
    pub decay: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    initialized: bool,
}

impl MovingStats {
    pub fn new(decay: f64) -> Self {
        Self {
            decay,
            mean: Vec::new(),
            std: Vec::new(),
            initialized: false,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Fold in the given rows. The first observation sets the statistics
    /// directly.
    pub fn observe(&mut self, rows: &Mat, which: &[usize]) {
        if which.is_empty() {
            return;
        }
        let d = rows.cols();
        let n = which.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in which {
            for (m, x) in mean.iter_mut().zip(rows.row(i)) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; d];
        for &i in which {
            for ((v, x), m) in var.iter_mut().zip(rows.row(i)).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        let std: Vec<f64> = var.into_iter().map(f64::sqrt).collect();
        if !self.initialized {
            self.mean = mean;
            self.std = std;
            self.initialized = true;
        } else {
            let a = self.decay;
            for (s, m) in self.mean.iter_mut().zip(mean) {
                *s = a * *s + (1.0 - a) * m;
            }
            for (s, m) in self.std.iter_mut().zip(std) {
                *s = a * *s + (1.0 - a) * m;
            }
        }
    }
}

impl Default for MovingStats {
    fn default() -> Self {
        Self::new(0.99)
    }
}

/// What the passive party has when filling features.
#[derive(Debug, Clone, Copy)]
pub struct FeatureContext<'a> {
    /// every raw feature row the passive party owns
    pub owned_raw: &'a Mat,
    /// real cut-layer embeddings of the owned rows in this batch
    pub owned_embeddings: &'a Mat,
    pub moving: &'a MovingStats,
}

/// Filled rows: raw features go through `f`, cut-layer rows replace `f(x)`.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthRows {
    Raw(Mat),
    Cut(Mat),
}

pub fn gen_features(
    strategy: FeatureStrategy,
    n_missing: usize,
    ctx: &FeatureContext<'_>,
    rng: &mut Rng,
) -> Result<SynthRows> {
    match strategy {
        FeatureStrategy::Sampling => {
            let pool = ctx.owned_raw;
            if pool.rows() == 0 {
                return Err(Error::StrategyUnavailable(
                    "fea-sampling needs at least one owned feature row".into(),
                ));
            }
            let idx: Vec<usize> = (0..n_missing).map(|_| rng.below(pool.rows())).collect();
            Ok(SynthRows::Raw(pool.select_rows(&idx)))
        }
        FeatureStrategy::Gaussian { s } => {
            let emb = ctx.owned_embeddings;
            let d = emb.cols();
            if d == 0 {
                return Err(Error::StrategyUnavailable(
                    "fea-gaussian needs the cut-layer width".into(),
                ));
            }
            let max_sq = emb
                .row_iter()
                .map(|r| dot_unchecked(r, r))
                .fold(0.0, f64::max);
            let sd = (s / d as f64 * max_sq).sqrt();
            let mut out = Mat::zeros(n_missing, d);
            for x in out.as_mut_slice() {
                *x = sd * rng.normal();
            }
            Ok(SynthRows::Cut(out))
        }
        FeatureStrategy::RandomMoving => {
            let m = ctx.moving;
            if !m.is_initialized() {
                return Err(Error::StrategyUnavailable(
                    "fea-random has not observed any real embedding yet".into(),
                ));
            }
            let d = m.mean.len();
            let mut out = Mat::zeros(n_missing, d);
            for i in 0..n_missing {
                for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                    *x = m.mean[j] + m.std[j] * rng.normal();
                }
            }
            Ok(SynthRows::Cut(out))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scenario {
    LabelOnly { p_a: f64 },
    FeatureOnly { p_p: f64, base: f64 },
    Both { p_a: f64, p_p: f64, base: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CalibrationMode {
    #[default]
    #[serde(rename = "none")]
    None,
    #[serde(rename = "tr")]
    TrainTime,
    #[serde(rename = "te")]
    TestTime,
}

impl CalibrationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "tr" => Ok(Self::TrainTime),
            "te" => Ok(Self::TestTime),
            other => Err(Error::Config(format!("unknown calibration mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub scenario: Scenario,
    pub mode: CalibrationMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// ground truth `D` to the synthetic-data distribution `D'`
    ModelToLoss,
    /// `D'` back to `D`
    ModelToReport,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let frac = |x: f64| x > 0.0 && x <= 1.0;
        let base_ok = |b: f64| b > 0.0 && b < 1.0;
        let ok = match *self {
            Self::LabelOnly { p_a } => frac(p_a),
            Self::FeatureOnly { p_p, base } => frac(p_p) && base_ok(base),
            Self::Both { p_a, p_p, base } => frac(p_a) && frac(p_p) && base_ok(base),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::arg(format!("invalid calibration scenario {self:?}")))
        }
    }

    /// `(scale, shift)` with `D' = scale * D + shift`.
    pub fn affine(&self) -> (f64, f64) {
        match *self {
            Self::LabelOnly { p_a } => (p_a, 0.0),
            Self::FeatureOnly { p_p, base } => (p_p, (1.0 - p_p) * base),
            Self::Both { p_a, p_p, base } => (p_a * p_p, p_a * (1.0 - p_p) * base),
        }
    }
}

/// Calibrated probability and whether it had to be clamped into `[0, 1]`.
pub fn calibrate_checked(prob: f64, scenario: &Scenario, dir: Direction) -> (f64, bool) {
    let (a, b) = scenario.affine();
    let raw = match dir {
        Direction::ModelToLoss => a * prob + b,
        Direction::ModelToReport => (prob - b) / a,
    };
    let c = raw.clamp(0.0, 1.0);
    (c, c != raw)
}

pub fn calibrate(prob: f64, cfg: &CalibrationConfig, dir: Direction) -> f64 {
    calibrate_checked(prob, &cfg.scenario, dir).0
}

/// `KL(D || p (x) q)` where `q` is the label marginal of `joint` (rows are x,
/// columns are y).
pub fn kl_to_product(joint: &[Vec<f64>], p: &[f64]) -> f64 {
    let ny = joint.first().map_or(0, Vec::len);
    let q: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
    let mut kl = 0.0;
    for (row, &px) in joint.iter().zip(p) {
        for (&dxy, &qy) in row.iter().zip(&q) {
            if dxy > 0.0 {
                let m = px * qy;
                if m <= 0.0 {
                    return f64::INFINITY;
                }
                kl += dxy * (dxy / m).ln();
            }
        }
    }
    kl
}

fn check_joint(joint: &[Vec<f64>]) -> Result<()> {
    let ny = joint.first().map_or(0, Vec::len);
    if joint.is_empty() || ny == 0 || joint.iter().any(|r| r.len() != ny) {
        return Err(Error::arg("joint must be a non-empty rectangular table"));
    }
    let total: f64 = joint.iter().flatten().sum();
    if joint.iter().flatten().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::arg("joint must be non-negative and sum to 1"));
    }
    Ok(())
}

/// Brute-force minimiser of [`kl_to_product`] over all `p` on the simplex
/// whose coordinates are multiples of `step`.
pub fn marginal_kl_check(joint: &[Vec<f64>], step: f64) -> Result<Vec<f64>> {
    check_joint(joint)?;
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::arg("grid step must be in (0, 1]"));
    }
    let m = (1.0 / step).round() as usize;
    let nx = joint.len();
    let mut best = (f64::INFINITY, vec![1.0 / nx as f64; nx]);
    let mut counts = vec![0usize; nx];
    fn walk(
        k: usize,
        left: usize,
        m: usize,
        counts: &mut Vec<usize>,
        joint: &[Vec<f64>],
        best: &mut (f64, Vec<f64>),
    ) {
        if k + 1 == counts.len() {
            counts[k] = left;
            let p: Vec<f64> = counts.iter().map(|&c| c as f64 / m as f64).collect();
            let v = kl_to_product(joint, &p);
            if v < best.0 {
                *best = (v, p);
            }
            return;
        }
        for c in 0..=left {
            counts[k] = c;
            walk(k + 1, left - c, m, counts, joint, best);
        }
    }
    walk(0, m, m, &mut counts, joint, &mut best);
    Ok(best.1)
}

/// Ownership of every position of the aligned union, per party.
#[derive(Debug, Clone, PartialEq)]
pub struct UnionSchedule {
    /// the active party holds a real label
    pub label_owned: Vec<bool>,
    /// the passive party holds real features
    pub feature_owned: Vec<bool>,
}

impl UnionSchedule {
    pub fn new(label_owned: Vec<bool>, feature_owned: Vec<bool>) -> Result<Self> {
        if label_owned.len() != feature_owned.len() {
            return Err(Error::arg("ownership masks differ in length"));
        }
        if label_owned.iter().zip(&feature_owned).any(|(a, b)| !a && !b) {
            return Err(Error::Consistency("a union id is owned by neither party".into()));
        }
        Ok(Self {
            label_owned,
            feature_owned,
        })
    }

    /// Each party independently keeps a uniform `fraction` of the ids; ids
    /// dropped by both are handed back to the label owner.
    pub fn random(n: usize, label_fraction: f64, feature_fraction: f64, rng: &mut Rng) -> Result<Self> {
        let ok = |f: f64| f > 0.0 && f <= 1.0;
        if !ok(label_fraction) || !ok(feature_fraction) {
            return Err(Error::arg("ownership fractions must be in (0, 1]"));
        }
        let pick = |frac: f64, rng: &mut Rng| {
            let k = ((n as f64) * frac).round() as usize;
            let mut idx: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut idx);
            let mut m = vec![false; n];
            idx[..k].iter().for_each(|&i| m[i] = true);
            m
        };
        let mut label = pick(label_fraction, rng);
        let feature = pick(feature_fraction, rng);
        for (l, f) in label.iter_mut().zip(&feature) {
            if !*f {
                *l = true;
            }
        }
        Self::new(label, feature)
    }

    pub fn full(n: usize) -> Self {
        Self {
            label_owned: vec![true; n],
            feature_owned: vec![true; n],
        }
    }

    pub fn len(&self) -> usize {
        self.label_owned.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_owned.is_empty()
    }

    pub fn p_a(&self) -> f64 {
        frac_true(&self.label_owned)
    }

    pub fn p_p(&self) -> f64 {
        frac_true(&self.feature_owned)
    }
}

fn frac_true(m: &[bool]) -> f64 {
    m.iter().filter(|&&b| b).count() as f64 / m.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub label: Option<LabelStrategy>,
    pub feature: Option<FeatureStrategy>,
    pub calibration: CalibrationMode,
    pub seed: u64,
}

/// `[synth]` config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub label: Option<String>,
    pub feature: Option<String>,
    #[serde(default)]
    pub calibration: CalibrationMode,
    #[serde(default = "one")]
    pub label_fraction: f64,
    #[serde(default = "one")]
    pub feature_fraction: f64,
    #[serde(default = "one_usize")]
    pub sample_times: usize,
    #[serde(default = "three")]
    pub k: usize,
    #[serde(default = "one")]
    pub s: f64,
    pub seed: Option<u64>,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn three() -> usize {
    3
}

impl SynthSection {
    pub fn to_config(&self, default_seed: u64) -> Result<SynthConfig> {
        let label = self
            .label
            .as_deref()
            .map(|n| LabelStrategy::parse(n, self.sample_times, self.k))
            .transpose()?;
        let feature = self
            .feature
            .as_deref()
            .map(|n| FeatureStrategy::parse(n, self.s))
            .transpose()?;
        Ok(SynthConfig {
            label,
            feature,
            calibration: self.calibration,
            seed: self.seed.unwrap_or(default_seed),
        })
    }
}

/// Synthetic rows planned for one batch, produced before the forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    real_feature_rows: Vec<usize>,
    synth_feature_rows: Vec<usize>,
    cut_layer: bool,
}

/// Per-run state tying the strategies to a training loop. Positions are
/// indices into the training [`Dataset`].
#[derive(Debug)]
pub struct SynthSession {
    cfg: SynthConfig,
    schedule: UnionSchedule,
    scenario: Option<Scenario>,
    owned_raw: Mat,
    owned_positive_ratio: f64,
    moving: MovingStats,
    rng: Rng,
    clamps: Cell<usize>,
    reports: Cell<usize>,
}

impl SynthSession {
    pub fn new(cfg: SynthConfig, schedule: UnionSchedule, data: &Dataset) -> Result<Self> {
        if schedule.len() != data.len() {
            return Err(Error::arg("schedule and dataset differ in length"));
        }
        if let Some(l) = cfg.label {
            l.validate()?;
        }
        let owned: Vec<usize> = (0..data.len()).filter(|&i| schedule.feature_owned[i]).collect();
        let labelled: Vec<usize> = (0..data.len()).filter(|&i| schedule.label_owned[i]).collect();
        let owned_positive_ratio = labelled.iter().filter(|&&i| data.labels[i] == 1).count() as f64
            / labelled.len().max(1) as f64;
        let missing_labels = schedule.p_a() < 1.0;
        let missing_features = schedule.p_p() < 1.0;
        if missing_labels && cfg.label.is_none() {
            return Err(Error::Config("labels are missing but no label strategy is set".into()));
        }
        if missing_features && cfg.feature.is_none() {
            return Err(Error::Config("features are missing but no feature strategy is set".into()));
        }
        let base = owned_positive_ratio;
        let scenario = match (missing_labels, missing_features) {
            (false, false) => None,
            (true, false) => Some(Scenario::LabelOnly { p_a: schedule.p_a() }),
            (false, true) => Some(Scenario::FeatureOnly { p_p: schedule.p_p(), base }),
            (true, true) => Some(Scenario::Both {
                p_a: schedule.p_a(),
                p_p: schedule.p_p(),
                base,
            }),
        };
        if cfg.calibration != CalibrationMode::None {
            if let Some(s) = &scenario {
                s.validate()?;
            }
        }
        Ok(Self {
            cfg,
            owned_raw: data.features.select_rows(&owned),
            schedule,
            scenario,
            owned_positive_ratio,
            moving: MovingStats::default(),
            rng: Rng::new(cfg.seed).fork(7),
            clamps: Cell::new(0),
            reports: Cell::new(0),
        })
    }

    pub fn schedule(&self) -> &UnionSchedule {
        &self.schedule
    }

    pub fn scenario(&self) -> Option<Scenario> {
        self.scenario
    }

    /// How many reported probabilities were clamped, out of how many.
    pub fn clamp_count(&self) -> (usize, usize) {
        (self.clamps.get(), self.reports.get())
    }

    pub fn extra_columns(&self) -> Vec<String> {
        let mut c = Vec::new();
        if self.cfg.label.is_some() {
            c.push("attack_auc_label".to_string());
        }
        if self.cfg.feature.is_some() {
            c.push("attack_auc_feature".to_string());
        }
        c
    }

    /// Replace the raw rows the passive party does not own: sampled rows
    /// for `fea-sampling`, zeros for cut-layer strategies.
    pub fn prepare_features(&mut self, idx: &[usize], raw: &mut Mat) -> Result<PreparedBatch> {
        let (real, synth): (Vec<usize>, Vec<usize>) =
            (0..idx.len()).partition(|&r| self.schedule.feature_owned[idx[r]]);
        let cut_layer = self.cfg.feature.is_some_and(|f| f.at_cut_layer());
        if !synth.is_empty() {
            let strategy = self.cfg.feature.ok_or_else(|| Error::Config("no feature strategy".into()))?;
            if strategy == FeatureStrategy::Sampling {
                let ctx = FeatureContext {
                    owned_raw: &self.owned_raw,
                    owned_embeddings: &Mat::zeros(0, 0),
                    moving: &self.moving,
                };
                if let SynthRows::Raw(rows) = gen_features(strategy, synth.len(), &ctx, &mut self.rng)? {
                    for (k, &r) in synth.iter().enumerate() {
                        raw.row_mut(r).copy_from_slice(rows.row(k));
                    }
                }
            } else {
                for &r in &synth {
                    raw.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        Ok(PreparedBatch {
            real_feature_rows: real,
            synth_feature_rows: synth,
            cut_layer,
        })
    }

    /// Overwrite cut-layer rows for cut-layer strategies and fold the real
    /// rows into the running statistics.
    pub fn finish_embeddings(&mut self, prep: &PreparedBatch, emb: &mut Mat) -> Result<()> {
        if prep.cut_layer && !prep.synth_feature_rows.is_empty() {
            let strategy = self.cfg.feature.expect("cut-layer strategy");
            if strategy == FeatureStrategy::RandomMoving && !self.moving.is_initialized() {
                self.moving.observe(emb, &prep.real_feature_rows);
            }
            let owned = emb.select_rows(&prep.real_feature_rows);
            let ctx = FeatureContext {
                owned_raw: &self.owned_raw,
                owned_embeddings: &owned,
                moving: &self.moving,
            };
            let rows = match gen_features(strategy, prep.synth_feature_rows.len(), &ctx, &mut self.rng)? {
                SynthRows::Cut(m) | SynthRows::Raw(m) => m,
            };
            for (k, &r) in prep.synth_feature_rows.iter().enumerate() {
                emb.row_mut(r).copy_from_slice(rows.row(k));
            }
        }
        self.moving.observe(emb, &prep.real_feature_rows);
        Ok(())
    }

    /// Rows filled at the cut layer have no path back into `f`.
    pub fn mask_gradients(&self, prep: &PreparedBatch, grads: &mut Mat) {
        if prep.cut_layer {
            for &r in &prep.synth_feature_rows {
                grads.row_mut(r).iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Training targets for a batch: real labels where owned, synthetic
    /// ones elsewhere.
    pub fn labels_for(&mut self, idx: &[usize], labels: &[u8], probs: &[f64], emb: &Mat) -> Result<Vec<f64>> {
        let mut targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
        let (owned, missing): (Vec<usize>, Vec<usize>) =
            (0..idx.len()).partition(|&r| self.schedule.label_owned[idx[r]]);
        if missing.is_empty() {
            return Ok(targets);
        }
        let strategy = self.cfg.label.ok_or_else(|| Error::Config("no label strategy".into()))?;
        let owned_labels: Vec<u8> = owned.iter().map(|&r| labels[r]).collect();
        let ctx = LabelContext {
            owned_positive_ratio: self.owned_positive_ratio,
            probs,
            embeddings: emb,
            owned_rows: &owned,
            owned_labels: &owned_labels,
        };
        let fill = gen_labels(strategy, &missing, &ctx, &mut self.rng)?;
        for (&r, t) in missing.iter().zip(fill) {
            targets[r] = t;
        }
        Ok(targets)
    }

    pub fn loss_calibration(&self) -> Option<LossCalibration> {
        match (self.cfg.calibration, self.scenario) {
            (CalibrationMode::TrainTime, Some(s)) => {
                let (scale, shift) = s.affine();
                Some(LossCalibration { scale, shift })
            }
            _ => None,
        }
    }

    /// Probability shown to the user for a model output.
    pub fn report_prob(&self, p: f64) -> f64 {
        match (self.cfg.calibration, self.scenario) {
            (CalibrationMode::TestTime, Some(s)) => {
                let (v, clamped) = calibrate_checked(p, &s, Direction::ModelToReport);
                self.reports.set(self.reports.get() + 1);
                if clamped {
                    self.clamps.set(self.clamps.get() + 1);
                }
                v
            }
            _ => p,
        }
    }

    /// Real-vs-synthetic detection AUCs for this batch, in
    /// [`extra_columns`](Self::extra_columns) order. The label detector is
    /// the passive party's spectral attack on the gradients; the feature
    /// detector is the active party's joint spectral attack on embeddings
    /// and labels.
    pub fn detection_aucs(&self, idx: &[usize], grads: &Mat, emb: &Mat, targets: &[f64]) -> Result<Vec<Option<f64>>> {
        let mut out = Vec::new();
        if self.cfg.label.is_some() {
            let synth: Vec<u8> = idx.iter().map(|&i| u8::from(!self.schedule.label_owned[i])).collect();
            out.push(detect(&synth, || spectral_attack(grads))?);
        }
        if self.cfg.feature.is_some() {
            let synth: Vec<u8> = idx.iter().map(|&i| u8::from(!self.schedule.feature_owned[i])).collect();
            out.push(detect(&synth, || joint_spectral_attack(emb, targets))?);
        }
        Ok(out)
    }
}

fn detect(synth: &[u8], scores: impl FnOnce() -> Result<Vec<f64>>) -> Result<Option<f64>> {
    let n_synth = synth.iter().filter(|&&s| s == 1).count();
    if n_synth == 0 || n_synth == synth.len() {
        return Ok(None);
    }
    match scores() {
        Ok(s) => Ok(auc(&s, synth).ok()),
        Err(Error::DegenerateData(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(emb: &'a Mat, probs: &'a [f64], rows: &'a [usize], labels: &'a [u8]) -> LabelContext<'a> {
        LabelContext {
            owned_positive_ratio: 0.3,
            probs,
            embeddings: emb,
            owned_rows: rows,
            owned_labels: labels,
        }
    }

    #[test]
    fn constant_strategies() {
        let emb = Mat::zeros(5, 2);
        let c = ctx(&emb, &[0.5; 5], &[], &[]);
        let mut rng = Rng::new(1);
        let miss = [0, 1, 2, 3, 4];
        assert_eq!(gen_labels(LabelStrategy::Majority, &miss, &c, &mut rng).unwrap(), vec![0.0; 5]);
        assert_eq!(gen_labels(LabelStrategy::Minority, &miss, &c, &mut rng).unwrap(), vec![1.0; 5]);
    }

    #[test]
    fn neighbors_nearest() {
        let emb = Mat::from_rows(&[
            [1.0, 0.0],
            [0.99, (1.0f64 - 0.99 * 0.99).sqrt()],
            [0.1, (1.0f64 - 0.01).sqrt()],
        ])
        .unwrap();
        let c = ctx(&emb, &[0.5; 3], &[1, 2], &[1, 0]);
        let got = gen_labels(LabelStrategy::Neighbors { k: 1 }, &[0], &c, &mut Rng::new(0)).unwrap();
        assert_eq!(got, vec![1.0]);
        // k = 2 ties one positive against one negative, resolved toward 0
        let got = gen_labels(LabelStrategy::Neighbors { k: 2 }, &[0], &c, &mut Rng::new(0)).unwrap();
        assert_eq!(got, vec![0.0]);
        let none = ctx(&emb, &[0.5; 3], &[], &[]);
        assert!(matches!(
            gen_labels(LabelStrategy::Neighbors { k: 3 }, &[0], &none, &mut Rng::new(0)),
            Err(Error::StrategyUnavailable(_))
        ));
    }

    #[test]
    fn random_pred_identity_exact() {
        for p in [0.0, 1e-9, 0.1, 0.3, 0.5, 0.77, 1.0] {
            assert_eq!(expected_random_pred_gradient(p), 0.0);
        }
    }

    #[test]
    fn random_pred_soft_targets() {
        let emb = Mat::zeros(1, 1);
        let c = ctx(&emb, &[0.25], &[], &[]);
        let t = gen_labels(LabelStrategy::RandomPred { sample_times: 40_000 }, &[0], &c, &mut Rng::new(3)).unwrap();
        assert!((t[0] - 0.25).abs() < 0.01, "{t:?}");
        assert!(LabelStrategy::RandomPred { sample_times: 0 }.validate().is_err());
    }

    #[test]
    fn feature_strategies() {
        let owned = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let emb = Mat::from_rows(&[[3.0, 4.0]]).unwrap();
        let mut moving = MovingStats::default();
        let mut rng = Rng::new(9);
        let c = FeatureContext {
            owned_raw: &owned,
            owned_embeddings: &emb,
            moving: &moving,
        };
        let SynthRows::Raw(rows) = gen_features(FeatureStrategy::Sampling, 20, &c, &mut rng).unwrap() else {
            panic!()
        };
        assert!(rows.row_iter().all(|r| r == owned.row(0) || r == owned.row(1)));
        let SynthRows::Cut(z) = gen_features(FeatureStrategy::Gaussian { s: 0.0 }, 3, &c, &mut rng).unwrap() else {
            panic!()
        };
        assert_eq!(z, Mat::zeros(3, 2));
        assert!(gen_features(FeatureStrategy::RandomMoving, 1, &c, &mut rng).is_err());

        let constant = Mat::from_rows(&[[0.5, -1.5], [0.5, -1.5], [0.5, -1.5]]).unwrap();
        moving.observe(&constant, &[0, 1, 2]);
        moving.observe(&constant, &[0, 2]);
        let c = FeatureContext {
            owned_raw: &owned,
            owned_embeddings: &emb,
            moving: &moving,
        };
        let SynthRows::Cut(r) = gen_features(FeatureStrategy::RandomMoving, 4, &c, &mut rng).unwrap() else {
            panic!()
        };
        assert!(r.row_iter().all(|row| row == [0.5, -1.5]));

        let empty = Mat::zeros(0, 2);
        let c = FeatureContext {
            owned_raw: &empty,
            owned_embeddings: &emb,
            moving: &moving,
        };
        assert!(matches!(
            gen_features(FeatureStrategy::Sampling, 1, &c, &mut rng),
            Err(Error::StrategyUnavailable(_))
        ));
    }

    #[test]
    fn calibration_examples() {
        let id = Scenario::LabelOnly { p_a: 1.0 };
        assert_eq!(calibrate_checked(0.37, &id, Direction::ModelToLoss).0, 0.37);
        let half = Scenario::LabelOnly { p_a: 0.5 };
        assert!((calibrate_checked(0.6, &half, Direction::ModelToLoss).0 - 0.3).abs() < 1e-15);
        let both = Scenario::Both {
            p_a: 0.8,
            p_p: 0.5,
            base: 0.2,
        };
        assert!((calibrate_checked(0.6, &both, Direction::ModelToLoss).0 - 0.32).abs() < 1e-15);
        let (v, clamped) = calibrate_checked(0.9, &half, Direction::ModelToReport);
        assert_eq!((v, clamped), (1.0, true));
    }

    #[test]
    fn marginal_kl_examples() {
        let uniform = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
        assert_eq!(marginal_kl_check(&uniform, 0.01).unwrap(), vec![0.5, 0.5]);
        let d = vec![vec![0.4, 0.1], vec![0.2, 0.3]];
        let p = marginal_kl_check(&d, 0.01).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        let zero = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
        assert!(kl_to_product(&zero, &[0.5, 0.5]).is_finite());
        assert!(marginal_kl_check(&[vec![0.5, 0.2]], 0.1).is_err());
    }

    #[test]
    fn schedule_fractions() {
        let s = UnionSchedule::random(1000, 0.5, 1.0, &mut Rng::new(2)).unwrap();
        assert!((s.p_a() - 0.5).abs() < 1e-12);
        assert_eq!(s.p_p(), 1.0);
        assert!(UnionSchedule::new(vec![false], vec![false]).is_err());
    }
}
