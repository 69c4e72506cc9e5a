//! Two-party split learning engine.
//!
//! The passive party owns the raw features and the bottom model `f`; the
//! active party owns the labels and the head `h`. Per step the passive party
//! sends `f(X)` (a `B x d` matrix), the active party computes the loss and
//! sends back the per-example cut-layer gradients `g_i = dL_i / df(x_i)`
//! (again `B x d`, one row per example, never averaged or reordered), and the
//! passive party backpropagates them into `f`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attack::{run_attack, AttackKind, LeakAuc};
use crate::error::{Error, Result};
use crate::metrics::{ace, auc, AceConfig};
use crate::numerics::{dot_unchecked, Mat, Rng};
use crate::protect::{ProtectionConfig, Protector};
use crate::synthdata::SynthSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Affine layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(output, input),
            b: vec![0.0; output],
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let mut layer = Self::zeros(input, output);
        for x in layer.w.as_mut_slice() {
            *x = (2.0 * rng.uniform() - 1.0) * bound;
        }
        for x in &mut layer.b {
            *x = (2.0 * rng.uniform() - 1.0) * bound;
        }
        layer
    }

    pub fn input_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.w.rows()
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (o, (wr, b)) in out.iter_mut().zip(self.w.row_iter().zip(&self.b)) {
            *o = dot_unchecked(wr, x) + b;
        }
    }

    fn axpy(&mut self, grad: &Dense, step: f64) {
        for (w, g) in self.w.as_mut_slice().iter_mut().zip(grad.w.as_slice()) {
            *w -= step * g;
        }
        for (b, g) in self.b.iter_mut().zip(&grad.b) {
            *b -= step * g;
        }
    }

    /// All parameters flattened (weights then biases).
    pub fn params(&self) -> Vec<f64> {
        let mut p = self.w.as_slice().to_vec();
        p.extend_from_slice(&self.b);
        p
    }
}

/// `h o f`: `f` is a stack of affine layers with an activation after each,
/// `h` is an affine map from the cut layer to one logit.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub f_layers: Vec<Dense>,
    pub activation: Activation,
    pub h: Dense,
}

impl SplitModel {
    /// `widths` lists the hidden sizes of `f` between the input and the
    /// cut layer (empty for a single affine layer).
    pub fn new(
        input_dim: usize,
        widths: &[usize],
        cut_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input_dim == 0 || cut_dim == 0 || widths.contains(&0) {
            return Err(Error::arg("layer widths must be positive"));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(widths);
        dims.push(cut_dim);
        let f_layers = dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        let h = Dense::init(cut_dim, 1, rng);
        Ok(Self {
            f_layers,
            activation,
            h,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.f_layers[0].input_dim()
    }

    pub fn cut_dim(&self) -> usize {
        self.h.input_dim()
    }

    pub fn logit(&self, embedding: &[f64]) -> f64 {
        dot_unchecked(self.h.w.row(0), embedding) + self.h.b[0]
    }

    pub fn is_finite(&self) -> bool {
        self.f_layers
            .iter()
            .chain(std::iter::once(&self.h))
            .all(|l| l.w.is_finite() && l.b.iter().all(|x| x.is_finite()))
    }
}

fn activate(act: Activation, x: &mut [f64]) {
    if act == Activation::Relu {
        x.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// Per-layer activations for one example (input first).
fn forward_trace(model: &SplitModel, x: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(model.f_layers.len() + 1);
    acts.push(x.to_vec());
    for layer in &model.f_layers {
        let mut out = vec![0.0; layer.output_dim()];
        layer.apply(acts.last().unwrap(), &mut out);
        activate(model.activation, &mut out);
        acts.push(out);
    }
    acts
}

/// Cut-layer embeddings `f(X)`.
pub fn forward_passive(model: &SplitModel, features: &Mat) -> Result<Mat> {
    if features.cols() != model.input_dim() {
        return Err(Error::arg(format!(
            "feature width {} but model expects {}",
            features.cols(),
            model.input_dim()
        )));
    }
    let mut out = Mat::zeros(features.rows(), model.cut_dim());
    for (i, x) in features.row_iter().enumerate() {
        let acts = forward_trace(model, x);
        out.row_mut(i).copy_from_slice(acts.last().unwrap());
    }
    Ok(out)
}

/// Per-example cut-layer gradients as communicated to the passive party.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBatch {
    pub grads: Mat,
    /// ground-truth labels, visible only to the active party and evaluation
    pub labels: Vec<u8>,
    pub ids: Vec<u64>,
}

/// Affine map `D' = scale * D + shift` applied to the predicted probability
/// before the loss (train-time calibration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossCalibration {
    pub scale: f64,
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct ActiveStep {
    /// mean loss over the batch
    pub loss: f64,
    /// row i is the gradient of example i's own loss w.r.t. its embedding
    pub grads: Mat,
    /// gradient of the mean loss w.r.t. `h`
    pub h_grad: Dense,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const PROB_CLAMP: f64 = 1e-12;

/// Loss and `dL/dlogit` for one example with soft target `t`.
fn example_loss(logit: f64, t: f64, cal: Option<LossCalibration>) -> (f64, f64) {
    match cal {
        None => {
            // log(1 + e^-l) + (1 - t) l
            (softplus(-logit) + (1.0 - t) * logit, sigmoid(logit) - t)
        }
        Some(c) => {
            let p = sigmoid(logit);
            let q = (c.scale * p + c.shift).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let loss = -t * q.ln() - (1.0 - t) * (1.0 - q).ln();
            let dq = c.scale * p * (1.0 - p);
            (loss, dq * (q - t) / (q * (1.0 - q)))
        }
    }
}

/// Active party: logits, mean cross-entropy, per-example cut-layer gradients
/// `(p_i - y_i) * grad h` and the head's parameter gradient.
pub fn active_step(model: &SplitModel, embeddings: &Mat, labels: &[u8]) -> Result<ActiveStep> {
    let targets: Vec<f64> = labels.iter().map(|&y| f64::from(y)).collect();
    active_step_soft(model, embeddings, &targets, None)
}

/// [`active_step`] with soft targets in `[0, 1]` and optional train-time
/// calibration of the predicted probability.
///
/// A soft target is the average of several sampled hard labels; since the
/// gradient is linear in the target, this is the same as averaging the
/// per-sample gradients.
pub fn active_step_soft(
    model: &SplitModel,
    embeddings: &Mat,
    targets: &[f64],
    cal: Option<LossCalibration>,
) -> Result<ActiveStep> {
    let d = model.cut_dim();
    if embeddings.cols() != d {
        return Err(Error::arg(format!(
            "embedding width {} but cut layer is {d}",
            embeddings.cols()
        )));
    }
    if targets.len() != embeddings.rows() {
        return Err(Error::arg("targets and embeddings differ in length"));
    }
    let b = embeddings.rows();
    let w = model.h.w.row(0);
    let mut grads = Mat::zeros(b, d);
    let mut h_grad = Dense::zeros(d, 1);
    let mut logits = Vec::with_capacity(b);
    let mut probs = Vec::with_capacity(b);
    let mut loss = 0.0;
    for (i, a) in embeddings.row_iter().enumerate() {
        let l = model.logit(a);
        if !l.is_finite() {
            return Err(Error::NumericalOverflow(format!("logit {l} at row {i}")));
        }
        let (li, dl) = example_loss(l, targets[i], cal);
        loss += li;
        for (g, wj) in grads.row_mut(i).iter_mut().zip(w) {
            *g = dl * wj;
        }
        for (hg, aj) in h_grad.w.row_mut(0).iter_mut().zip(a) {
            *hg += dl * aj;
        }
        h_grad.b[0] += dl;
        logits.push(l);
        probs.push(sigmoid(l));
    }
    let inv = 1.0 / b.max(1) as f64;
    h_grad.w.as_mut_slice().iter_mut().for_each(|x| *x *= inv);
    h_grad.b[0] *= inv;
    Ok(ActiveStep {
        loss: loss * inv,
        grads,
        h_grad,
        logits,
        probs,
    })
}

/// Gradients of the mean loss w.r.t. `f`'s layers, given the per-example
/// cut-layer gradients received from the active party.
pub fn passive_param_grads(model: &SplitModel, features: &Mat, received: &Mat) -> Result<Vec<Dense>> {
    if received.rows() != features.rows() {
        return Err(Error::Protocol(format!(
            "received {} gradient rows for a batch of {}",
            received.rows(),
            features.rows()
        )));
    }
    if received.cols() != model.cut_dim() {
        return Err(Error::Protocol("received gradient width mismatch".into()));
    }
    if features.cols() != model.input_dim() {
        return Err(Error::arg("feature width mismatch"));
    }
    let mut grads: Vec<Dense> = model
        .f_layers
        .iter()
        .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
        .collect();
    let inv = 1.0 / features.rows().max(1) as f64;
    for (x, g) in features.row_iter().zip(received.row_iter()) {
        if g.iter().all(|v| *v == 0.0) {
            continue;
        }
        let acts = forward_trace(model, x);
        let mut delta = g.to_vec();
        for (k, layer) in model.f_layers.iter().enumerate().rev() {
            let out = &acts[k + 1];
            if model.activation == Activation::Relu {
                for (dv, o) in delta.iter_mut().zip(out) {
                    if *o <= 0.0 {
                        *dv = 0.0;
                    }
                }
            }
            let input = &acts[k];
            let gl = &mut grads[k];
            for (r, &dr) in delta.iter().enumerate() {
                if dr == 0.0 {
                    continue;
                }
                for (gw, xi) in gl.w.row_mut(r).iter_mut().zip(input) {
                    *gw += dr * xi * inv;
                }
                gl.b[r] += dr * inv;
            }
            if k > 0 {
                let mut next = vec![0.0; layer.input_dim()];
                for (r, &dr) in delta.iter().enumerate() {
                    if dr == 0.0 {
                        continue;
                    }
                    for (nv, wv) in next.iter_mut().zip(layer.w.row(r)) {
                        *nv += dr * wv;
                    }
                }
                delta = next;
            }
        }
    }
    Ok(grads)
}

/// Passive party backward pass plus one SGD step on `f`.
pub fn backward_passive(
    model: &mut SplitModel,
    features: &Mat,
    received: &Mat,
    learning_rate: f64,
) -> Result<()> {
    let grads = passive_param_grads(model, features, received)?;
    for (layer, g) in model.f_layers.iter_mut().zip(&grads) {
        layer.axpy(g, learning_rate);
    }
    Ok(())
}

/// Labelled examples with stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Mat,
    pub labels: Vec<u8>,
    pub ids: Vec<u64>,
}

impl Dataset {
    pub fn new(features: Mat, labels: Vec<u8>, ids: Vec<u64>) -> Result<Self> {
        if labels.len() != features.rows() || ids.len() != features.rows() {
            return Err(Error::arg("features, labels and ids differ in length"));
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::arg(format!("label {y} is not binary")));
        }
        Ok(Self {
            features,
            labels,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub protection: ProtectionConfig,
    /// evaluate on the test set every this many steps (0 = only at the end)
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            learning_rate: 0.5,
            epochs: 3,
            seed: 0,
            protection: ProtectionConfig::default(),
            eval_every: 10,
        }
    }
}

/// Moves the cut-layer matrices between the parties. The default passes
/// them through untouched; the harness provides a framed-transport version.
pub trait CutLink {
    fn embeddings(&mut self, m: &Mat) -> Result<Mat>;
    fn gradients(&mut self, m: &Mat) -> Result<Mat>;
}

#[derive(Debug, Default)]
pub struct DirectLink;

impl CutLink for DirectLink {
    fn embeddings(&mut self, m: &Mat) -> Result<Mat> {
        Ok(m.clone())
    }
    fn gradients(&mut self, m: &Mat) -> Result<Mat> {
        Ok(m.clone())
    }
}

/// Optional extras for [`train`].
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub attacks: Vec<AttackKind>,
    pub test: Option<&'a Dataset>,
    pub synth: Option<&'a mut SynthSession>,
    pub link: Option<&'a mut dyn CutLink>,
    /// observes every communicated (post-protection) gradient batch
    pub observer: Option<&'a mut dyn FnMut(&GradBatch)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub train_loss: f64,
    pub leaks: Vec<LeakAuc>,
    pub test_loss: Option<f64>,
    pub test_auc: Option<f64>,
    /// real-vs-synthetic detection AUCs, aligned with `TrainReport::extra_columns`
    pub extras: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auc: f64,
    pub ace: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub attack_names: Vec<String>,
    pub extra_columns: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub final_eval: Option<Evaluation>,
}

impl TrainReport {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "train_loss".to_string()];
        h.extend(self.attack_names.iter().map(|n| format!("leak_auc_{n}")));
        h.push("test_loss".into());
        h.push("test_auc".into());
        h.extend(self.extra_columns.iter().cloned());
        h
    }

    /// One CSV row per step; test columns are empty on steps without an
    /// evaluation.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.header())?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for s in &self.steps {
            let mut rec = vec![s.step.to_string(), s.train_loss.to_string()];
            rec.extend(s.leaks.iter().map(|l| l.auc.to_string()));
            rec.push(opt(s.test_loss));
            rec.push(opt(s.test_auc));
            rec.extend(s.extras.iter().map(|&x| opt(x)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean non-degraded leak AUC of attack `k` over the last `frac` of steps.
    pub fn late_leak_auc(&self, k: usize, frac: f64) -> Option<f64> {
        let n = self.steps.len();
        let start = n - ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        let vals: Vec<f64> = self.steps[start..]
            .iter()
            .filter_map(|s| s.leaks.get(k))
            .filter(|l| !l.degraded)
            .map(|l| l.auc)
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Same as [`late_leak_auc`](Self::late_leak_auc) for an extra column.
    pub fn late_extra(&self, k: usize, frac: f64) -> Option<f64> {
        let n = self.steps.len();
        let start = n - ((n as f64 * frac).ceil() as usize).clamp(1, n.max(1));
        let vals: Vec<f64> = self.steps[start..]
            .iter()
            .filter_map(|s| s.extras.get(k).copied().flatten())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Predicted probabilities on a dataset (no calibration applied).
pub fn predict(model: &SplitModel, features: &Mat) -> Result<Vec<f64>> {
    let emb = forward_passive(model, features)?;
    Ok(emb.row_iter().map(|a| sigmoid(model.logit(a))).collect())
}

/// Loss, AUC and ACE of already-mapped probabilities.
pub fn evaluate_probs(probs: &[f64], labels: &[u8]) -> Result<Evaluation> {
    let n = probs.len().max(1) as f64;
    let loss = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n;
    let a = auc(probs, labels).unwrap_or(0.5);
    let bins = AceConfig::default().n_bins.min(probs.len().max(1));
    let c = ace(probs, labels, AceConfig { n_bins: bins })?;
    Ok(Evaluation { loss, auc: a, ace: c })
}

fn evaluate(model: &SplitModel, test: &Dataset, synth: Option<&SynthSession>) -> Result<Evaluation> {
    let mut probs = predict(model, &test.features)?;
    if let Some(s) = synth {
        probs.iter_mut().for_each(|p| *p = s.report_prob(*p));
    }
    evaluate_probs(&probs, &test.labels)
}

/// Shuffled mini-batch SGD over `data`.
///
/// Each step: passive forward, cut-layer exchange, active loss and head
/// update, protection of the gradient matrix, attack evaluation on what the
/// passive party receives, passive backward.
pub fn train(
    model: &mut SplitModel,
    data: &Dataset,
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 || !(cfg.learning_rate >= 0.0) {
        return Err(Error::arg("batch size and epochs must be positive, rate >= 0"));
    }
    let root = Rng::new(cfg.seed);
    let mut order_rng = root.fork(1);
    let mut attack_rng = root.fork(2);
    let mut protector = Protector::new(cfg.protection.clone());
    let mut direct = DirectLink;

    let extra_columns = hooks
        .synth
        .as_ref()
        .map(|s| s.extra_columns())
        .unwrap_or_default();
    let mut report = TrainReport {
        attack_names: hooks.attacks.iter().map(|a| a.name()).collect(),
        extra_columns,
        steps: Vec::new(),
        final_eval: None,
    };

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _epoch in 0..cfg.epochs {
        order_rng.shuffle(&mut order);
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.subset(idx);

            // passive side
            let mut raw = batch.features.clone();
            let mut prepared = None;
            if let Some(s) = hooks.synth.as_deref_mut() {
                prepared = Some(s.prepare_features(idx, &mut raw)?);
            }
            let mut emb = forward_passive(model, &raw)?;
            if let (Some(s), Some(p)) = (hooks.synth.as_deref_mut(), prepared.as_ref()) {
                s.finish_embeddings(p, &mut emb)?;
            }
            let link: &mut dyn CutLink = match hooks.link.as_deref_mut() {
                Some(l) => l,
                None => &mut direct,
            };
            let emb_recv = link.embeddings(&emb)?;

            // active side
            let (targets, cal) = match hooks.synth.as_deref_mut() {
                Some(s) => {
                    let probs: Vec<f64> = emb_recv.row_iter().map(|a| sigmoid(model.logit(a))).collect();
                    (s.labels_for(idx, &batch.labels, &probs, &emb_recv)?, s.loss_calibration())
                }
                None => (batch.labels.iter().map(|&y| f64::from(y)).collect(), None),
            };
            let act = active_step_soft(model, &emb_recv, &targets, cal)?;
            model.h.axpy(&act.h_grad, cfg.learning_rate);
            let used_labels: Vec<u8> = targets.iter().map(|&t| u8::from(t >= 0.5)).collect();
            let protected = protector.apply(&act.grads, &used_labels)?;
            let sent = GradBatch {
                grads: protected,
                labels: batch.labels.clone(),
                ids: batch.ids.clone(),
            };

            // evaluation of what the passive party sees
            let mut leaks = Vec::with_capacity(hooks.attacks.len());
            for &kind in &hooks.attacks {
                leaks.push(run_attack(kind, &sent.grads, &batch.labels, &mut attack_rng)?.leak);
            }
            let extras = match hooks.synth.as_deref() {
                Some(s) => s.detection_aucs(idx, &sent.grads, &emb_recv, &targets)?,
                None => Vec::new(),
            };
            if let Some(obs) = hooks.observer.as_deref_mut() {
                obs(&sent);
            }

            // passive side
            let mut grads_recv = link.gradients(&sent.grads)?;
            if let (Some(s), Some(p)) = (hooks.synth.as_deref(), prepared.as_ref()) {
                s.mask_gradients(p, &mut grads_recv);
            }
            backward_passive(model, &raw, &grads_recv, cfg.learning_rate)?;
            if !model.is_finite() {
                return Err(Error::NumericalOverflow(format!("parameters diverged at step {step}")));
            }

            let mut rec = StepRecord {
                step,
                train_loss: act.loss,
                leaks,
                test_loss: None,
                test_auc: None,
                extras,
            };
            if let Some(test) = hooks.test {
                if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                    let ev = evaluate(model, test, hooks.synth.as_deref())?;
                    rec.test_loss = Some(ev.loss);
                    rec.test_auc = Some(ev.auc);
                }
            }
            report.steps.push(rec);
            step += 1;
        }
    }
    if let Some(test) = hooks.test {
        let ev = evaluate(model, test, hooks.synth.as_deref())?;
        if let Some(last) = report.steps.last_mut() {
            last.test_loss = Some(ev.loss);
            last.test_auc = Some(ev.auc);
        }
        report.final_eval = Some(ev);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_model(d: usize) -> SplitModel {
        let mut f = Dense::zeros(d, d);
        f.w = Mat::identity(d);
        SplitModel {
            f_layers: vec![f],
            activation: Activation::Identity,
            h: Dense {
                w: Mat::from_rows(&[vec![0.5; d]]).unwrap(),
                b: vec![0.1],
            },
        }
    }

    #[test]
    fn identity_forward() {
        let m = identity_model(3);
        let x = Mat::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.0, -0.1]]).unwrap();
        assert_eq!(forward_passive(&m, &x).unwrap(), x);
        let mut z = m.clone();
        z.f_layers[0] = Dense::zeros(3, 3);
        z.activation = Activation::Relu;
        assert_eq!(forward_passive(&z, &x).unwrap(), Mat::zeros(2, 3));
        assert!(forward_passive(&m, &Mat::zeros(1, 2)).is_err());
    }

    #[test]
    fn hand_forward_relu() {
        let layer = Dense {
            w: Mat::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap(),
            b: vec![0.1, -0.5],
        };
        let m = SplitModel {
            f_layers: vec![layer],
            activation: Activation::Relu,
            h: Dense::zeros(2, 1),
        };
        let x = Mat::from_rows(&[[1.0, 2.0], [-1.0, 0.0], [0.3, 0.4]]).unwrap();
        let e = forward_passive(&m, &x).unwrap();
        // row 0: (1-2+0.1, 0.5+4-0.5) = (-0.9, 4.0) -> (0, 4)
        // row 1: (-1+0.1, -0.5-0.5) -> (0, 0)
        // row 2: (0.3-0.4+0.1, 0.15+0.8-0.5) = (0.0, 0.45)
        let want = [[0.0, 4.0], [0.0, 0.0], [0.0, 0.45]];
        for (r, w) in e.row_iter().zip(want) {
            for (a, b) in r.iter().zip(w) {
                assert!((a - b).abs() < 1e-12, "{r:?}");
            }
        }
    }

    #[test]
    fn linear_head_gradient_formula() {
        let m = identity_model(2);
        let emb = Mat::from_rows(&[[1.0, 2.0], [-1.0, 0.5]]).unwrap();
        let st = active_step(&m, &emb, &[1, 0]).unwrap();
        for (i, y) in [1.0, 0.0].iter().enumerate() {
            let l = 0.5 * emb.row(i)[0] + 0.5 * emb.row(i)[1] + 0.1;
            let s = sigmoid(l) - y;
            assert!((st.grads.row(i)[0] - s * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_prediction_has_tiny_gradient() {
        let mut m = identity_model(1);
        m.h.w = Mat::from_rows(&[[1.0]]).unwrap();
        m.h.b = vec![0.0];
        let st = active_step(&m, &Mat::from_rows(&[[30.0]]).unwrap(), &[1]).unwrap();
        assert!(st.grads.row(0)[0].abs() < 1e-12);
        assert!(st.loss >= 0.0 && st.loss < 1e-12);
    }

    #[test]
    fn overflow_is_reported() {
        let mut m = identity_model(1);
        m.h.w = Mat::from_rows(&[[f64::MAX]]).unwrap();
        let r = active_step(&m, &Mat::from_rows(&[[10.0]]).unwrap(), &[1]);
        assert!(matches!(r, Err(Error::NumericalOverflow(_))));
    }

    #[test]
    fn backward_edge_cases() {
        let mut m = identity_model(2);
        m.f_layers[0].b = vec![0.0, 0.0];
        let before = m.clone();
        let x = Mat::from_rows(&[[0.3, 0.4]]).unwrap();
        backward_passive(&mut m, &x, &Mat::zeros(1, 2), 0.1).unwrap();
        assert_eq!(m, before);
        let g = passive_param_grads(&m, &x, &Mat::from_rows(&[[0.7, -0.2]]).unwrap()).unwrap();
        assert_eq!(g[0].b, vec![0.7, -0.2]);
        assert!(matches!(
            backward_passive(&mut m, &x, &Mat::zeros(2, 2), 0.1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn calibrated_loss_reduces_to_plain() {
        let c = LossCalibration { scale: 1.0, shift: 0.0 };
        for (l, t) in [(0.3, 1.0), (-2.0, 0.0), (1.5, 0.4)] {
            let (a, da) = example_loss(l, t, None);
            let (b, db) = example_loss(l, t, Some(c));
            assert!((a - b).abs() < 1e-9 && (da - db).abs() < 1e-9);
        }
    }

    #[test]
    fn calibrated_loss_derivative() {
        let c = LossCalibration { scale: 0.4, shift: 0.08 };
        for (l, t) in [(0.3, 1.0), (-2.0, 0.0), (1.5, 0.4)] {
            let h = 1e-6;
            let fd = (example_loss(l + h, t, Some(c)).0 - example_loss(l - h, t, Some(c)).0) / (2.0 * h);
            let an = example_loss(l, t, Some(c)).1;
            assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{fd} vs {an}");
        }
    }
}
