//! Experiment configuration and the end-to-end pipeline: optional set
//! union alignment, synthetic fill, protected training with per-batch
//! attack evaluation, and summary rows.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackKind, AttackSection};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::protect::{ProtectionConfig, ProtectionSection};
use crate::psu::{pad_with_dummies, run_psu, GroupParams, Role, UidMap};
use crate::splitnn::{train, Activation, Dataset, GradBatch, SplitModel, TrainConfig, TrainHooks, TrainReport};
use crate::synthdata::{SynthSection, SynthSession, UnionSchedule};

use super::dataset::{gen_dataset, read_dataset_csv, train_test_split, DatasetSpec};
use super::transport::channel_pair;

/// Environment variable overriding the top-level seed.
pub const SEED_ENV: &str = "SPLITSHIELD_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// read from this CSV instead of generating
    pub csv: Option<PathBuf>,
    pub n: usize,
    pub d_in: usize,
    pub pos_fraction: f64,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: Option<u64>,
    pub test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let s = DatasetSpec::default();
        Self {
            csv: None,
            n: s.n,
            d_in: s.d_in,
            pos_fraction: s.pos_fraction,
            separation: s.separation,
            noise_std: s.noise_std,
            seed: None,
            test_fraction: 0.2,
        }
    }
}

impl DatasetSection {
    pub fn spec(&self, default_seed: u64) -> DatasetSpec {
        DatasetSpec {
            n: self.n,
            d_in: self.d_in,
            pos_fraction: self.pos_fraction,
            separation: self.separation,
            noise_std: self.noise_std,
            seed: self.seed.unwrap_or(default_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// hidden widths of `f` before the cut layer
    pub hidden: Vec<usize>,
    pub cut_dim: usize,
    pub activation: Activation,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            hidden: Vec::new(),
            cut_dim: 8,
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            eval_every: t.eval_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsuSection {
    /// `modp2048`, `safe128` or `toy23`
    pub group: String,
    /// random ids appended to each party's set before the protocol
    pub dummies: usize,
}

impl Default for PsuSection {
    fn default() -> Self {
        Self {
            group: "safe128".into(),
            dummies: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// dotted path of the swept key, e.g. `protection.L`
    pub param: String,
    pub values: Vec<toml::Value>,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_attacks() -> Vec<AttackSection> {
    vec![AttackSection {
        attack: "norm".into(),
        n_hints: None,
        similarity: None,
    }]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSection>,
    pub protection: Option<ProtectionSection>,
    pub psu: Option<PsuSection>,
    pub synth: Option<SynthSection>,
    pub sweep: Option<SweepSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output: None,
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            attacks: default_attacks(),
            protection: None,
            psu: None,
            synth: None,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    /// Read a config file and apply the `SPLITSHIELD_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(seed) = seed_from_env()? {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn attack_kinds(&self) -> Result<Vec<AttackKind>> {
        self.attacks.iter().map(AttackSection::to_kind).collect()
    }

    pub fn protection_config(&self) -> Result<ProtectionConfig> {
        match &self.protection {
            Some(sec) => ProtectionConfig::from_section(sec, self.seed.wrapping_add(1)),
            None => Ok(ProtectionConfig {
                seed: self.seed.wrapping_add(1),
                ..ProtectionConfig::default()
            }),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            seed: self.seed,
            protection: self.protection_config()?,
            eval_every: self.train.eval_every,
        })
    }

    /// Copy with the dotted `path` set to `value`.
    pub fn with_param(&self, path: &str, value: &toml::Value) -> Result<Self> {
        let mut tree = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let mut node = &mut tree;
        let keys: Vec<&str> = path.split('.').collect();
        for (i, key) in keys.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{path}` does not name a table entry")))?;
            if i + 1 == keys.len() {
                table.insert((*key).to_string(), value.clone());
                break;
            }
            node = table
                .entry((*key).to_string())
                .or_insert_with(|| toml::Value::Table(Default::default()));
        }
        tree.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }
}

/// `SPLITSHIELD_SEED` if set.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Set union outcome as seen from both parties.
#[derive(Debug, Clone)]
pub struct PsuOutcome {
    pub active: UidMap,
    pub passive: UidMap,
    pub union_size: usize,
    /// both parties derived the same `U` and every shared id maps to the
    /// same uid on both sides
    pub consistent: bool,
}

/// Both parties in one process, the passive one on its own thread.
pub fn psu_in_process(
    active_ids: &[Vec<u8>],
    passive_ids: &[Vec<u8>],
    group: &GroupParams,
    seed: u64,
) -> Result<PsuOutcome> {
    let (ta, tp) = channel_pair();
    let g = group.clone();
    let pids = passive_ids.to_vec();
    let handle = std::thread::spawn(move || run_psu(Role::Passive, &pids, &g, tp, &mut Rng::new(seed).fork(41)));
    let active = run_psu(Role::Active, active_ids, group, ta, &mut Rng::new(seed).fork(42));
    let passive = handle
        .join()
        .map_err(|_| Error::Protocol("passive party panicked".into()))?;
    let (active, passive) = match (active, passive) {
        (Ok(a), Ok(p)) => (a, p),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => return Err(e),
        // the first failure aborts the peer; report the root cause
        (Err(a), Err(p)) => return Err(if matches!(a, Error::Protocol(_)) { p } else { a }),
    };
    let consistent = active.uids == passive.uids
        && active
            .mapping
            .iter()
            .all(|(id, u)| passive.mapping.get(id).is_none_or(|v| v == u));
    Ok(PsuOutcome {
        union_size: active.len(),
        active,
        passive,
        consistent,
    })
}

/// Active and passive id lists.
pub type IdSets = (Vec<Vec<u8>>, Vec<Vec<u8>>);

/// Synthetic id sets: `size_a` and `size_b` ids sharing
/// `round(overlap * min(size_a, size_b))` of them.
pub fn overlapping_ids(size_a: usize, size_b: usize, overlap: f64, seed: u64) -> Result<IdSets> {
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::arg("overlap must be in [0, 1]"));
    }
    let shared = (overlap * size_a.min(size_b) as f64).round() as usize;
    let id = |i: usize| format!("user-{seed}-{i}").into_bytes();
    let a: Vec<Vec<u8>> = (0..size_a).map(id).collect();
    let b: Vec<Vec<u8>> = (0..shared).chain(size_a..size_a + size_b - shared).map(id).collect();
    Ok((a, b))
}

fn id_bytes(id: u64) -> Vec<u8> {
    id.to_be_bytes().to_vec()
}

/// Align the training rows on the shared uid order. Rows are laid out in
/// `U` order; positions only reachable through dummy ids are dropped.
fn align(
    data: &Dataset,
    schedule: &UnionSchedule,
    sec: &PsuSection,
    seed: u64,
) -> Result<(Dataset, UnionSchedule, PsuOutcome)> {
    let group = GroupParams::by_name(&sec.group)?;
    let owned = |mask: &[bool]| -> Vec<Vec<u8>> {
        data.ids
            .iter()
            .zip(mask)
            .filter(|(_, &o)| o)
            .map(|(&id, _)| id_bytes(id))
            .collect()
    };
    let mut rng = Rng::new(seed).fork(43);
    let a_ids = pad_with_dummies(&owned(&schedule.label_owned), sec.dummies, &mut rng);
    let p_ids = pad_with_dummies(&owned(&schedule.feature_owned), sec.dummies, &mut rng);
    let out = psu_in_process(&a_ids, &p_ids, &group, seed)?;
    if !out.consistent {
        return Err(Error::Consistency("parties disagree on the uid mapping".into()));
    }
    let a_own = out.active.ownership();
    let p_own = out.passive.ownership();
    let mut rows: Vec<(usize, usize)> = Vec::with_capacity(data.len());
    for (row, &id) in data.ids.iter().enumerate() {
        let key = id_bytes(id);
        let pos = out
            .active
            .position(&key)
            .or_else(|| out.passive.position(&key))
            .ok_or_else(|| Error::Consistency(format!("id {id} is missing from the union")))?;
        rows.push((pos, row));
    }
    rows.sort_unstable();
    let order: Vec<usize> = rows.iter().map(|&(_, r)| r).collect();
    let aligned = data.subset(&order);
    let sched = UnionSchedule::new(
        rows.iter().map(|&(p, _)| a_own[p]).collect(),
        rows.iter().map(|&(p, _)| p_own[p]).collect(),
    )?;
    Ok((aligned, sched, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub param: Option<String>,
    pub seed: u64,
    pub test_auc: f64,
    pub test_loss: f64,
    pub ace: f64,
    /// `(attack name, mean late-training leak AUC)`
    pub leaks: Vec<(String, Option<f64>)>,
}

/// Fraction of final steps averaged into the summary's leak AUC.
pub const LATE_FRACTION: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: TrainReport,
    pub summary: SummaryRow,
    pub psu: Option<PsuOutcome>,
}

fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset.csv {
        Some(path) => read_dataset_csv(fs::File::open(path)?),
        None => gen_dataset(&cfg.dataset.spec(cfg.seed)),
    }
}

/// One full run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_observed(cfg, None)
}

/// [`run_experiment`] with a callback on every communicated gradient batch.
pub fn run_experiment_observed(
    cfg: &ExperimentConfig,
    observer: Option<&mut dyn FnMut(&GradBatch)>,
) -> Result<ExperimentOutput> {
    let data = load_data(cfg)?;
    let (train_set, test_set) = train_test_split(&data, cfg.dataset.test_fraction, cfg.seed)?;
    let attacks = cfg.attack_kinds()?;
    let tcfg = cfg.train_config()?;

    let synth_cfg = cfg
        .synth
        .as_ref()
        .map(|s| s.to_config(cfg.seed.wrapping_add(2)))
        .transpose()?;
    let mut schedule = match &cfg.synth {
        Some(s) => UnionSchedule::random(
            train_set.len(),
            s.label_fraction,
            s.feature_fraction,
            &mut Rng::new(cfg.seed).fork(31),
        )?,
        None => UnionSchedule::full(train_set.len()),
    };
    let mut train_set = train_set;
    let mut psu = None;
    if let Some(sec) = &cfg.psu {
        let (aligned, sched, out) = align(&train_set, &schedule, sec, cfg.seed.wrapping_add(3))?;
        train_set = aligned;
        schedule = sched;
        psu = Some(out);
    }

    let mut model = SplitModel::new(
        train_set.features.cols(),
        &cfg.model.hidden,
        cfg.model.cut_dim,
        cfg.model.activation,
        &mut Rng::new(cfg.seed).fork(21),
    )?;
    let mut session = match synth_cfg {
        Some(sc) => Some(SynthSession::new(sc, schedule, &train_set)?),
        None => None,
    };
    let test = (!test_set.is_empty()).then_some(&test_set);
    let hooks = TrainHooks {
        attacks: attacks.clone(),
        test,
        synth: session.as_mut(),
        observer: observer.map(|o| &mut *o as &mut dyn FnMut(&GradBatch)),
        ..TrainHooks::default()
    };
    let report = train(&mut model, &train_set, &tcfg, hooks)?;
    let (test_auc, test_loss, ace) = report
        .final_eval
        .as_ref()
        .map_or((f64::NAN, f64::NAN, f64::NAN), |e| (e.auc, e.loss, e.ace));
    let leaks = attacks
        .iter()
        .enumerate()
        .map(|(k, a)| (a.name(), report.late_leak_auc(k, LATE_FRACTION)))
        .collect();
    Ok(ExperimentOutput {
        summary: SummaryRow {
            param: None,
            seed: cfg.seed,
            test_auc,
            test_loss,
            ace,
            leaks,
        },
        report,
        psu,
    })
}

/// One run per `(value, seed)` pair; every point is configured
/// independently so the order of execution does not matter.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let sw = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    if sw.values.is_empty() {
        return Err(Error::Config("sweep has no values".into()));
    }
    let seeds = if sw.seeds.is_empty() { vec![cfg.seed] } else { sw.seeds.clone() };
    let mut base = cfg.clone();
    base.sweep = None;
    let mut points = Vec::new();
    for v in &sw.values {
        let label = match v {
            toml::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        for &seed in &seeds {
            let mut point = base.with_param(&sw.param, v)?;
            point.seed = seed;
            points.push((label.clone(), point));
        }
    }
    Ok(points)
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<ExperimentOutput>> {
    sweep_points(cfg)?
        .into_iter()
        .map(|(label, point)| {
            let mut out = run_experiment(&point)?;
            out.summary.param = Some(label);
            Ok(out)
        })
        .collect()
}

pub fn summary_header(rows: &[SummaryRow]) -> Vec<String> {
    let mut h: Vec<String> = ["param", "seed", "test_auc", "test_loss", "ace"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if let Some(r) = rows.first() {
        h.extend(r.leaks.iter().map(|(n, _)| format!("leak_auc_{n}")));
    }
    h
}

pub fn write_summary_csv<W: std::io::Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(summary_header(rows))?;
    for r in rows {
        let mut rec = vec![
            r.param.clone().unwrap_or_default(),
            r.seed.to_string(),
            r.test_auc.to_string(),
            r.test_loss.to_string(),
            r.ace.to_string(),
        ];
        rec.extend(r.leaks.iter().map(|(_, v)| v.map(|x| x.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// File name of one sweep point's step CSV.
pub fn step_file_name(param: Option<&str>, seed: u64) -> String {
    match param {
        None => "steps.csv".into(),
        Some(p) => {
            let safe: String = p
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            format!("steps_{safe}_seed{seed}.csv")
        }
    }
}

/// Write step CSVs and `summary.csv` into `dir`.
pub fn write_outputs(dir: &Path, outputs: &[ExperimentOutput]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for o in outputs {
        let path = dir.join(step_file_name(o.summary.param.as_deref(), o.summary.seed));
        o.report.write_csv(fs::File::create(&path)?)?;
        written.push(path);
    }
    let rows: Vec<SummaryRow> = outputs.iter().map(|o| o.summary.clone()).collect();
    let path = dir.join("summary.csv");
    write_summary_csv(&rows, fs::File::create(&path)?)?;
    written.push(path);
    Ok(written)
}
