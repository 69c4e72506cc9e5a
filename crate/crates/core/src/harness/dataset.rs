//! Synthetic two-class Gaussian data and its CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Mat, Rng};
use crate::splitnn::Dataset;

/// Two isotropic Gaussians whose means differ by `separation` along the
/// all-ones direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n: usize,
    pub d_in: usize,
    pub pos_fraction: f64,
    pub separation: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n: 20_000,
            d_in: 16,
            pos_fraction: 0.1,
            separation: 2.0,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::arg("d_in must be positive"));
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(Error::arg("pos_fraction must be in (0, 1)"));
        }
        if self.pos_fraction * (self.n as f64) < 2.0 {
            return Err(Error::arg(format!(
                "pos_fraction {} of n = {} expects fewer than 2 positives",
                self.pos_fraction, self.n
            )));
        }
        if !(self.noise_std > 0.0) || !self.separation.is_finite() {
            return Err(Error::arg("noise_std must be positive and separation finite"));
        }
        Ok(())
    }
}

/// Labels are Bernoulli(`pos_fraction`); class 0 is centred at the origin
/// and class 1 at `separation * 1 / sqrt(d_in)`. Redraws until both classes
/// appear.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let shift = spec.separation / (spec.d_in as f64).sqrt();
    let labels = loop {
        let y: Vec<u8> = (0..spec.n).map(|_| u8::from(rng.bernoulli(spec.pos_fraction))).collect();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos > 0 && pos < spec.n {
            break y;
        }
    };
    let mut features = Mat::zeros(spec.n, spec.d_in);
    for (i, &y) in labels.iter().enumerate() {
        let mu = if y == 1 { shift } else { 0.0 };
        for x in features.row_mut(i) {
            *x = mu + spec.noise_std * rng.normal();
        }
    }
    Dataset::new(features, labels, (0..spec.n as u64).collect())
}

/// Split into a training and a test part by a seeded permutation.
pub fn train_test_split(data: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::arg("test_fraction must be in [0, 1)"));
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    Rng::new(seed).fork(11).shuffle(&mut idx);
    let n_test = (data.len() as f64 * test_fraction).round() as usize;
    let (test, train) = idx.split_at(n_test);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((data.subset(&train), data.subset(&test)))
}

/// Columns `id,label,x0,...`.
pub fn write_dataset_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..data.features.cols()).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for ((id, y), row) in data.ids.iter().zip(&data.labels).zip(data.features.row_iter()) {
        let mut rec = vec![id.to_string(), y.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Inverse of [`write_dataset_csv`]; the feature columns are everything
/// after `id` and `label`.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Config("dataset CSV needs columns id,label,x0,...".into()));
    }
    let d = header.len() - 2;
    let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Config(format!("dataset CSV row {}: bad {what}", line + 1));
        ids.push(rec[0].trim().parse::<u64>().map_err(|_| bad("id"))?);
        labels.push(rec[1].trim().parse::<u8>().map_err(|_| bad("label"))?);
        for j in 0..d {
            let x: f64 = rec[j + 2].trim().parse().map_err(|_| bad("feature"))?;
            if !x.is_finite() {
                return Err(bad("feature"));
            }
            data.push(x);
        }
    }
    let n = labels.len();
    Dataset::new(Mat::from_vec(n, d, data)?, labels, ids)
}

/// Gradient matrix with labels, as dumped for offline attacks:
/// columns `label,g0,...`.
pub fn write_gradients_csv<W: Write>(grads: &Mat, labels: &[u8], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..grads.cols()).map(|j| format!("g{j}")));
    w.write_record(&header)?;
    for (y, row) in labels.iter().zip(grads.row_iter()) {
        let mut rec = vec![y.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_gradients_csv<R: Read>(input: R) -> Result<(Mat, Vec<u8>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.len() < 2 || &header[0] != "label" {
        return Err(Error::Config("gradient CSV needs columns label,g0,...".into()));
    }
    let d = header.len() - 1;
    let (mut labels, mut data) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || Error::Config(format!("gradient CSV row {}: unparsable value", line + 1));
        labels.push(rec[0].trim().parse::<u8>().map_err(|_| bad())?);
        for j in 0..d {
            data.push(rec[j + 1].trim().parse::<f64>().map_err(|_| bad())?);
        }
    }
    let n = labels.len();
    Ok((Mat::from_vec(n, d, data)?, labels))
}
