//! Long-tailed class-count profiles and synthetic Gaussian-blob datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng::{stream, Stream};

/// `counts[c] = max(1, round(base · γ^(−c/C)))` for `c = 0..C`.
pub fn decay_counts(num_classes: usize, base: usize, gamma: f64) -> Result<Vec<usize>> {
    if num_classes == 0 || base == 0 {
        return Err(Error::Input(format!(
            "need at least one class and one base sample, got C={num_classes}, base={base}"
        )));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::Input(format!("imbalance factor must be >= 1, got {gamma}")));
    }
    let c_total = num_classes as f64;
    Ok((0..num_classes)
        .map(|c| {
            let n = base as f64 * gamma.powf(-(c as f64) / c_total);
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Largest over smallest class count.
pub fn imbalance_factor(counts: &[usize]) -> Result<f64> {
    let max = counts
        .iter()
        .max()
        .ok_or_else(|| Error::Input("no class counts".into()))?;
    let min = *counts.iter().min().expect("non-empty");
    if min == 0 {
        return Err(Error::Contract("a class has zero samples".into()));
    }
    Ok(*max as f64 / min as f64)
}

/// Class-count profile of a long-tailed training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongTailSpec {
    pub num_classes: usize,
    pub base_count: usize,
    pub gamma: f64,
    pub counts: Vec<usize>,
}

impl LongTailSpec {
    pub fn new(num_classes: usize, base_count: usize, gamma: f64) -> Result<Self> {
        Ok(Self {
            num_classes,
            base_count,
            gamma,
            counts: decay_counts(num_classes, base_count, gamma)?,
        })
    }

    pub fn realized_imbalance(&self) -> f64 {
        imbalance_factor(&self.counts).expect("counts are floored at 1")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` as a (features, labels) batch.
    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Writes `label,f0,f1,...` rows with 17 significant digits.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::with_capacity(self.len() * (self.dim() + 1) * 24);
        out.push_str("label");
        for j in 0..self.dim() {
            out.push_str(&format!(",f{j}"));
        }
        out.push('\n');
        for (row, y) in self.features.row_iter().zip(&self.labels) {
            out.push_str(&y.to_string());
            for v in row {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a CSV written by [`Dataset::save_csv`] (or any `label,f0,...`
    /// file). `num_classes` defaults to `max label + 1`.
    pub fn load_csv(path: impl AsRef<Path>, split: Split, num_classes: Option<usize>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
        let parse_err = |pos: Option<&csv::Position>, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: pos.map_or(0, |p| p.line()),
            offset: pos.map_or(0, |p| p.byte()),
            message,
        };

        let headers = reader
            .headers()
            .map_err(|e| parse_err(e.position(), e.to_string()))?
            .clone();
        if headers.get(0) != Some("label") {
            return Err(parse_err(None, "first column must be `label`".into()));
        }
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h != format!("f{j}") {
                return Err(parse_err(None, format!("expected column f{j}, found `{h}`")));
            }
        }
        let dim = headers.len() - 1;

        let mut labels = Vec::new();
        let mut values = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| parse_err(e.position(), e.to_string()))?;
            let pos = record.position();
            let y: usize = record[0]
                .parse()
                .map_err(|e| parse_err(pos, format!("label `{}`: {e}", &record[0])))?;
            labels.push(y);
            for field in record.iter().skip(1) {
                let v: f64 = field
                    .parse()
                    .map_err(|e| parse_err(pos, format!("feature `{field}`: {e}")))?;
                if !v.is_finite() {
                    return Err(parse_err(pos, format!("non-finite feature `{field}`")));
                }
                values.push(v);
            }
        }
        if labels.is_empty() {
            return Err(Error::EmptyDataset(path.to_path_buf()));
        }
        let inferred = labels.iter().max().map_or(0, |m| m + 1);
        let num_classes = num_classes.unwrap_or(inferred);
        if inferred > num_classes {
            return Err(parse_err(
                None,
                format!("label {} out of range for {num_classes} classes", inferred - 1),
            ));
        }
        Ok(Self {
            features: Matrix::new(labels.len(), dim, values)?,
            labels,
            num_classes,
            split,
            seed: None,
        })
    }
}

/// Unit-variance isotropic Gaussian blobs, class `c` centered at a seeded
/// random direction of norm `separation`. Centers depend only on
/// `(seed, num_classes, dim, separation)`, so train and test splits drawn with
/// the same seed share them. Samples are emitted in class order.
pub fn make_blobs(
    num_classes: usize,
    dim: usize,
    per_class: &[usize],
    seed: u64,
    separation: f64,
    split: Split,
) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::Input(format!("dim must be >= 2, got {dim}")));
    }
    if per_class.len() != num_classes {
        return Err(Error::shape(format!(
            "{} per-class counts for {num_classes} classes",
            per_class.len()
        )));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Input(format!("separation must be >= 0, got {separation}")));
    }
    let centers = class_centers(num_classes, dim, seed, separation);
    let mut rng = stream(
        seed,
        match split {
            Split::Train => Stream::TrainSamples,
            Split::Test => Stream::TestSamples,
        },
    );
    let total: usize = per_class.iter().sum();
    let mut values = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (c, &n) in per_class.iter().enumerate() {
        for _ in 0..n {
            for j in 0..dim {
                let noise: f64 = rng.sample(StandardNormal);
                values.push(centers.get(c, j) + noise);
            }
            labels.push(c);
        }
    }
    Ok(Dataset {
        features: Matrix::new(total, dim, values)?,
        labels,
        num_classes,
        split,
        seed: Some(seed),
    })
}

fn class_centers(num_classes: usize, dim: usize, seed: u64, separation: f64) -> Matrix {
    let mut rng = stream(seed, Stream::ClassCenters);
    let mut centers = Matrix::zeros(num_classes, dim);
    for c in 0..num_classes {
        let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        for (dst, v) in centers.row_mut(c).iter_mut().zip(&dir) {
            *dst = separation * v / norm;
        }
    }
    centers
}

/// Parameters of a synthetic long-tailed train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub base_count: usize,
    pub gamma: f64,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
    pub test_per_class: usize,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        Self {
            num_classes: 30,
            base_count: 500,
            gamma: 100.0,
            dim: 16,
            separation: 3.0,
            seed: 0,
            test_per_class: 50,
        }
    }
}

/// Contents of `spec.json` in a data directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    #[serde(flatten)]
    pub config: BlobsConfig,
    pub long_tail: LongTailSpec,
    pub realized_imbalance: f64,
}

/// A generated or loaded data directory: `train.csv`, `test.csv`, `spec.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub spec: DataSpec,
    pub train: Dataset,
    pub test: Dataset,
}

impl DataBundle {
    /// Long-tailed train split plus a balanced test split.
    pub fn generate(config: &BlobsConfig) -> Result<Self> {
        let long_tail = LongTailSpec::new(config.num_classes, config.base_count, config.gamma)?;
        let train = make_blobs(
            config.num_classes,
            config.dim,
            &long_tail.counts,
            config.seed,
            config.separation,
            Split::Train,
        )?;
        let test = make_blobs(
            config.num_classes,
            config.dim,
            &vec![config.test_per_class; config.num_classes],
            config.seed,
            config.separation,
            Split::Test,
        )?;
        let realized_imbalance = long_tail.realized_imbalance();
        Ok(Self {
            spec: DataSpec {
                config: config.clone(),
                long_tail,
                realized_imbalance,
            },
            train,
            test,
        })
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.train.save_csv(dir.join("train.csv"))?;
        self.test.save_csv(dir.join("test.csv"))?;
        let spec_path = dir.join("spec.json");
        let json = serde_json::to_string_pretty(&self.spec)?;
        fs::write(&spec_path, json + "\n").map_err(|e| Error::io(spec_path, e))
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let spec_path: PathBuf = dir.join("spec.json");
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        let spec: DataSpec = serde_json::from_str(&text)?;
        let c = Some(spec.config.num_classes);
        let mut train = Dataset::load_csv(dir.join("train.csv"), Split::Train, c)?;
        let mut test = Dataset::load_csv(dir.join("test.csv"), Split::Test, c)?;
        train.seed = Some(spec.config.seed);
        test.seed = Some(spec.config.seed);
        Ok(Self { spec, train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_one_is_flat() {
        assert_eq!(decay_counts(10, 500, 1.0).unwrap(), vec![500; 10]);
    }

    #[test]
    fn cifar_like_profile() {
        let counts = decay_counts(100, 500, 100.0).unwrap();
        assert_eq!(counts[0], 500);
        // 500 · 100^(-0.99) = 5.2356...
        assert_eq!(counts[99], 5);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(imbalance_factor(&counts).unwrap(), 100.0);
    }

    #[test]
    fn tiny_base_floors_at_one() {
        let counts = decay_counts(5, 2, 1000.0).unwrap();
        assert!(counts.iter().all(|&n| n >= 1));
    }

    #[test]
    fn decay_rejects_bad_gamma() {
        assert!(decay_counts(10, 500, 0.5).is_err());
        assert!(decay_counts(0, 500, 2.0).is_err());
    }

    #[test]
    fn imbalance_factor_cases() {
        assert_eq!(imbalance_factor(&[500; 7]).unwrap(), 1.0);
        assert_eq!(imbalance_factor(&[5, 500, 50]).unwrap(), 100.0);
        assert_eq!(imbalance_factor(&[500, 50, 5]).unwrap(), 100.0);
        assert!(matches!(imbalance_factor(&[3, 0]), Err(Error::Contract(_))));
        assert!(imbalance_factor(&[]).is_err());
    }

    #[test]
    fn blobs_are_deterministic() {
        let a = make_blobs(4, 3, &[5, 4, 3, 2], 11, 2.0, Split::Train).unwrap();
        let b = make_blobs(4, 3, &[5, 4, 3, 2], 11, 2.0, Split::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), vec![5, 4, 3, 2]);
        let c = make_blobs(4, 3, &[5, 4, 3, 2], 12, 2.0, Split::Train).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn splits_share_centers() {
        // with zero noise variance unavailable, compare class means over many samples
        let train = make_blobs(2, 2, &[4000, 4000], 3, 6.0, Split::Train).unwrap();
        let test = make_blobs(2, 2, &[4000, 4000], 3, 6.0, Split::Test).unwrap();
        let mean = |d: &Dataset, c: usize| {
            let idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
            let (x, _) = d.batch(&idx);
            x.sum_cols().scale(1.0 / idx.len() as f64)
        };
        for c in 0..2 {
            assert!(mean(&train, c).max_abs_diff(&mean(&test, c)).unwrap() < 0.1);
        }
    }

    #[test]
    fn blobs_reject_small_dim() {
        assert!(make_blobs(2, 1, &[1, 1], 0, 1.0, Split::Train).is_err());
    }
}
