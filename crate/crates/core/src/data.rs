//! Synthetic long-tailed datasets and their CSV form.
//!
//! Each class is an isotropic Gaussian blob around a random center; the
//! background is drawn uniformly over the bounding box of all centers,
//! inflated by three standard deviations, so it contains both easy and hard
//! negatives. Every class and the background draw from their own ChaCha8
//! stream of the same seed, so changing one class count leaves the samples
//! of every other class untouched.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Labels;

/// Fraction of each class held out for testing.
pub const TEST_FRACTION: f64 = 0.3;

const CENTER_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_classes: usize,
    /// Instances per class, head first.
    pub counts: Vec<usize>,
    pub background_count: usize,
    pub feature_dim: usize,
    /// Norm of every class center.
    pub center_separation: f64,
    /// Per-dimension variance of every class blob.
    pub covariance_scale: f64,
    /// `[rare/common, common/frequent]` instance-count cutoffs.
    pub group_thresholds: [usize; 2],
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    /// The desk-scale long-tailed benchmark: 10 classes decaying from 10000
    /// to 50 instances, 20000 background samples and 16 features.
    pub fn benchmark(seed: u64) -> Self {
        DatasetSpec {
            num_classes: 10,
            counts: exponential_counts(10_000, 50, 10),
            background_count: 20_000,
            feature_dim: 16,
            center_separation: 16.0,
            covariance_scale: 4.0,
            group_thresholds: [1_000, 5_000],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be at least 2, got {}",
                self.num_classes
            )));
        }
        if self.counts.len() != self.num_classes {
            return Err(Error::Config(format!(
                "counts has {} entries for {} classes",
                self.counts.len(),
                self.num_classes
            )));
        }
        if let Some(k) = self.counts.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("class {k} has zero instances")));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be at least 1".into()));
        }
        if !(self.center_separation > 0.0 && self.center_separation.is_finite()) {
            return Err(Error::Config(format!(
                "center_separation must be positive, got {}",
                self.center_separation
            )));
        }
        if !(self.covariance_scale > 0.0 && self.covariance_scale.is_finite()) {
            return Err(Error::Config(format!(
                "covariance_scale must be positive, got {}",
                self.covariance_scale
            )));
        }
        let [low, high] = self.group_thresholds;
        if low >= high {
            return Err(Error::Config(format!(
                "group thresholds must be strictly increasing, got ({low}, {high})"
            )));
        }
        Ok(())
    }
}

/// Counts decaying geometrically from `head` to `tail` over `num_classes`
/// classes, rounded to the nearest integer.
pub fn exponential_counts(head: usize, tail: usize, num_classes: usize) -> Vec<usize> {
    match num_classes {
        0 => Vec::new(),
        1 => vec![head],
        _ => {
            let decay = (tail as f64 / head as f64).powf(1.0 / (num_classes - 1) as f64);
            (0..num_classes)
                .map(|i| (head as f64 * decay.powi(i as i32)).round() as usize)
                .collect()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Frequent,
    Common,
    Rare,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub assignment: Vec<Group>,
}

impl ClassGroups {
    /// Classes with fewer than `thresholds[0]` instances are rare, fewer than
    /// `thresholds[1]` common, the rest frequent.
    pub fn from_counts(counts: &[usize], thresholds: [usize; 2]) -> Self {
        let assignment = counts
            .iter()
            .map(|&c| {
                if c < thresholds[0] {
                    Group::Rare
                } else if c < thresholds[1] {
                    Group::Common
                } else {
                    Group::Frequent
                }
            })
            .collect();
        ClassGroups { assignment }
    }

    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, g)| **g == group)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.assignment.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub features: Array2<f64>,
    pub labels: Labels,
    pub sample_ids: Vec<u64>,
}

impl SampleBatch {
    pub fn new(features: Array2<f64>, labels: Labels, sample_ids: Vec<u64>) -> Result<Self> {
        if features.nrows() != labels.nrows() || features.nrows() != sample_ids.len() {
            return Err(Error::Dimension(format!(
                "batch rows disagree: {} feature rows, {} label rows, {} ids",
                features.nrows(),
                labels.nrows(),
                sample_ids.len()
            )));
        }
        Ok(SampleBatch {
            features,
            labels,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.ncols()
    }

    pub fn select(&self, indices: &[usize]) -> SampleBatch {
        SampleBatch {
            features: self.features.select(Axis(0), indices),
            labels: self.labels.select_rows(indices),
            sample_ids: indices.iter().map(|&i| self.sample_ids[i]).collect(),
        }
    }

    /// Positives per class.
    pub fn class_counts(&self) -> Vec<usize> {
        self.labels
            .view()
            .sum_axis(Axis(0))
            .iter()
            .map(|&s| s as usize)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: SampleBatch,
    pub test: SampleBatch,
    pub groups: ClassGroups,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn test_size(count: usize, at_least_one: bool) -> usize {
    let n = (count as f64 * TEST_FRACTION).round() as usize;
    if at_least_one {
        n.max(1).min(count)
    } else {
        n
    }
}

struct Part {
    rows: Vec<Vec<f64>>,
    class: Option<usize>,
    first_id: u64,
    test: Vec<usize>,
}

pub fn generate(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let std = spec.covariance_scale.sqrt();

    let mut center_rng = stream(spec.seed, CENTER_STREAM);
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim)
                .map(|_| center_rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = v
                .iter()
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt()
                .max(f64::MIN_POSITIVE);
            v.into_iter()
                .map(|x| x / norm * spec.center_separation)
                .collect()
        })
        .collect();

    let mut parts = Vec::with_capacity(spec.num_classes + 1);
    let mut next_id = 0u64;
    for (k, (&count, center)) in spec.counts.iter().zip(&centers).enumerate() {
        let mut rng = stream(spec.seed, k as u64 + 1);
        let rows = (0..count)
            .map(|_| {
                center
                    .iter()
                    .map(|&c| c + std * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng);
        order.truncate(test_size(count, true));
        order.sort_unstable();
        parts.push(Part {
            rows,
            class: Some(k),
            first_id: next_id,
            test: order,
        });
        next_id += count as u64;
    }

    let inflate = 3.0 * std;
    let (lo, hi): (Vec<f64>, Vec<f64>) = (0..dim)
        .map(|d| {
            let (min, max) = centers
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, c| {
                    (acc.0.min(c[d]), acc.1.max(c[d]))
                });
            (min - inflate, max + inflate)
        })
        .unzip();
    let mut rng = stream(spec.seed, spec.num_classes as u64 + 1);
    let rows = (0..spec.background_count)
        .map(|_| (0..dim).map(|d| rng.random_range(lo[d]..hi[d])).collect())
        .collect();
    let mut order: Vec<usize> = (0..spec.background_count).collect();
    order.shuffle(&mut rng);
    order.truncate(test_size(spec.background_count, false));
    order.sort_unstable();
    parts.push(Part {
        rows,
        class: None,
        first_id: next_id,
        test: order,
    });

    let (train, test) = assemble(&parts, spec.num_classes, dim)?;
    Ok(SyntheticDataset {
        train,
        test,
        groups: ClassGroups::from_counts(&spec.counts, spec.group_thresholds),
    })
}

fn assemble(parts: &[Part], num_classes: usize, dim: usize) -> Result<(SampleBatch, SampleBatch)> {
    let mut train = (Vec::new(), Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new(), Vec::new());
    for part in parts {
        let mut held_out = part.test.iter().peekable();
        for (j, row) in part.rows.iter().enumerate() {
            let dest = if held_out.peek() == Some(&&j) {
                held_out.next();
                &mut test
            } else {
                &mut train
            };
            dest.0.extend_from_slice(row);
            dest.1.push(part.class);
            dest.2.push(part.first_id + j as u64);
        }
    }
    let build = |(values, classes, ids): (Vec<f64>, Vec<Option<usize>>, Vec<u64>)| {
        let n = classes.len();
        let features = Array2::from_shape_vec((n, dim), values)
            .map_err(|e| Error::Dimension(e.to_string()))?;
        SampleBatch::new(features, Labels::from_classes(num_classes, &classes)?, ids)
    };
    Ok((build(train)?, build(test)?))
}

/// Writes `id,f0..f{D-1},y0..y{C-1}`. Features use the shortest decimal form
/// that parses back to the same `f64`.
pub fn save_csv(batch: &SampleBatch, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let mut header = vec!["id".to_string()];
    header.extend((0..batch.feature_dim()).map(|d| format!("f{d}")));
    header.extend((0..batch.num_classes()).map(|c| format!("y{c}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    let labels = batch.labels.view();
    for (n, id) in batch.sample_ids.iter().enumerate() {
        let mut line = id.to_string();
        for v in batch.features.row(n) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        for &v in labels.row(n) {
            line.push_str(if v == 1.0 { ",1" } else { ",0" });
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a batch written by [`save_csv`]. When `num_classes` is given the
/// label column count must match it.
pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<SampleBatch> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let mut records = reader.records();
    let header = match records.next() {
        None => return Err(parse_err(0, "empty file, expected a header row".into())),
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
    };
    let (dim, classes) = parse_header(&header).map_err(|m| parse_err(1, m))?;
    if let Some(expected) = num_classes {
        if expected != classes {
            return Err(parse_err(
                1,
                format!("{classes} label columns, expected {expected}"),
            ));
        }
    }

    let width = 1 + dim + classes;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in records.enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| parse_err(line, e.to_string()))?;
        if record.len() != width {
            return Err(parse_err(
                line,
                format!("{} fields, expected {width}", record.len()),
            ));
        }
        let id = record[0]
            .trim()
            .parse::<u64>()
            .map_err(|e| parse_err(line, format!("bad id `{}`: {e}", &record[0])))?;
        ids.push(id);
        for field in record.iter().skip(1).take(dim) {
            let v = field
                .trim()
                .parse::<f64>()
                .map_err(|e| parse_err(line, format!("bad feature `{field}`: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature `{field}`")));
            }
            values.push(v);
        }
        for field in record.iter().skip(1 + dim) {
            match field.trim() {
                "0" => labels.push(0.0),
                "1" => labels.push(1.0),
                other => return Err(parse_err(line, format!("bad label `{other}`"))),
            }
        }
    }
    let n = ids.len();
    let features =
        Array2::from_shape_vec((n, dim), values).map_err(|e| Error::Dimension(e.to_string()))?;
    let labels = Array2::from_shape_vec((n, classes), labels)
        .map_err(|e| Error::Dimension(e.to_string()))?;
    let labels = Labels::new(labels).map_err(|e| parse_err(0, e.to_string()))?;
    SampleBatch::new(features, labels, ids)
}

fn parse_header(header: &csv::StringRecord) -> std::result::Result<(usize, usize), String> {
    let mut fields = header.iter().map(str::trim);
    if fields.next() != Some("id") {
        return Err("header must start with `id`".into());
    }
    let mut dim = 0;
    let mut classes = 0;
    for field in fields {
        if classes == 0 && field == format!("f{dim}") {
            dim += 1;
        } else if field == format!("y{classes}") {
            classes += 1;
        } else {
            return Err(format!("unexpected header column `{field}`"));
        }
    }
    if classes == 0 {
        return Err("header has no label columns".into());
    }
    Ok((dim, classes))
}

/// JSON sidecar describing how a dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub groups: ClassGroups,
    pub train_size: usize,
    pub test_size: usize,
}

impl DatasetManifest {
    pub fn new(spec: &DatasetSpec, data: &SyntheticDataset) -> Self {
        DatasetManifest {
            spec: spec.clone(),
            groups: data.groups.clone(),
            train_size: data.train.len(),
            test_size: data.test.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(counts: Vec<usize>) -> DatasetSpec {
        DatasetSpec {
            num_classes: counts.len(),
            counts,
            background_count: 30,
            feature_dim: 4,
            center_separation: 2.0,
            covariance_scale: 0.5,
            group_thresholds: [20, 50],
            seed: 7,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(vec![100, 10]);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small(vec![100, 10])).unwrap();
        let mut spec = small(vec![100, 10]);
        spec.seed = 8;
        let b = generate(&spec).unwrap();
        assert_ne!(a.train.features, b.train.features);
    }

    #[test]
    fn groups_follow_thresholds() {
        let groups = ClassGroups::from_counts(&[12_000, 8_000, 100], [5_000, 10_000]);
        assert_eq!(
            groups.assignment,
            vec![Group::Frequent, Group::Common, Group::Rare]
        );
        assert_eq!(groups.classes_in(Group::Rare), vec![2]);
    }

    #[test]
    fn label_totals_match_counts() {
        let spec = small(vec![100, 37, 3, 1]);
        let data = generate(&spec).unwrap();
        let train = data.train.class_counts();
        let test = data.test.class_counts();
        for k in 0..4 {
            assert_eq!(train[k] + test[k], spec.counts[k]);
            assert!(test[k] >= 1);
        }
        assert_eq!(test[0], 30);
        assert_eq!(
            data.train.len() + data.test.len(),
            spec.counts.iter().sum::<usize>() + spec.background_count
        );
        assert_eq!(data.test.len(), 30 + 11 + 1 + 1 + 9);
    }

    #[test]
    fn class_streams_are_independent() {
        let a = generate(&small(vec![100, 10, 20])).unwrap();
        let b = generate(&small(vec![100, 15, 20])).unwrap();
        let rows_of = |batch: &SampleBatch, k: usize| -> Vec<Vec<f64>> {
            (0..batch.len())
                .filter(|&n| batch.labels.class_of(n) == Some(k))
                .map(|n| batch.features.row(n).to_vec())
                .collect()
        };
        for k in [0, 2] {
            assert_eq!(rows_of(&a.train, k), rows_of(&b.train, k));
            assert_eq!(rows_of(&a.test, k), rows_of(&b.test, k));
        }
        assert_ne!(rows_of(&a.train, 1), rows_of(&b.train, 1));
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&small(vec![100, 0])).is_err());
        let mut spec = small(vec![10, 5]);
        spec.group_thresholds = [50, 50];
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let mut spec = small(vec![10]);
        spec.num_classes = 1;
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn exponential_counts_decay() {
        let counts = exponential_counts(10_000, 50, 10);
        assert_eq!(counts.len(), 10);
        assert_eq!(counts[0], 10_000);
        assert_eq!(counts[9], 50);
        let decay = (50f64 / 10_000.0).powf(1.0 / 9.0);
        for w in counts.windows(2) {
            let expected = w[0] as f64 * decay;
            // Both neighbours are rounded, so the ratio can drift by one count each.
            assert!((w[1] as f64 - expected).abs() <= 1.0 + decay, "{w:?}");
        }
    }
}
