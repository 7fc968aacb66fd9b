//! Vector datasets: loading, saving and synthetic Gaussian benchmarks.
//!
//! Labels travel with the vectors but are only handed out through
//! [`Dataset::labels`]; training code works on [`Dataset::vectors`] alone.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed::rng_from;

const RAW_MAGIC: &[u8; 4] = b"RRDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    RawF32,
}

impl Format {
    /// Guesses the format from a file extension (`.csv` vs anything else).
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::RawF32,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "raw_f32" | "raw" => Ok(Format::RawF32),
            other => Err(Error::invalid(format!("unknown dataset format {other:?}"))),
        }
    }
}

/// N feature vectors of dimension `d_in`, optional evaluation labels and stable ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vectors: Array2<f64>,
    labels: Option<Vec<u32>>,
    label_names: Vec<String>,
    ids: Vec<u64>,
}

impl Dataset {
    /// Unlabeled dataset; ids are the row indices.
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        Self::build(vectors, None, Vec::new())
    }

    /// Labeled dataset. `label_names[l]` names class id `l`; when empty,
    /// names default to `class{l}`.
    pub fn with_labels(
        vectors: Array2<f64>,
        labels: Vec<u32>,
        label_names: Vec<String>,
    ) -> Result<Self> {
        Self::build(vectors, Some(labels), label_names)
    }

    fn build(
        vectors: Array2<f64>,
        labels: Option<Vec<u32>>,
        mut label_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if d == 0 {
            return Err(Error::invalid("feature dimension must be at least 1"));
        }
        if let Some((idx, _)) = vectors.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::MalformedRow {
                row: idx / d,
                reason: "non-finite feature value".into(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: labels.len(),
                });
            }
            let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
            if label_names.is_empty() {
                label_names = (0..classes).map(|c| format!("class{c}")).collect();
            } else if label_names.len() < classes {
                return Err(Error::invalid("label names do not cover every label id"));
            }
        } else {
            label_names.clear();
        }
        Ok(Dataset {
            vectors,
            labels,
            label_names,
            ids: (0..n as u64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    /// Evaluation-only class ids.
    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn load(path: &Path, format: Format) -> Result<Self> {
        let bytes = fs::read(path)?;
        match format {
            Format::Csv => {
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Format("csv input is not valid UTF-8".into()))?;
                parse_csv(&text)
            }
            Format::RawF32 => parse_raw(&bytes),
        }
    }

    pub fn save(&self, path: &Path, format: Format) -> Result<()> {
        let bytes = match format {
            Format::Csv => self.to_csv().into_bytes(),
            Format::RawF32 => self.to_raw(),
        };
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    /// CSV with 9 significant digits and the label name as trailing column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# n={} d={}\n", self.len(), self.dim()));
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            let fields: Vec<String> = row.iter().map(|v| format!("{v:.8e}")).collect();
            out.push_str(&fields.join(","));
            if let Some(labels) = &self.labels {
                out.push(',');
                out.push_str(&self.label_names[labels[i] as usize]);
            }
            out.push('\n');
        }
        out
    }

    pub fn to_raw(&self) -> Vec<u8> {
        let (n, d) = self.vectors.dim();
        let mut out = Vec::with_capacity(13 + 4 * n * (d + 1));
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        out.push(self.labels.is_some() as u8);
        for v in self.vectors.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                out.extend_from_slice(&l.to_le_bytes());
            }
        }
        out
    }
}

/// Parses the csv layout: optional `#` header lines, comma-separated
/// features, and a trailing label column when the first data row's last
/// field is not numeric.
pub fn parse_csv(text: &str) -> Result<Dataset> {
    let mut values = Vec::new();
    let mut dim: Option<usize> = None;
    let mut labeled: Option<bool> = None;
    let mut raw_labels: Vec<String> = Vec::new();
    let mut rows = 0usize;

    for (line_idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line_idx + 1;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let has_label = *labeled.get_or_insert_with(|| {
            fields.len() > 1 && fields.last().is_some_and(|f| f.parse::<f64>().is_err())
        });
        let (feature_fields, label) = if has_label {
            let (last, rest) = fields.split_last().expect("nonempty split");
            (rest, Some(*last))
        } else {
            (&fields[..], None)
        };
        match dim {
            None => dim = Some(feature_fields.len()),
            Some(d) if d != feature_fields.len() => {
                return Err(Error::RowDimension {
                    row,
                    expected: d,
                    found: feature_fields.len(),
                })
            }
            _ => {}
        }
        for f in feature_fields {
            let v: f64 = f.parse().map_err(|_| Error::MalformedRow {
                row,
                reason: format!("cannot parse {f:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::MalformedRow {
                    row,
                    reason: "non-finite feature value".into(),
                });
            }
            values.push(v);
        }
        if let Some(label) = label {
            if label.is_empty() {
                return Err(Error::MalformedRow {
                    row,
                    reason: "empty label".into(),
                });
            }
            raw_labels.push(label.to_string());
        }
        rows += 1;
    }

    let dim = match dim {
        Some(d) if rows > 0 => d,
        _ => return Err(Error::EmptyDataset),
    };
    let vectors = Array2::from_shape_vec((rows, dim), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    if labeled == Some(true) {
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut names = Vec::new();
        let labels = raw_labels
            .into_iter()
            .map(|name| {
                *index.entry(name.clone()).or_insert_with(|| {
                    names.push(name);
                    names.len() as u32 - 1
                })
            })
            .collect();
        Dataset::with_labels(vectors, labels, names)
    } else {
        Dataset::new(vectors)
    }
}

pub fn parse_raw(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bytes.len() < 13 || &bytes[..4] != RAW_MAGIC {
        return Err(Error::Format("missing RRDS header".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let has_labels = match bytes[12] {
        0 => false,
        1 => true,
        other => return Err(Error::Format(format!("bad has_labels flag {other}"))),
    };
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let body = &bytes[13..];
    let expected = 4 * n * d + if has_labels { 4 * n } else { 0 };
    if body.len() != expected {
        return Err(Error::Format(format!(
            "expected {expected} payload bytes for {n}x{d}, found {}",
            body.len()
        )));
    }
    let mut chunks = body.chunks_exact(4);
    let values: Vec<f64> = chunks
        .by_ref()
        .take(n * d)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let vectors =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::Format(e.to_string()))?;
    if has_labels {
        let labels = chunks
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::with_labels(vectors, labels, Vec::new())
    } else {
        Dataset::new(vectors)
    }
}

/// Parameters of an isotropic Gaussian cluster benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub cluster_std: f64,
    pub seed: u64,
}

/// Minimum distance between any two class means, in units of `cluster_std`.
pub const MEAN_SEPARATION: f64 = 6.0;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.samples_per_class < 2 {
            return Err(Error::invalid("samples_per_class must be at least 2"));
        }
        if self.dim == 0 {
            return Err(Error::invalid("dim must be at least 1"));
        }
        if !(self.cluster_std > 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::invalid("cluster_std must be positive"));
        }
        Ok(())
    }
}

/// Class means with every pairwise distance at least `MEAN_SEPARATION * std`.
///
/// When `dim >= num_classes` the means sit on scaled basis vectors, so every
/// pair is exactly at the minimum separation. Otherwise means are drawn from a
/// standard normal and rescaled so the closest pair hits the minimum.
fn class_means<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Array2<f64> {
    let sep = MEAN_SEPARATION * spec.cluster_std;
    let (c, d) = (spec.num_classes, spec.dim);
    if d >= c {
        let mut means = Array2::zeros((c, d));
        for k in 0..c {
            means[[k, k]] = sep / std::f64::consts::SQRT_2;
        }
        return means;
    }
    loop {
        let mut means = Array2::from_shape_fn((c, d), |_| rng.sample::<f64, _>(StandardNormal));
        let mut min_dist = f64::INFINITY;
        for a in 0..c {
            for b in (a + 1)..c {
                let dist = (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt();
                min_dist = min_dist.min(dist);
            }
        }
        if min_dist > 1e-9 {
            // Round-off can leave the closest pair a hair below the target.
            means *= sep / min_dist * (1.0 + 1e-12);
            return means;
        }
    }
}

/// Samples `num_classes` isotropic Gaussian clusters, class-major order.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng_from(spec.seed);
    let means = class_means(spec, &mut rng);
    let n = spec.num_classes * spec.samples_per_class;
    let mut vectors = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
        let class = i / spec.samples_per_class;
        for (v, m) in row.iter_mut().zip(means.row(class)) {
            *v = m + spec.cluster_std * rng.sample::<f64, _>(StandardNormal);
        }
        labels.push(class as u32);
    }
    Dataset::with_labels(vectors, labels, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_with_labels() {
        let ds = parse_csv("0.0,0.0,A\n1.0,0.0,A\n5.0,5.0,B\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels().unwrap(), &[0, 0, 1]);
        assert_eq!(ds.label_names(), &["A".to_string(), "B".to_string()]);
        assert_eq!(ds.vectors(), array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]]);
    }

    #[test]
    fn csv_numeric_last_column_is_a_feature() {
        let ds = parse_csv("# header\n1,2,3\n4,5,6\n").unwrap();
        assert_eq!(ds.dim(), 3);
        assert!(ds.labels().is_none());
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(parse_csv(""), Err(Error::EmptyDataset)));
        assert!(matches!(parse_csv("# only a header\n\n"), Err(Error::EmptyDataset)));
        assert!(matches!(parse_raw(&[]), Err(Error::EmptyDataset)));
    }

    #[test]
    fn dimension_mismatch_names_row() {
        let err = parse_csv("1,2,3\n4,5\n7,8,9\n").unwrap_err();
        match err {
            Error::RowDimension { row, expected, found } => {
                assert_eq!((row, expected, found), (2, 3, 2));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err_string(parse_csv("1,2,3\n4,5\n")).contains("row 2"));
    }

    #[test]
    fn malformed_value_names_row() {
        let err = parse_csv("1,2\n3,x\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }));
    }

    fn err_string(r: Result<Dataset>) -> String {
        r.unwrap_err().to_string()
    }

    #[test]
    fn raw_rejects_bad_header_and_truncation() {
        assert!(matches!(parse_raw(b"NOPE0000000000"), Err(Error::Format(_))));
        let ds = Dataset::new(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let mut bytes = ds.to_raw();
        bytes.pop();
        assert!(matches!(parse_raw(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn raw_round_trip_keeps_labels() {
        let ds = Dataset::with_labels(array![[1.5, -2.0], [0.25, 4.0]], vec![1, 0], vec![])
            .unwrap();
        let back = parse_raw(&ds.to_raw()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn synthetic_counts_and_balance() {
        let spec = SyntheticSpec {
            num_classes: 2,
            samples_per_class: 10,
            dim: 2,
            cluster_std: 0.1,
            seed: 7,
        };
        let ds = gen_synthetic(&spec).unwrap();
        assert_eq!(ds.len(), 20);
        let labels = ds.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 10);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 10);
        assert_eq!(gen_synthetic(&spec).unwrap(), ds);
    }

    #[test]
    fn synthetic_means_are_separated() {
        for (classes, dim) in [(3, 8), (10, 16), (6, 2)] {
            let spec = SyntheticSpec {
                num_classes: classes,
                samples_per_class: 2,
                dim,
                cluster_std: 0.3,
                seed: 3,
            };
            let means = class_means(&spec, &mut rng_from(3));
            for a in 0..classes {
                for b in (a + 1)..classes {
                    let d = (&means.row(a) - &means.row(b)).mapv(|v| v * v).sum().sqrt();
                    assert!(d >= MEAN_SEPARATION * 0.3 - 1e-12, "{classes}/{dim}: {d}");
                }
            }
        }
    }

    #[test]
    fn synthetic_rejects_bad_spec() {
        let mut spec = SyntheticSpec {
            num_classes: 1,
            samples_per_class: 10,
            dim: 2,
            cluster_std: 0.1,
            seed: 0,
        };
        assert!(gen_synthetic(&spec).is_err());
        spec.num_classes = 2;
        spec.cluster_std = 0.0;
        assert!(gen_synthetic(&spec).is_err());
    }
}
