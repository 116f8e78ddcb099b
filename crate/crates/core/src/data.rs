//! Datasets: CSV ingestion, stratified splitting, class weights and the
//! synthetic two-Gaussian generator used for desk-scale experiments.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const NUM_CLASSES: usize = 2;

/// Feature matrix plus binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
    feature_names: Option<Vec<String>>,
    source: String,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<u8>, source: impl Into<String>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidDataset("no feature columns".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::InvalidDataset(format!("label {bad} outside {{0,1}}")));
        }
        if let Some((i, _)) = features
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::InvalidDataset(format!("row {i} has a non-finite value")));
        }
        Ok(Self {
            features,
            labels,
            feature_names: None,
            source: source.into(),
        })
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features() {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: self.n_features(),
            });
        }
        self.feature_names = Some(names);
        Ok(self)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn feature_names(&self) -> Option<&[String]> {
        self.feature_names.as_deref()
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            feature_names: self.feature_names.clone(),
            source: self.source.clone(),
        }
    }
}

/// Read a CSV file with a header row. Every column except `label_column` is a
/// feature, in file order. Row numbers in errors are 1-based data rows.
pub fn load_dataset(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::MissingLabelColumn(label_column.to_string()))?;
    let names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + 1;
        for (c, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if c == label_idx {
                labels.push(match cell {
                    "0" => 0,
                    "1" => 1,
                    _ => {
                        return Err(Error::BadLabel {
                            row,
                            value: cell.to_string(),
                        })
                    }
                });
            } else {
                let v: f64 = cell.parse().ok().filter(|v: &f64| v.is_finite()).ok_or_else(|| {
                    Error::BadCell {
                        row,
                        column: headers[c].to_string(),
                        value: cell.to_string(),
                    }
                })?;
                values.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    if names.is_empty() {
        return Err(Error::InvalidDataset("no feature columns".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), names.len()), values)
        .map_err(|e| Error::InvalidDataset(e.to_string()))?;
    Dataset::new(features, labels, path.display().to_string())?.with_feature_names(names)
}

/// Write `ds` as CSV (features then a `label` column). Values use the
/// shortest representation that parses back to the identical `f64`.
pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut header: Vec<String> = match ds.feature_names() {
        Some(names) => names.to_vec(),
        None => (0..ds.n_features()).map(|j| format!("f{j}")).collect(),
    };
    header.push("label".into());
    writer.write_record(&header)?;
    for (row, &label) in ds.features.rows().into_iter().zip(&ds.labels) {
        let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        fields.push(label.to_string());
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A train/test partition of a parent dataset. Index vectors are ascending
/// positions in the parent.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub test_fraction: f64,
}

/// Per-class test count: `round(count * fraction)` clamped so that both
/// sides keep at least one sample of the class.
pub fn stratified_test_count(class_count: usize, test_fraction: f64) -> usize {
    let raw = (class_count as f64 * test_fraction).round() as usize;
    raw.clamp(1, class_count - 1)
}

/// Split stratified on the class label.
pub fn stratified_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction {test_fraction} outside (0,1)"
        )));
    }
    let counts = ds.class_counts();
    if let Some(c) = (0..NUM_CLASSES).find(|&c| counts[c] < 2) {
        return Err(Error::InvalidDataset(format!(
            "class {c} has {} samples; stratified splitting needs at least 2",
            counts[c]
        )));
    }
    let mut rng = seed::rng(seed);
    let mut test_indices = Vec::new();
    for class in 0..NUM_CLASSES as u8 {
        let mut members: Vec<usize> = ds
            .labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        members.shuffle(&mut rng);
        let k = stratified_test_count(members.len(), test_fraction);
        test_indices.extend_from_slice(&members[..k]);
    }
    test_indices.sort_unstable();
    let mut in_test = vec![false; ds.n_samples()];
    for &i in &test_indices {
        in_test[i] = true;
    }
    let train_indices: Vec<usize> = (0..ds.n_samples()).filter(|&i| !in_test[i]).collect();
    Ok(SplitPair {
        train: ds.select(&train_indices),
        test: ds.select(&test_indices),
        train_indices,
        test_indices,
        seed,
        test_fraction,
    })
}

/// Per-class loss weights, indexed by class id.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub [f64; NUM_CLASSES]);

impl ClassWeights {
    pub fn unit() -> Self {
        ClassWeights([1.0; NUM_CLASSES])
    }

    pub fn get(&self, class: u8) -> f64 {
        self.0[class as usize]
    }
}

/// Balanced inverse-frequency weights `w_c = N / (C * N_c)`.
pub fn class_weights(labels: &[u8]) -> Result<ClassWeights> {
    if labels.is_empty() {
        return Err(Error::Empty("label vector"));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &l in labels {
        if l as usize >= NUM_CLASSES {
            return Err(Error::InvalidArgument(format!("label {l} outside {{0,1}}")));
        }
        counts[l as usize] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!("class {c} absent from labels")));
    }
    let n = labels.len() as f64;
    let mut w = [0.0; NUM_CLASSES];
    for (wc, &nc) in w.iter_mut().zip(&counts) {
        *wc = n / (NUM_CLASSES as f64 * nc as f64);
    }
    Ok(ClassWeights(w))
}

/// Two isotropic unit-variance Gaussian clusters separated along the first
/// axis: class 1 centred at `+separation/2`, class 0 at `-separation/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_features: usize,
    /// Fraction of positives.
    pub class_balance: f64,
    pub separation: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(n_samples: usize, n_features: usize, class_balance: f64, separation: f64, seed: u64) -> Self {
        Self {
            n_samples,
            n_features,
            class_balance,
            separation,
            seed,
        }
    }

    pub fn n_positive(&self) -> usize {
        (self.n_samples as f64 * self.class_balance).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.n_features == 0 {
            return Err(Error::InvalidArgument("n_samples and n_features must be positive".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "class_balance {} outside (0,1)",
                self.class_balance
            )));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::InvalidArgument(format!("separation {} invalid", self.separation)));
        }
        let pos = self.n_positive();
        if pos == 0 || pos == self.n_samples {
            return Err(Error::InvalidArgument(format!(
                "n_samples {} with balance {} leaves a class empty",
                self.n_samples, self.class_balance
            )));
        }
        Ok(())
    }
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let n_pos = spec.n_positive();
    let mut labels: Vec<u8> = (0..spec.n_samples).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);
    let half = spec.separation / 2.0;
    let mut features = Array2::<f64>::zeros((spec.n_samples, spec.n_features));
    for (mut row, &label) in features.rows_mut().into_iter().zip(&labels) {
        for v in row.iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
        row[0] += if label == 1 { half } else { -half };
    }
    Dataset::new(features, labels, format!("synthetic(seed={})", spec.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn balanced(n_per_class: usize) -> Dataset {
        let n = 2 * n_per_class;
        let features = Array2::from_shape_fn((n, 2), |(i, j)| (i * 2 + j) as f64);
        let labels = (0..n).map(|i| (i % 2) as u8).collect();
        Dataset::new(features, labels, "test").unwrap()
    }

    #[test]
    fn loads_three_row_csv() {
        let f = write_tmp("f0,f1,label\n0.1,0.2,1\n0.3,0.4,0\n0.5,0.6,1\n");
        let ds = load_dataset(f.path(), "label").unwrap();
        assert_eq!(ds.features(), &array![[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        assert_eq!(ds.labels(), &[1, 0, 1]);
        assert_eq!(ds.feature_names().unwrap(), &["f0".to_string(), "f1".to_string()]);
    }

    #[test]
    fn label_column_may_be_anywhere() {
        let f = write_tmp("y,a,b\n0,1.5,2.5\n1,3.5,4.5\n");
        let ds = load_dataset(f.path(), "y").unwrap();
        assert_eq!(ds.features(), &array![[1.5, 2.5], [3.5, 4.5]]);
        assert_eq!(ds.labels(), &[0, 1]);
    }

    #[test]
    fn nan_cell_reports_row_and_column() {
        let f = write_tmp("f0,f1,label\n0.1,0.2,1\n0.3,NaN,0\n");
        match load_dataset(f.path(), "label") {
            Err(Error::BadCell { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "f1");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_two_is_rejected() {
        let f = write_tmp("f0,label\n0.1,2\n");
        let err = load_dataset(f.path(), "label").unwrap_err();
        assert!(matches!(err, Error::BadLabel { row: 1, .. }));
        assert!(err.to_string().contains("label outside {0,1}"));
    }

    #[test]
    fn load_errors() {
        assert!(matches!(
            load_dataset("/nonexistent/x.csv", "label"),
            Err(Error::Io { .. })
        ));
        let f = write_tmp("f0,f1\n1,2\n");
        assert!(matches!(load_dataset(f.path(), "label"), Err(Error::MissingLabelColumn(_))));
        let f = write_tmp("");
        assert!(matches!(load_dataset(f.path(), "label"), Err(Error::EmptyFile(_))));
        let f = write_tmp("f0,label\n");
        assert!(matches!(load_dataset(f.path(), "label"), Err(Error::EmptyFile(_))));
    }

    #[test]
    fn write_then_load_is_exact() {
        let ds = make_synthetic(&SyntheticSpec::new(50, 3, 0.3, 2.0, 11)).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_dataset(&ds, f.path()).unwrap();
        let back = load_dataset(f.path(), "label").unwrap();
        assert_eq!(back.features(), ds.features());
        assert_eq!(back.labels(), ds.labels());
    }

    #[test]
    fn split_ten_samples_forty_percent() {
        let ds = balanced(5);
        for seed in 0..20 {
            let sp = stratified_split(&ds, 0.4, seed).unwrap();
            assert_eq!(sp.test.class_counts(), [2, 2]);
            assert_eq!(sp.train.class_counts(), [3, 3]);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let ds = balanced(5);
        let a = stratified_split(&ds, 0.4, 9).unwrap();
        let b = stratified_split(&ds, 0.4, 9).unwrap();
        assert_eq!(a.test_indices, b.test_indices);
        assert_eq!(a.train_indices, b.train_indices);
    }

    #[test]
    fn split_six_samples_rounding() {
        // round(3 * 0.34) = round(1.02) = 1 per class
        let ds = balanced(3);
        let sp = stratified_split(&ds, 0.34, 1).unwrap();
        assert_eq!(sp.test.class_counts(), [1, 1]);
    }

    #[test]
    fn split_rounding_matches_enumeration() {
        for count in 2..40usize {
            for k in 1..100 {
                let frac = k as f64 / 100.0;
                // nearest integer to count*frac, halves away from zero, then clamped
                let exact = count as f64 * frac;
                let mut best = 0usize;
                for cand in 0..=count {
                    let d = (cand as f64 - exact).abs();
                    let bd = (best as f64 - exact).abs();
                    if d < bd || (d == bd && cand > best) {
                        best = cand;
                    }
                }
                let expected = best.clamp(1, count - 1);
                assert_eq!(stratified_test_count(count, frac), expected, "count {count} frac {frac}");
            }
        }
    }

    #[test]
    fn split_errors() {
        let ds = balanced(5);
        assert!(stratified_split(&ds, 0.0, 0).is_err());
        assert!(stratified_split(&ds, 1.0, 0).is_err());
        let tiny = Dataset::new(array![[0.0], [1.0], [2.0]], vec![0, 0, 1], "t").unwrap();
        assert!(matches!(stratified_split(&tiny, 0.5, 0), Err(Error::InvalidDataset(_))));
    }

    #[test]
    fn class_weight_examples() {
        let w = class_weights(&[1, 1, 1, 0]).unwrap();
        assert_eq!(w.0[0], 2.0);
        assert!((w.0[1] - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(class_weights(&[0, 1]).unwrap().0, [1.0, 1.0]);
        assert!(class_weights(&[0, 0, 0, 0]).is_err());
        assert!(class_weights(&[]).is_err());
    }

    #[test]
    fn synthetic_sizes_and_determinism() {
        let spec = SyntheticSpec::new(101, 4, 0.3, 3.0, 5);
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.class_counts(), [101 - 30, 30]);
        assert_eq!(a.n_features(), 4);
        assert!(make_synthetic(&SyntheticSpec::new(10, 2, 0.01, 1.0, 0)).is_err());
        assert!(make_synthetic(&SyntheticSpec::new(10, 0, 0.5, 1.0, 0)).is_err());
    }

    #[test]
    fn synthetic_separation_8_is_nearly_bayes_perfect() {
        // Bayes rule with known means: predict 1 iff x0 > 0. Error rate Phi(-4) ~ 3.2e-5.
        let ds = make_synthetic(&SyntheticSpec::new(2000, 2, 0.5, 8.0, 3)).unwrap();
        let errors = ds
            .features()
            .column(0)
            .iter()
            .zip(ds.labels())
            .filter(|(&x, &y)| u8::from(x > 0.0) != y)
            .count();
        assert!((errors as f64) / 2000.0 < 1e-3, "errors {errors}");
    }

    #[test]
    fn synthetic_zero_separation_has_matching_class_moments() {
        let ds = make_synthetic(&SyntheticSpec::new(20000, 2, 0.5, 0.0, 8)).unwrap();
        for class in 0..2u8 {
            let xs: Vec<f64> = ds
                .features()
                .column(0)
                .iter()
                .zip(ds.labels())
                .filter(|(_, &y)| y == class)
                .map(|(&x, _)| x)
                .collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!(mean.abs() < 0.05, "class {class} mean {mean}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn stratification_bound(n0 in 2usize..60, n1 in 2usize..60, frac in 0.05f64..0.95, seed: u64) {
                let n = n0 + n1;
                let labels: Vec<u8> = (0..n).map(|i| u8::from(i >= n0)).collect();
                let ds = Dataset::new(Array2::zeros((n, 1)), labels, "p").unwrap();
                let sp = stratified_split(&ds, frac, seed).unwrap();
                let counts = [n0, n1];
                let tc = sp.test.class_counts();
                for c in 0..2 {
                    let test_frac = tc[c] as f64 / counts[c] as f64;
                    prop_assert!((test_frac - frac).abs() <= 1.0 / counts[c] as f64 + 1e-12);
                    prop_assert!(tc[c] >= 1 && tc[c] < counts[c]);
                }
                let mut all: Vec<usize> = sp.train_indices.iter().chain(&sp.test_indices).copied().collect();
                all.sort_unstable();
                prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            }

            #[test]
            fn weighted_count_identity(labels in proptest::collection::vec(0u8..2, 2..200)) {
                prop_assume!(labels.contains(&0) && labels.contains(&1));
                let w = class_weights(&labels).unwrap();
                let total: f64 = labels.iter().map(|&l| w.get(l)).sum();
                prop_assert!((total - labels.len() as f64).abs() < 1e-9);
            }
        }
    }
}
