//! Incomplete datasets: values with observedness masks, missingness
//! mechanisms, CSV ingestion, encoder input construction, and
//! standardization of the observed entries.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension likelihood tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    Binary,
}

/// Rows of values plus binary observedness masks (1 = observed).
///
/// Missing positions hold a sentinel 0.0 whose value is semantically
/// undefined; consumers must consult the mask, never the sentinel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IncompleteDataset {
    pub values: Array2<f64>,
    pub masks: Array2<u8>,
    pub feature_kinds: Vec<FeatureKind>,
}

/// Record of the affine standardization applied to observed entries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StandardizeRecord {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl IncompleteDataset {
    pub fn new(values: Array2<f64>, masks: Array2<u8>, feature_kinds: Vec<FeatureKind>) -> Result<Self> {
        Self::with_options(values, masks, feature_kinds, false)
    }

    pub fn with_options(
        values: Array2<f64>,
        masks: Array2<u8>,
        feature_kinds: Vec<FeatureKind>,
        allow_empty_rows: bool,
    ) -> Result<Self> {
        if values.raw_dim() != masks.raw_dim() {
            return Err(Error::parameter("values and masks must share shape"));
        }
        if feature_kinds.len() != values.ncols() {
            return Err(Error::parameter("feature_kinds length must equal D"));
        }
        for (i, row) in masks.rows().into_iter().enumerate() {
            if row.iter().any(|&m| m > 1) {
                return Err(Error::parameter(format!("mask row {i} has entries outside {{0,1}}")));
            }
            if !allow_empty_rows && row.iter().all(|&m| m == 0) {
                return Err(Error::parameter(format!("row {i} has no observed entries")));
            }
        }
        for ((i, j), &v) in values.indexed_iter() {
            if masks[[i, j]] == 1 && !v.is_finite() {
                return Err(Error::parameter(format!(
                    "observed value at ({i}, {j}) is not finite"
                )));
            }
        }
        // Zero the sentinel at missing positions so downstream code never
        // observes stale values.
        let mut values = values;
        for ((i, j), m) in masks.indexed_iter() {
            if *m == 0 {
                values[[i, j]] = 0.0;
            }
        }
        Ok(IncompleteDataset { values, masks, feature_kinds })
    }

    /// Fully observed dataset of continuous features.
    pub fn complete(values: Array2<f64>) -> Result<Self> {
        let masks = Array2::ones(values.raw_dim());
        let kinds = vec![FeatureKind::Continuous; values.ncols()];
        Self::new(values, masks, kinds)
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_values(&self, i: usize) -> Array1<f64> {
        self.values.row(i).to_owned()
    }

    pub fn row_mask(&self, i: usize) -> Vec<u8> {
        self.masks.row(i).to_vec()
    }

    /// Masks as 0.0/1.0 floats (decoder likelihood weighting).
    pub fn masks_f64(&self) -> Array2<f64> {
        self.masks.mapv(f64::from)
    }

    pub fn observed_fraction(&self) -> f64 {
        let total = self.masks.len() as f64;
        let obs: f64 = self.masks.iter().map(|&m| f64::from(m)).sum();
        obs / total
    }

    /// Rows at the given indices as a new dataset (used for minibatching).
    pub fn subset(&self, rows: &[usize]) -> IncompleteDataset {
        let d = self.dim();
        let mut values = Array2::zeros((rows.len(), d));
        let mut masks = Array2::zeros((rows.len(), d));
        for (out, &src) in rows.iter().enumerate() {
            values.row_mut(out).assign(&self.values.row(src));
            masks.row_mut(out).assign(&self.masks.row(src));
        }
        IncompleteDataset { values, masks, feature_kinds: self.feature_kinds.clone() }
    }
}

/// Mask each entry independently with probability `rate`. Rows left with no
/// observed entries are re-drawn so N stays fixed.
pub fn apply_uniform_mcar(
    data: &Array2<f64>,
    rate: f64,
    rng: &mut ChaCha8Rng,
) -> Result<IncompleteDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::parameter(format!("MCAR rate {rate} must lie in [0, 1)")));
    }
    let (n, d) = (data.nrows(), data.ncols());
    let mut masks = Array2::<u8>::zeros((n, d));
    for i in 0..n {
        loop {
            let mut any = false;
            for j in 0..d {
                let keep = rng.random_range(0.0..1.0) >= rate;
                masks[[i, j]] = u8::from(keep);
                any |= keep;
            }
            if any {
                break;
            }
        }
    }
    IncompleteDataset::new(data.clone(), masks, vec![FeatureKind::Continuous; d])
}

/// Mask exactly 2 of the 4 image quadrants, chosen uniformly per image.
/// Images are rows of length H*W in row-major pixel order.
pub fn apply_quadrant_missingness(
    images: &Array2<f64>,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<IncompleteDataset> {
    if height % 2 != 0 || width % 2 != 0 {
        return Err(Error::parameter("quadrant missingness requires even H and W"));
    }
    if images.ncols() != height * width {
        return Err(Error::parameter("image row length must equal H*W"));
    }
    let n = images.nrows();
    let mut masks = Array2::<u8>::ones((n, height * width));
    // The 6 unordered pairs of 4 quadrants (TL=0, TR=1, BL=2, BR=3).
    const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
    for i in 0..n {
        let pair = PAIRS[rng.random_range(0..6)];
        for q in [pair.0, pair.1] {
            let r0 = if q >= 2 { height / 2 } else { 0 };
            let c0 = if q % 2 == 1 { width / 2 } else { 0 };
            for r in r0..r0 + height / 2 {
                for c in c0..c0 + width / 2 {
                    masks[[i, r * width + c]] = 0;
                }
            }
        }
    }
    IncompleteDataset::new(images.clone(), masks, vec![FeatureKind::Binary; height * width])
}

/// Parse a rectangular CSV of numbers; empty cells or `missing_token`
/// become missing entries.
pub fn load_csv(path: &Path, missing_token: &str) -> Result<IncompleteDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)?;
    let mut rows: Vec<Vec<(f64, u8)>> = Vec::new();
    let mut width: Option<usize> = None;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if let Some(w) = width {
            if record.len() != w {
                return Err(Error::Ingestion {
                    row: i,
                    col: record.len(),
                    msg: format!("ragged row: found {} cells, expected {w}", record.len()),
                });
            }
        } else {
            width = Some(record.len());
        }
        let mut row = Vec::with_capacity(record.len());
        for (j, cell) in record.iter().enumerate() {
            if cell.is_empty() || cell == missing_token {
                row.push((0.0, 0));
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Ingestion {
                    row: i,
                    col: j,
                    msg: format!("cannot parse {cell:?} as a number"),
                })?;
                row.push((v, 1));
            }
        }
        rows.push(row);
    }
    let n = rows.len();
    let d = width.unwrap_or(0);
    if n == 0 || d == 0 {
        return Err(Error::parameter("load_csv: empty file"));
    }
    let mut values = Array2::zeros((n, d));
    let mut masks = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, &(v, m)) in row.iter().enumerate() {
            values[[i, j]] = v;
            masks[[i, j]] = m;
        }
    }
    IncompleteDataset::new(values, masks, vec![FeatureKind::Continuous; d])
}

/// Write values as CSV with empty cells at missing positions.
pub fn write_csv(data: &IncompleteDataset, path: &Path) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for i in 0..data.n_rows() {
        let record: Vec<String> = (0..data.dim())
            .map(|j| {
                if data.masks[[i, j]] == 1 {
                    format!("{}", data.values[[i, j]])
                } else {
                    String::new()
                }
            })
            .collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Encoder input for one row: observed values with missing positions zeroed,
/// concatenated with the mask. Output length 2D.
pub fn zero_mask_encode(values: &Array1<f64>, mask: &[u8]) -> Result<Array1<f64>> {
    if values.len() != mask.len() {
        return Err(Error::parameter("zero_mask_encode: length mismatch"));
    }
    let d = values.len();
    let mut out = Array1::zeros(2 * d);
    for j in 0..d {
        out[j] = if mask[j] == 1 { values[j] } else { 0.0 };
        out[d + j] = f64::from(mask[j]);
    }
    Ok(out)
}

/// Batched encoder input, one row per dataset row.
pub fn zero_mask_encode_batch(values: &Array2<f64>, masks: &Array2<u8>) -> Array2<f64> {
    let (n, d) = (values.nrows(), values.ncols());
    let mut out = Array2::zeros((n, 2 * d));
    for i in 0..n {
        for j in 0..d {
            let m = masks[[i, j]];
            out[[i, j]] = if m == 1 { values[[i, j]] } else { 0.0 };
            out[[i, d + j]] = f64::from(m);
        }
    }
    out
}

/// Standardize observed entries per dimension; returns the transformed
/// dataset and the record needed to invert the transform.
pub fn standardize_observed(
    data: &IncompleteDataset,
) -> Result<(IncompleteDataset, StandardizeRecord)> {
    let (n, d) = (data.n_rows(), data.dim());
    let mut means = vec![0.0; d];
    let mut stds = vec![0.0; d];
    for j in 0..d {
        let obs: Vec<f64> = (0..n)
            .filter(|&i| data.masks[[i, j]] == 1)
            .map(|i| data.values[[i, j]])
            .collect();
        if obs.len() < 2 {
            return Err(Error::parameter(format!(
                "column {j} has {} observed entries, need >= 2",
                obs.len()
            )));
        }
        let m = crate::stats::mean(&obs);
        let s = crate::stats::std_dev(&obs);
        if s < 1e-12 {
            return Err(Error::parameter(format!("column {j} is constant on observed entries")));
        }
        means[j] = m;
        stds[j] = s;
    }
    let mut values = data.values.clone();
    for i in 0..n {
        for j in 0..d {
            if data.masks[[i, j]] == 1 {
                values[[i, j]] = (values[[i, j]] - means[j]) / stds[j];
            }
        }
    }
    let out =
        IncompleteDataset::with_options(values, data.masks.clone(), data.feature_kinds.clone(), true)?;
    Ok((out, StandardizeRecord { means, stds }))
}

/// Invert [`standardize_observed`] on the observed entries.
pub fn unstandardize(data: &IncompleteDataset, record: &StandardizeRecord) -> IncompleteDataset {
    let mut values = data.values.clone();
    for ((i, j), m) in data.masks.indexed_iter() {
        if *m == 1 {
            values[[i, j]] = values[[i, j]] * record.stds[j] + record.means[j];
        }
    }
    IncompleteDataset {
        values,
        masks: data.masks.clone(),
        feature_kinds: data.feature_kinds.clone(),
    }
}

/// Metadata stored with a dataset bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleMeta {
    pub feature_kinds: Vec<FeatureKind>,
    pub standardization: Option<StandardizeRecord>,
    pub provenance: serde_json::Value,
}

/// Write a dataset bundle directory: values.csv, masks.csv, meta.json.
pub fn save_bundle(
    dir: &Path,
    data: &IncompleteDataset,
    standardization: Option<&StandardizeRecord>,
    provenance: serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(data, &dir.join("values.csv"))?;
    let mut writer =
        csv::WriterBuilder::new().has_headers(false).from_path(dir.join("masks.csv"))?;
    for row in data.masks.rows() {
        let record: Vec<String> = row.iter().map(|m| m.to_string()).collect();
        writer.write_record(&record)?;
    }
    writer.flush()?;
    let meta = BundleMeta {
        feature_kinds: data.feature_kinds.clone(),
        standardization: standardization.cloned(),
        provenance,
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Load a dataset bundle directory written by [`save_bundle`].
pub fn load_bundle(dir: &Path) -> Result<(IncompleteDataset, BundleMeta)> {
    let meta: BundleMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let raw = load_csv(&dir.join("values.csv"), "")?;
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).from_path(dir.join("masks.csv"))?;
    let mut mask_rows: Vec<Vec<u8>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        mask_rows.push(
            record
                .iter()
                .map(|c| c.parse::<u8>().map_err(|_| Error::parameter("bad mask cell")))
                .collect::<Result<Vec<u8>>>()?,
        );
    }
    let n = mask_rows.len();
    let d = mask_rows.first().map(|r| r.len()).unwrap_or(0);
    let mut masks = Array2::zeros((n, d));
    for (i, row) in mask_rows.iter().enumerate() {
        for (j, &m) in row.iter().enumerate() {
            masks[[i, j]] = m;
        }
    }
    let data = IncompleteDataset::with_options(raw.values, masks, meta.feature_kinds.clone(), true)?;
    Ok((data, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};
    use ndarray::arr2;

    #[test]
    fn mcar_rate_zero_keeps_everything() {
        let data = Array2::from_elem((10, 4), 1.5);
        let mut rng = stream_rng(0, Stream::Mask);
        let ds = apply_uniform_mcar(&data, 0.0, &mut rng).unwrap();
        assert!(ds.masks.iter().all(|&m| m == 1));
    }

    #[test]
    fn mcar_rejects_rate_one() {
        let data = Array2::from_elem((2, 2), 0.0);
        let mut rng = stream_rng(0, Stream::Mask);
        assert!(apply_uniform_mcar(&data, 1.0, &mut rng).is_err());
    }

    #[test]
    fn mcar_observed_fraction_matches_rate() {
        // N*D = 1e6 at rate 0.2: observed fraction within a binomial CI.
        let data = Array2::zeros((10_000, 100));
        let mut rng = stream_rng(1, Stream::Mask);
        let ds = apply_uniform_mcar(&data, 0.2, &mut rng).unwrap();
        let frac = ds.observed_fraction();
        assert!((frac - 0.8).abs() < 0.002, "observed fraction {frac}");
    }

    #[test]
    fn mcar_every_row_has_observed_entry() {
        let data = Array2::zeros((500, 2));
        let mut rng = stream_rng(2, Stream::Mask);
        let ds = apply_uniform_mcar(&data, 0.8, &mut rng).unwrap();
        for row in ds.masks.rows() {
            assert!(row.iter().any(|&m| m == 1));
        }
    }

    #[test]
    fn mcar_masks_independent_of_values() {
        // MCAR: correlation between mask and value across entries is
        // statistically zero on MoG data.
        let params = crate::mog::generate_mog(1, 5, 15).unwrap();
        let mut rng = stream_rng(3, Stream::DataGen);
        let xs = crate::mog::mog_sample(&params, 4000, &mut rng).unwrap();
        let mut mrng = stream_rng(4, Stream::Mask);
        let ds = apply_uniform_mcar(&xs, 0.5, &mut mrng).unwrap();
        let n = (ds.n_rows() * ds.dim()) as f64;
        let vals: Vec<f64> = xs.iter().cloned().collect();
        let ms: Vec<f64> = ds.masks.iter().map(|&m| f64::from(m)).collect();
        let mv = crate::stats::mean(&vals);
        let mm = crate::stats::mean(&ms);
        let cov: f64 = vals.iter().zip(&ms).map(|(v, m)| (v - mv) * (m - mm)).sum::<f64>() / n;
        let r = cov / (crate::stats::std_dev(&vals) * crate::stats::std_dev(&ms));
        // Fisher z at level 0.01: |r| < 2.576 / sqrt(n - 3).
        assert!(r.abs() < 2.576 / (n - 3.0).sqrt(), "correlation {r}");
    }

    #[test]
    fn quadrants_mask_exactly_half() {
        let images = Array2::zeros((40, 28 * 28));
        let mut rng = stream_rng(5, Stream::Mask);
        let ds = apply_quadrant_missingness(&images, 28, 28, &mut rng).unwrap();
        for row in ds.masks.rows() {
            let missing = row.iter().filter(|&&m| m == 0).count();
            assert_eq!(missing, 28 * 28 / 2);
        }
        assert!(ds.feature_kinds.iter().all(|k| *k == FeatureKind::Binary));
    }

    #[test]
    fn quadrants_require_even_dims() {
        let images = Array2::zeros((1, 15));
        let mut rng = stream_rng(5, Stream::Mask);
        assert!(apply_quadrant_missingness(&images, 3, 5, &mut rng).is_err());
    }

    #[test]
    fn quadrant_pairs_uniform_chi2() {
        let h = 4;
        let w = 4;
        let images = Array2::zeros((6000, h * w));
        let mut rng = stream_rng(6, Stream::Mask);
        let ds = apply_quadrant_missingness(&images, h, w, &mut rng).unwrap();
        // Identify the masked pair per image by its quadrant corners.
        let corners = [(0usize, 0usize), (0, w / 2), (h / 2, 0), (h / 2, w / 2)];
        let mut counts = [0usize; 6];
        const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];
        for i in 0..ds.n_rows() {
            let missing: Vec<usize> = corners
                .iter()
                .enumerate()
                .filter(|(_, rc)| ds.masks[[i, rc.0 * w + rc.1]] == 0)
                .map(|(q, _)| q)
                .collect();
            let pair = (missing[0], missing[1]);
            let idx = PAIRS.iter().position(|&p| p == pair).unwrap();
            counts[idx] += 1;
        }
        let expected = vec![1000.0; 6];
        let chi2 = crate::stats::chi2_statistic(&counts, &expected);
        assert!(chi2 < 15.086, "chi2 = {chi2}"); // df = 5, level 0.01
    }

    #[test]
    fn csv_parse_missing_cells() {
        let dir = tempdir();
        let path = dir.join("t.csv");
        std::fs::write(&path, "1.5,,2.0\n0.1,0.2,0.3\n,,9.0\n").unwrap();
        let ds = load_csv(&path, "NA").unwrap();
        assert_eq!(ds.values[[0, 0]], 1.5);
        assert_eq!(ds.masks[[0, 1]], 0);
        assert_eq!(ds.masks[[0, 2]], 1);
        let total: u32 = ds.masks.iter().map(|&m| u32::from(m)).sum();
        assert_eq!(total, 6);

        // 3 rows x 2 cols with one missing cell.
        let path2 = dir.join("t2.csv");
        std::fs::write(&path2, "1.0,2.0\n3.0,\n5.0,6.0\n").unwrap();
        let ds2 = load_csv(&path2, "NA").unwrap();
        let total2: u32 = ds2.masks.iter().map(|&m| u32::from(m)).sum();
        assert_eq!(total2, 5);
    }

    #[test]
    fn csv_missing_token() {
        let dir = tempdir();
        let path = dir.join("t.csv");
        std::fs::write(&path, "1.0,NA\nNA,2.0\n").unwrap();
        let ds = load_csv(&path, "NA").unwrap();
        assert_eq!(ds.masks, arr2(&[[1, 0], [0, 1]]));
    }

    #[test]
    fn csv_errors_carry_location() {
        let dir = tempdir();
        let bad_cell = dir.join("bad.csv");
        std::fs::write(&bad_cell, "1.0,2.0\n1.0,abc\n").unwrap();
        match load_csv(&bad_cell, "NA") {
            Err(Error::Ingestion { row, col, .. }) => {
                assert_eq!((row, col), (1, 1));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
        let ragged = dir.join("ragged.csv");
        std::fs::write(&ragged, "1.0,2.0\n1.0\n").unwrap();
        assert!(matches!(load_csv(&ragged, "NA"), Err(Error::Ingestion { row: 1, .. })));
    }

    #[test]
    fn csv_round_trip_fully_observed() {
        let dir = tempdir();
        let ds = IncompleteDataset::complete(arr2(&[[1.0, -2.5], [0.25, 3.75]])).unwrap();
        let path = dir.join("rt.csv");
        write_csv(&ds, &path).unwrap();
        let back = load_csv(&path, "NA").unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.masks, ds.masks);
    }

    #[test]
    fn zero_mask_encode_examples() {
        let v = ndarray::arr1(&[1.5, 9.9]);
        let out = zero_mask_encode(&v, &[1, 0]).unwrap();
        assert_eq!(out.to_vec(), vec![1.5, 0.0, 1.0, 0.0]);
        let full = zero_mask_encode(&v, &[1, 1]).unwrap();
        assert_eq!(full.to_vec(), vec![1.5, 9.9, 1.0, 1.0]);
        let none = zero_mask_encode(&v, &[0, 0]).unwrap();
        assert_eq!(none.to_vec(), vec![0.0, 0.0, 0.0, 0.0]);
        assert!(zero_mask_encode(&v, &[1]).is_err());
    }

    proptest::proptest! {
        /// Injectivity: distinct (observed values, mask) pairs encode differently.
        #[test]
        fn zero_mask_encode_injective(
            a in proptest::collection::vec(-10.0f64..10.0, 4),
            b in proptest::collection::vec(-10.0f64..10.0, 4),
            ma in proptest::collection::vec(0u8..2, 4),
            mb in proptest::collection::vec(0u8..2, 4),
        ) {
            let va = Array1::from_vec(a);
            let vb = Array1::from_vec(b);
            let ea = zero_mask_encode(&va, &ma).unwrap();
            let eb = zero_mask_encode(&vb, &mb).unwrap();
            // Compare as (observed entries, mask) pairs.
            let same_input = ma == mb
                && (0..4).all(|j| ma[j] == 0 || va[j] == vb[j]);
            if !same_input {
                proptest::prop_assert_ne!(ea.to_vec(), eb.to_vec());
            } else {
                proptest::prop_assert_eq!(ea.to_vec(), eb.to_vec());
            }
        }
    }

    #[test]
    fn standardize_round_trip() {
        let values = arr2(&[[1.0, 10.0], [2.0, 30.0], [3.0, 0.0], [4.0, 20.0]]);
        let masks = arr2(&[[1, 1], [1, 1], [1, 0], [1, 1]]);
        let ds =
            IncompleteDataset::new(values.clone(), masks, vec![FeatureKind::Continuous; 2]).unwrap();
        let (std_ds, rec) = standardize_observed(&ds).unwrap();
        // Observed mean 0 per dim.
        for j in 0..2 {
            let obs: Vec<f64> = (0..4)
                .filter(|&i| std_ds.masks[[i, j]] == 1)
                .map(|i| std_ds.values[[i, j]])
                .collect();
            assert!(crate::stats::mean(&obs).abs() < 1e-9);
        }
        let back = unstandardize(&std_ds, &rec);
        for ((i, j), &m) in ds.masks.indexed_iter() {
            if m == 1 {
                assert!((back.values[[i, j]] - values[[i, j]]).abs() < 1e-9);
            }
        }
        // Standardizing twice is a no-op on already standardized data.
        let (again, _) = standardize_observed(&std_ds).unwrap();
        for (a, b) in again.values.iter().zip(std_ds.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn standardize_rejects_constant_column() {
        let values = arr2(&[[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]]);
        let ds = IncompleteDataset::complete(values).unwrap();
        match standardize_observed(&ds) {
            Err(Error::Parameter(msg)) => assert!(msg.contains("column 1"), "{msg}"),
            other => panic!("expected parameter error, got {other:?}"),
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempdir();
        let values = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let masks = arr2(&[[1, 0], [1, 1]]);
        let ds = IncompleteDataset::new(values, masks, vec![FeatureKind::Continuous; 2]).unwrap();
        let bundle = dir.join("bundle");
        save_bundle(&bundle, &ds, None, serde_json::json!({"generator": "test"})).unwrap();
        let (back, meta) = load_bundle(&bundle).unwrap();
        assert_eq!(back.values, ds.values);
        assert_eq!(back.masks, ds.masks);
        assert_eq!(meta.provenance["generator"], "test");
    }

    fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "mixvae-data-test-{}-{}",
            std::process::id(),
            std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).unwrap().as_nanos()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
