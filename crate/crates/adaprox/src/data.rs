//! Datasets for finite-sum problems: sparse feature matrices with binary
//! labels, LIBSVM-format I/O (plain or gzipped), and deterministic
//! transformations (subsampling, feature scaling, synthetic generation).

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::Error;
use crate::vector::DenseVector;
use crate::Result;

/// Compressed sparse row matrix; feature indices are 0-based internally.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn from_rows(n_cols: usize, rows: &[Vec<(u32, f64)>]) -> Result<Self> {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in rows {
            for &(idx, val) in row {
                if idx as usize >= n_cols {
                    return Err(Error::invalid(format!(
                        "column index {idx} out of range for {n_cols} columns"
                    )));
                }
                indices.push(idx);
                values.push(val);
            }
            indptr.push(indices.len());
        }
        Ok(SparseMatrix {
            n_rows: rows.len(),
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let lo = self.indptr[i];
        let hi = self.indptr[i + 1];
        (&self.indices[lo..hi], &self.values[lo..hi])
    }

    /// Sparse dot of row `i` with a dense vector.
    pub fn row_dot(&self, i: usize, x: &DenseVector) -> f64 {
        let (idx, val) = self.row(i);
        idx.iter()
            .zip(val)
            .map(|(&j, &v)| v * x[j as usize])
            .sum()
    }

    /// `out += c * row_i`
    pub fn row_add_scaled(&self, i: usize, c: f64, out: &mut DenseVector) {
        let (idx, val) = self.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            out[j as usize] += c * v;
        }
    }
}

/// A labeled sparse dataset with labels in `{-1, +1}`.
#[derive(Clone, Debug)]
pub struct Dataset {
    matrix: SparseMatrix,
    labels: Vec<f64>,
    pub name: String,
    /// SHA-256 of the source bytes (file contents, or canonical encoding for
    /// synthetic data). Identical sources yield identical checksums.
    pub source_checksum: String,
    /// Human-readable trail of every transformation applied since load.
    pub provenance: Vec<String>,
}

impl Dataset {
    pub fn new(
        matrix: SparseMatrix,
        labels: Vec<f64>,
        name: impl Into<String>,
        source_checksum: String,
    ) -> Result<Self> {
        if matrix.n_rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: matrix.n_rows(),
                got: labels.len(),
            });
        }
        if matrix.n_rows() == 0 {
            return Err(Error::invalid("dataset must contain at least one row"));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(Error::invalid("labels must be -1 or +1"));
        }
        Ok(Dataset {
            matrix,
            labels,
            name: name.into(),
            source_checksum,
            provenance: Vec::new(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.matrix.n_rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.n_cols()
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }
}

/// How raw labels are mapped into `{-1, +1}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMap {
    /// `{0, -1, 2} -> -1`, `{1, +1} -> +1`. One rule covers the three common
    /// LIBSVM binary conventions — `{-1,+1}`, `{0,1}`, and 1/2-coded sets
    /// (where 2 is the second class) — because the class coded `1` is
    /// positive in all of them.
    Binary,
    /// Digit labels `0..=4 -> -1`, `5..=9 -> +1`.
    MnistDigits,
}

impl LabelMap {
    fn apply(&self, raw: f64) -> Option<f64> {
        match self {
            LabelMap::Binary => match raw {
                r if r == 0.0 || r == -1.0 || r == 2.0 => Some(-1.0),
                r if r == 1.0 => Some(1.0),
                _ => None,
            },
            LabelMap::MnistDigits => {
                if raw.fract() != 0.0 {
                    return None;
                }
                match raw as i64 {
                    0..=4 => Some(-1.0),
                    5..=9 => Some(1.0),
                    _ => None,
                }
            }
        }
    }

    fn supported(&self) -> &'static str {
        match self {
            LabelMap::Binary => "{0, -1, 2} -> -1; {1, +1} -> +1",
            LabelMap::MnistDigits => "digits 0-4 -> -1; 5-9 -> +1",
        }
    }
}

/// Reads a LIBSVM-format file (gzipped when the path ends in `.gz`) with the
/// default binary label map.
///
/// When `expected_dim` is given it becomes the feature dimension and any
/// index beyond it is an error; otherwise the dimension is the largest index
/// seen. Indices are 1-based in the file and must be strictly increasing
/// within each line.
pub fn read_libsvm(path: impl AsRef<Path>, expected_dim: Option<usize>) -> Result<Dataset> {
    read_libsvm_with(path, expected_dim, LabelMap::Binary)
}

pub fn read_libsvm_with(
    path: impl AsRef<Path>,
    expected_dim: Option<usize>,
    label_map: LabelMap,
) -> Result<Dataset> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let raw = std::fs::read(path).map_err(|e| Error::io(&display, e))?;
    let checksum = sha256_hex(&raw);

    let text: Box<dyn BufRead> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(BufReader::new(flate2::read::GzDecoder::new(&raw[..])))
    } else {
        Box::new(BufReader::new(&raw[..]))
    };

    let mut rows: Vec<Vec<(u32, f64)>> = Vec::new();
    let mut raw_labels: Vec<f64> = Vec::new();
    let mut max_idx: u32 = 0;
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_ascii_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a first token");
        let raw_label: f64 = label_tok.parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: lineno,
            message: format!("cannot parse label {label_tok:?}"),
        })?;
        let mut row: Vec<(u32, f64)> = Vec::new();
        let mut prev_idx: u32 = 0;
        for tok in tokens {
            let (idx_str, val_str) = tok.split_once(':').ok_or_else(|| Error::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("expected index:value, got {tok:?}"),
            })?;
            let idx: u32 = idx_str.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("cannot parse feature index {idx_str:?}"),
            })?;
            let val: f64 = val_str.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                message: format!("cannot parse feature value {val_str:?}"),
            })?;
            if idx == 0 {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    message: "feature indices are 1-based; found index 0".into(),
                });
            }
            if idx <= prev_idx {
                return Err(Error::Parse {
                    path: display.clone(),
                    line: lineno,
                    message: format!(
                        "feature indices must be strictly increasing; {idx} follows {prev_idx}"
                    ),
                });
            }
            prev_idx = idx;
            max_idx = max_idx.max(idx);
            row.push((idx - 1, val));
        }
        raw_labels.push(raw_label);
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::invalid(format!("{display}: no samples found")));
    }
    let dim = match expected_dim {
        Some(d) => {
            if max_idx as usize > d {
                return Err(Error::invalid(format!(
                    "{display}: feature index {max_idx} exceeds expected dimension {d}"
                )));
            }
            d
        }
        None => max_idx as usize,
    };

    let mut labels = Vec::with_capacity(raw_labels.len());
    let mut bad: Vec<String> = Vec::new();
    for &raw in &raw_labels {
        match label_map.apply(raw) {
            Some(mapped) => labels.push(mapped),
            None => {
                let s = format!("{raw}");
                if !bad.contains(&s) {
                    bad.push(s);
                }
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::UnsupportedLabels {
            path: display,
            labels: bad,
            supported: label_map.supported().into(),
        });
    }

    let matrix = SparseMatrix::from_rows(dim, &rows)?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| display.clone());
    let mut ds = Dataset::new(matrix, labels, name, checksum)?;
    ds.provenance.push(format!(
        "read {display} (N={}, d={})",
        ds.n_rows(),
        ds.dim()
    ));
    Ok(ds)
}

/// Writes a dataset in LIBSVM format (1-based indices, labels `+1`/`-1`).
pub fn write_libsvm(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let mut out = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(&display, e))?);
    for i in 0..ds.n_rows() {
        let label = if ds.label(i) > 0.0 { "+1" } else { "-1" };
        write!(out, "{label}").map_err(|e| Error::io(&display, e))?;
        let (idx, val) = ds.matrix.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            write!(out, " {}:{}", j + 1, v).map_err(|e| Error::io(&display, e))?;
        }
        writeln!(out).map_err(|e| Error::io(&display, e))?;
    }
    out.flush().map_err(|e| Error::io(&display, e))
}

/// Keeps `n` rows chosen uniformly without replacement, in their original
/// order. Deterministic in `seed`.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.n_rows() {
        return Err(Error::invalid(format!(
            "subsample size {n} out of range 1..={}",
            ds.n_rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = rand::seq::index::sample(&mut rng, ds.n_rows(), n).into_vec();
    chosen.sort_unstable();
    let rows: Vec<Vec<(u32, f64)>> = chosen
        .iter()
        .map(|&i| {
            let (idx, val) = ds.matrix.row(i);
            idx.iter().copied().zip(val.iter().copied()).collect()
        })
        .collect();
    let labels: Vec<f64> = chosen.iter().map(|&i| ds.label(i)).collect();
    let matrix = SparseMatrix::from_rows(ds.dim(), &rows)?;
    let mut out = Dataset::new(matrix, labels, ds.name.clone(), ds.source_checksum.clone())?;
    out.provenance = ds.provenance.clone();
    out.provenance.push(format!("subsample n={n} seed={seed}"));
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleMode {
    None,
    /// Divide every column by its maximum absolute value (zero columns are
    /// left untouched).
    MaxAbs,
}

pub fn scale_features(ds: &Dataset, mode: ScaleMode) -> Result<Dataset> {
    if mode == ScaleMode::None {
        return Ok(ds.clone());
    }
    let mut col_max = vec![0.0f64; ds.dim()];
    for i in 0..ds.n_rows() {
        let (idx, val) = ds.matrix.row(i);
        for (&j, &v) in idx.iter().zip(val) {
            col_max[j as usize] = col_max[j as usize].max(v.abs());
        }
    }
    let rows: Vec<Vec<(u32, f64)>> = (0..ds.n_rows())
        .map(|i| {
            let (idx, val) = ds.matrix.row(i);
            idx.iter()
                .zip(val)
                .map(|(&j, &v)| {
                    let m = col_max[j as usize];
                    (j, if m > 0.0 { v / m } else { v })
                })
                .collect()
        })
        .collect();
    let matrix = SparseMatrix::from_rows(ds.dim(), &rows)?;
    let mut out = Dataset::new(
        matrix,
        ds.labels.clone(),
        ds.name.clone(),
        ds.source_checksum.clone(),
    )?;
    out.provenance = ds.provenance.clone();
    out.provenance.push("scale max-abs per column".into());
    Ok(out)
}

/// Deterministic synthetic one-hot classification data.
///
/// Each row activates exactly one feature per group (mimicking one-hot
/// encoded categorical data). A few small *decisive* groups determine the
/// label: their categories split into a positive and a negative camp, rows
/// are redrawn until every decisive pick lands in the same camp, and the
/// label is that camp's sign. The remaining *nuisance* groups carry no
/// label signal at all — their picks rotate per class, so every nuisance
/// category is used by both classes in equal shares. This mirrors the
/// properties that make real categorical benchmark sets easy for an
/// l1-regularized classifier: the label is decided by a handful of
/// attributes (the optimum is supported on those columns alone, and
/// per-sample gradients stay aligned with the mean), and every row clears
/// the same wide margin (the logistic curvature collapses in unison near
/// the optimum instead of being pinned by a few near-zero-margin rows).
/// Without either property the optimization tail stretches by orders of
/// magnitude. Useful as an offline stand-in for such benchmark sets.
pub fn synthetic_onehot(n_rows: usize, group_sizes: &[usize], seed: u64) -> Result<Dataset> {
    if n_rows == 0 || group_sizes.is_empty() || group_sizes.iter().any(|&g| g == 0) {
        return Err(Error::invalid(
            "synthetic data needs n_rows >= 1 and nonempty groups",
        ));
    }
    let dim: usize = group_sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Decisive groups: the tier of groups sharing the most common size
    // (ties toward the smaller size), extended with the smallest remaining
    // groups when that tier has fewer than two members. A tier of equal
    // sized groups keeps the per-category usage - and with it the whole
    // optimization geometry - uniform across the decisive columns.
    let mut size_counts: Vec<(usize, usize)> = Vec::new();
    for &g in group_sizes {
        match size_counts.iter_mut().find(|(size, _)| *size == g) {
            Some((_, n)) => *n += 1,
            None => size_counts.push((g, 1)),
        }
    }
    let modal = size_counts
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|&(size, _)| size)
        .unwrap_or(1);
    let mut decisive: Vec<bool> = group_sizes.iter().map(|&g| g == modal).collect();
    let mut have = decisive.iter().filter(|&&d| d).count();
    if have < 2 {
        let mut order: Vec<usize> = (0..group_sizes.len())
            .filter(|&g| !decisive[g])
            .collect();
        order.sort_by_key(|&g| (group_sizes[g], g));
        for &g in &order {
            if have >= 2 {
                break;
            }
            decisive[g] = true;
            have += 1;
        }
    }
    // Camp of each decisive category: alternating behind a per-group random
    // flip, so both camps are represented in every decisive group of size
    // at least two.
    let mut camp: Vec<f64> = vec![0.0; dim];
    let mut offsets: Vec<u32> = Vec::with_capacity(group_sizes.len());
    let mut offset = 0u32;
    for (group, &g) in group_sizes.iter().enumerate() {
        offsets.push(offset);
        if decisive[group] {
            let flip = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
            for j in 0..g {
                camp[offset as usize + j] = if j % 2 == 0 { flip } else { -flip };
            }
        }
        offset += g as u32;
    }
    let mut rows: Vec<Vec<(u32, f64)>> = Vec::with_capacity(n_rows);
    let mut labels = Vec::with_capacity(n_rows);
    // Per-class rotation counters for nuisance picks.
    let mut rotation = vec![[0usize; 2]; group_sizes.len()];
    for _ in 0..n_rows {
        // Redraw the decisive picks until they agree on a camp. Layouts
        // that cannot agree (a size-one decisive group stuck in the wrong
        // camp) keep the last draw after a bounded number of attempts.
        let mut picks: Vec<u32> = Vec::new();
        let mut label = 1.0;
        for _ in 0..1_000 {
            picks.clear();
            label = 0.0;
            let mut unanimous = true;
            for (group, &g) in group_sizes.iter().enumerate() {
                if !decisive[group] {
                    continue;
                }
                let feat = offsets[group] + rng.random_range(0..g) as u32;
                picks.push(feat);
                let vote = camp[feat as usize];
                if label == 0.0 {
                    label = vote;
                } else if vote != label {
                    unanimous = false;
                }
            }
            if unanimous {
                break;
            }
        }
        let class = usize::from(label >= 0.0);
        let mut row: Vec<(u32, f64)> = Vec::with_capacity(group_sizes.len());
        let mut next_pick = picks.iter();
        for (group, &g) in group_sizes.iter().enumerate() {
            let feat = if decisive[group] {
                *next_pick.next().expect("one pick per decisive group")
            } else {
                let turn = rotation[group][class];
                rotation[group][class] += 1;
                offsets[group] + (turn % g) as u32
            };
            row.push((feat, 1.0));
        }
        rows.push(row);
        labels.push(if label >= 0.0 { 1.0 } else { -1.0 });
    }
    let matrix = SparseMatrix::from_rows(dim, &rows)?;
    // Checksum over a canonical byte encoding so identical parameters give
    // identical checksums.
    let mut hasher = Sha256::new();
    hasher.update(n_rows.to_le_bytes());
    hasher.update(seed.to_le_bytes());
    for &g in group_sizes {
        hasher.update(g.to_le_bytes());
    }
    let checksum = format!("{:x}", hasher.finalize());
    let mut ds = Dataset::new(
        matrix,
        labels,
        format!("synthetic-onehot-{n_rows}x{dim}"),
        checksum,
    )?;
    ds.provenance.push(format!(
        "synthetic one-hot N={n_rows}, d={dim}, groups={}, seed={seed}",
        group_sizes.len()
    ));
    Ok(ds)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn reads_basic_libsvm() {
        let f = write_temp("+1 1:0.5 3:2\n-1 2:1\n");
        let ds = read_libsvm(f.path(), None).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.dim(), 3);
        assert_eq!(ds.labels(), &[1.0, -1.0]);
        let (idx, val) = ds.matrix().row(0);
        assert_eq!(idx, &[0, 2]);
        assert_eq!(val, &[0.5, 2.0]);
    }

    #[test]
    fn maps_zero_one_and_two_labels() {
        let f = write_temp("0 1:1\n1 1:2\n2 1:3\n");
        let ds = read_libsvm(f.path(), None).unwrap();
        assert_eq!(ds.labels(), &[-1.0, 1.0, -1.0]);
        // A 1/2-coded file keeps both classes.
        let g = write_temp("1 1:1\n2 1:1\n1 2:1\n");
        let two = read_libsvm(g.path(), None).unwrap();
        assert_eq!(two.labels(), &[1.0, -1.0, 1.0]);
    }

    #[test]
    fn mnist_label_map_splits_digits() {
        let f = write_temp("3 1:1\n7 1:1\n0 1:1\n9 1:1\n");
        let ds = read_libsvm_with(f.path(), None, LabelMap::MnistDigits).unwrap();
        assert_eq!(ds.labels(), &[-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn rejects_unsupported_labels() {
        let f = write_temp("+1 1:1\n5 1:1\n7 1:1\n5 1:1\n");
        match read_libsvm(f.path(), None) {
            Err(Error::UnsupportedLabels { labels, .. }) => {
                assert_eq!(labels, vec!["5".to_string(), "7".to_string()]);
            }
            other => panic!("expected UnsupportedLabels, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let f = write_temp("+1 1:1\n-1 2:abc\n");
        match read_libsvm(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Parse error, got {other:?}"),
        }
        let g = write_temp("+1 3:1 2:1\n");
        match read_libsvm(g.path(), None) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 1);
                assert!(message.contains("strictly increasing"));
            }
            other => panic!("expected Parse error, got {other:?}"),
        }
    }

    #[test]
    fn expected_dim_pads_and_validates() {
        let f = write_temp("+1 1:1\n");
        let ds = read_libsvm(f.path(), Some(10)).unwrap();
        assert_eq!(ds.dim(), 10);
        let err = read_libsvm(f.path(), Some(0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn gzip_roundtrip_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.libsvm.gz");
        let mut enc =
            flate2::write::GzEncoder::new(File::create(&path).unwrap(), Default::default());
        enc.write_all(b"+1 1:1 2:-3.5\n-1 2:0.25\n").unwrap();
        enc.finish().unwrap();
        let ds = read_libsvm(&path, None).unwrap();
        assert_eq!(ds.n_rows(), 2);
        assert_eq!(ds.matrix().row(0).1, &[1.0, -3.5]);
    }

    #[test]
    fn write_then_read_roundtrips() {
        let f = write_temp("+1 1:0.5 3:0.1\n-1 2:1\n+1 1:-2\n");
        let ds = read_libsvm(f.path(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.libsvm");
        write_libsvm(&ds, &path).unwrap();
        let back = read_libsvm(&path, Some(ds.dim())).unwrap();
        assert_eq!(back.labels(), ds.labels());
        assert_eq!(back.matrix(), ds.matrix());
    }

    #[test]
    fn identical_files_share_checksums() {
        let f1 = write_temp("+1 1:1\n");
        let f2 = write_temp("+1 1:1\n");
        let a = read_libsvm(f1.path(), None).unwrap();
        let b = read_libsvm(f2.path(), None).unwrap();
        assert_eq!(a.source_checksum, b.source_checksum);
    }

    #[test]
    fn subsample_is_deterministic_and_ordered() {
        let f = write_temp("+1 1:1\n-1 1:2\n+1 1:3\n-1 1:4\n+1 1:5\n");
        let ds = read_libsvm(f.path(), None).unwrap();
        let a = subsample(&ds, 3, 42).unwrap();
        let b = subsample(&ds, 3, 42).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.matrix(), b.matrix());
        // Original order preserved: values strictly increasing in this set.
        let vals: Vec<f64> = (0..3).map(|i| a.matrix().row(i).1[0]).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert!(subsample(&ds, 6, 0).is_err());
        assert!(a.provenance.iter().any(|p| p.contains("subsample")));
    }

    #[test]
    fn max_abs_scaling_normalizes_columns() {
        let f = write_temp("+1 1:2 2:-8\n-1 1:-4\n");
        let ds = read_libsvm(f.path(), None).unwrap();
        let scaled = scale_features(&ds, ScaleMode::MaxAbs).unwrap();
        assert_eq!(scaled.matrix().row(0).1, &[0.5, -1.0]);
        assert_eq!(scaled.matrix().row(1).1, &[-1.0]);
    }

    #[test]
    fn synthetic_onehot_shape_and_determinism() {
        let ds = synthetic_onehot(100, &[3, 4, 5], 7).unwrap();
        assert_eq!(ds.n_rows(), 100);
        assert_eq!(ds.dim(), 12);
        for i in 0..ds.n_rows() {
            let (idx, val) = ds.matrix().row(i);
            assert_eq!(idx.len(), 3, "one active feature per group");
            assert!(val.iter().all(|&v| v == 1.0));
            assert!(idx[0] < 3 && (3..7).contains(&idx[1]) && (7..12).contains(&idx[2]));
        }
        let again = synthetic_onehot(100, &[3, 4, 5], 7).unwrap();
        assert_eq!(ds.matrix(), again.matrix());
        assert_eq!(ds.labels(), again.labels());
        let other = synthetic_onehot(100, &[3, 4, 5], 8).unwrap();
        assert_ne!(ds.matrix(), other.matrix());
        // Both classes present.
        assert!(ds.labels().iter().any(|&y| y == 1.0));
        assert!(ds.labels().iter().any(|&y| y == -1.0));
    }
}
