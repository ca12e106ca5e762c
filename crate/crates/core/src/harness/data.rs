//! In-memory datasets: seeded synthetic generators plus IDX and CSV readers.

use std::fs;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::{gaussian, Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

/// `inputs` is `N × d_in`; `targets` is `N × d_out` for regression and
/// `N × 1` class ids for classification.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: Matrix,
    pub task: Task,
}

impl Dataset {
    pub fn new(inputs: Matrix, targets: Matrix, task: Task) -> Result<Self> {
        ensure!(inputs.rows() > 0, Shape, "empty dataset");
        ensure!(
            inputs.rows() == targets.rows(),
            Shape,
            "{} inputs but {} targets",
            inputs.rows(),
            targets.rows()
        );
        ensure!(inputs.all_finite() && targets.all_finite(), Domain, "dataset has non-finite entries");
        if let Task::Classification { classes } = task {
            ensure!(classes >= 2, Domain, "classification needs at least 2 classes");
            ensure!(targets.cols() == 1, Shape, "class targets must be a single column");
            for &t in targets.as_slice() {
                ensure!(
                    t >= 0.0 && t.fract() == 0.0 && (t as usize) < classes,
                    Domain,
                    "class id {t} outside [0, {classes})"
                );
            }
        }
        Ok(Dataset { inputs, targets, task })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Width of the network output this dataset trains.
    pub fn output_dim(&self) -> usize {
        match self.task {
            Task::Regression => self.targets.cols(),
            Task::Classification { classes } => classes,
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        self.targets.as_slice().iter().map(|&t| t as usize).collect()
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: self.inputs.select_rows(indices),
            targets: self.targets.select_rows(indices),
            task: self.task,
        }
    }
}

/// Gram–Schmidt on Gaussian draws: `k` orthonormal vectors in `R^dim`.
fn orthonormal_directions(rng: &mut RngStream, k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(k);
    while out.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (vi, ui) in v.iter_mut().zip(u) {
                *vi -= d * ui;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

/// Class `c` is `N(class_sep·u_c, I)` with `u_c` random orthonormal
/// directions; rows are shuffled.
pub fn synth_gaussian_classes(
    rng: &mut RngStream,
    classes: usize,
    per_class: usize,
    dim: usize,
    class_sep: f64,
) -> Result<Dataset> {
    ensure!(classes >= 2, Domain, "need at least 2 classes, got {classes}");
    ensure!(per_class >= 1, Domain, "per_class must be >= 1");
    ensure!(class_sep >= 0.0 && class_sep.is_finite(), Domain, "class_sep {class_sep} must be >= 0");
    ensure!(dim >= classes, Domain, "dim {dim} < classes {classes}: orthonormal centers impossible");
    let dirs = orthonormal_directions(rng, classes, dim);
    let n = classes * per_class;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut x = gaussian(rng, 0.0, 1.0, n, dim)?;
    let mut y = Matrix::zeros(n, 1);
    for (r, &slot) in order.iter().enumerate() {
        let c = slot / per_class;
        y.set(r, 0, c as f64);
        for (xi, ui) in x.row_mut(r).iter_mut().zip(&dirs[c]) {
            *xi += class_sep * ui;
        }
    }
    Dataset::new(x, y, Task::Classification { classes })
}

/// `y = x·A + noise·ε` with `x ~ N(0, I)`, `A ~ N(0, 1/dim)`, `ε ~ N(0, 1)`.
pub fn synth_regression(rng: &mut RngStream, samples: usize, dim: usize, outputs: usize, noise: f64) -> Result<Dataset> {
    ensure!(samples > 0 && dim > 0 && outputs > 0, Domain, "regression sizes must be positive");
    ensure!(noise >= 0.0, Domain, "noise {noise} must be >= 0");
    let a = gaussian(rng, 0.0, 1.0 / (dim as f64).sqrt(), dim, outputs)?;
    let x = gaussian(rng, 0.0, 1.0, samples, dim)?;
    let mut y = x.matmul(&a)?;
    if noise > 0.0 {
        y.axpy(noise, &gaussian(rng, 0.0, 1.0, samples, outputs)?)?;
    }
    Dataset::new(x, y, Task::Regression)
}

fn format_err(path: &Path, offset: u64, message: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset, message: message.into() }
}

/// Dimensions and payload offset of an unsigned-byte IDX file.
fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let word = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, off as u64, "truncated header"))
    };
    let found = word(0)?;
    if found != magic {
        return Err(format_err(path, 0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims).map(|i| word(4 + 4 * i).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let need: usize = dims.iter().product();
    if bytes.len() != start + need {
        return Err(format_err(
            path,
            bytes.len().min(start + need) as u64,
            format!("payload is {} bytes, header implies {need}", bytes.len().saturating_sub(start)),
        ));
    }
    Ok((dims, start))
}

/// Images (`0x00000803`, flattened and scaled to `[0, 1]`) with their labels
/// (`0x00000801`); the class count is the largest label plus one.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let ib = fs::read(images).map_err(|e| Error::io(images, e))?;
    let lb = fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let (idims, istart) = idx_header(images, &ib, 0x0000_0803)?;
    let (ldims, lstart) = idx_header(labels, &lb, 0x0000_0801)?;
    let (n, pixels) = (idims[0], idims[1] * idims[2]);
    if ldims[0] != n {
        return Err(format_err(labels, 4, format!("{} labels for {n} images", ldims[0])));
    }
    if n == 0 || pixels == 0 {
        return Err(format_err(images, 4, "empty image set"));
    }
    let x: Vec<f64> = ib[istart..].iter().map(|&p| p as f64 / 255.0).collect();
    let y: Vec<f64> = lb[lstart..].iter().map(|&l| l as f64).collect();
    let classes = (lb[lstart..].iter().copied().max().unwrap_or(0) as usize + 1).max(2);
    Dataset::new(Matrix::from_vec(n, pixels, x)?, Matrix::from_vec(n, 1, y)?, Task::Classification { classes })
}

fn csv_err(path: &Path, row: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Csv { path: path.to_path_buf(), row, column, message: message.into() }
}

/// CSV with a header row. `label_col` names the target column; every other
/// column is a feature. Rows and columns in errors are 1-based with the
/// header as row 1.
pub fn load_csv(path: &Path, label_col: &str, task_is_classification: bool) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, 0, 0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, 1, 0, e.to_string()))?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_col)
        .ok_or_else(|| csv_err(path, 1, 0, format!("no column named {label_col:?}")))?;
    let width = headers.len();
    ensure!(width >= 2, Config, "{}: need at least one feature column", path.display());
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| csv_err(path, row, 0, e.to_string()))?;
        if rec.len() != width {
            return Err(csv_err(path, row, rec.len().min(width) + 1, format!("{} fields, header has {width}", rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| csv_err(path, row, j + 1, format!("not a number: {cell:?}")))?;
            if !v.is_finite() {
                return Err(csv_err(path, row, j + 1, "non-finite value"));
            }
            if j == label_idx {
                if task_is_classification && (v < 0.0 || v.fract() != 0.0) {
                    return Err(csv_err(path, row, j + 1, format!("class id {v} is not a non-negative integer")));
                }
                y.push(v);
            } else {
                x.push(v);
            }
        }
    }
    let n = y.len();
    if n == 0 {
        return Err(csv_err(path, 2, 0, "no data rows"));
    }
    let task = if task_is_classification {
        Task::Classification { classes: (y.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1).max(2) }
    } else {
        Task::Regression
    };
    Dataset::new(Matrix::from_vec(n, width - 1, x)?, Matrix::from_vec(n, 1, y)?, task)
}

/// Writes features `x0..x{d-1}` followed by `label_col`; floats use the
/// shortest round-trip form.
pub fn write_csv(ds: &Dataset, path: &Path, label_col: &str) -> Result<()> {
    ensure!(ds.targets.cols() == 1, Shape, "write_csv supports a single target column");
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, 0, 0, e.to_string()))?;
    let mut header: Vec<String> = (0..ds.input_dim()).map(|j| format!("x{j}")).collect();
    header.push(label_col.to_string());
    let io = |e: csv::Error| csv_err(path, 0, 0, e.to_string());
    w.write_record(&header).map_err(io)?;
    for r in 0..ds.len() {
        let mut rec: Vec<String> = ds.inputs.row(r).iter().map(|v| format!("{v:?}")).collect();
        rec.push(format!("{:?}", ds.targets.get(r, 0)));
        w.write_record(&rec).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Nearest-centroid classifier fitted on the same data.
    fn centroid_accuracy(ds: &Dataset) -> f64 {
        let Task::Classification { classes } = ds.task else { unreachable!() };
        let d = ds.input_dim();
        let labels = ds.labels();
        let mut cent = vec![vec![0.0; d]; classes];
        let mut count = vec![0usize; classes];
        for (r, &c) in labels.iter().enumerate() {
            count[c] += 1;
            for (a, b) in cent[c].iter_mut().zip(ds.inputs.row(r)) {
                *a += b;
            }
        }
        for (c, n) in cent.iter_mut().zip(&count) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let hits = labels
            .iter()
            .enumerate()
            .filter(|(r, &c)| {
                let x = ds.inputs.row(*r);
                let dist = |k: usize| -> f64 { cent[k].iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum() };
                (0..classes).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap() == c
            })
            .count();
        hits as f64 / labels.len() as f64
    }

    #[test]
    fn separated_classes_are_easy() {
        let ds = synth_gaussian_classes(&mut RngStream::new(3), 2, 500, 16, 10.0).unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(centroid_accuracy(&ds) > 0.99);
    }

    #[test]
    fn zero_separation_carries_no_signal() {
        let ds = synth_gaussian_classes(&mut RngStream::new(4), 4, 1000, 8, 0.0).unwrap();
        // a classifier that ignores x: majority class
        let mut count = [0usize; 4];
        ds.labels().iter().for_each(|&c| count[c] += 1);
        let p = 0.25;
        let sigma = (p * (1.0 - p) / 4000.0f64).sqrt();
        for c in count {
            assert!((c as f64 / 4000.0 - p).abs() < 1e-12 + 3.0 * sigma);
        }
        // nearest centroid on pure noise sits near chance (in-sample fit adds a little)
        assert!((centroid_accuracy(&ds) - p).abs() < 0.05);
    }

    #[test]
    fn synth_is_deterministic_and_validated() {
        let a = synth_gaussian_classes(&mut RngStream::new(9), 3, 10, 5, 2.0).unwrap();
        let b = synth_gaussian_classes(&mut RngStream::new(9), 3, 10, 5, 2.0).unwrap();
        assert_eq!(a, b);
        assert!(matches!(synth_gaussian_classes(&mut RngStream::new(9), 10, 10, 5, 2.0), Err(Error::Domain(_))));
        assert!(synth_gaussian_classes(&mut RngStream::new(9), 1, 10, 5, 2.0).is_err());
    }

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend(d.to_be_bytes());
        }
        b.extend(payload);
        b
    }

    #[test]
    fn idx_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lbl"));
        let pixels: Vec<u8> = (0..4 * 2 * 3).map(|i| (i * 10) as u8).collect();
        fs::write(&ip, idx_bytes(0x803, &[4, 2, 3], &pixels)).unwrap();
        fs::write(&lp, idx_bytes(0x801, &[4], &[0, 1, 2, 1])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.inputs.shape(), (4, 6));
        assert_eq!(ds.inputs.get(1, 0), 60.0 / 255.0);
        assert_eq!(ds.task, Task::Classification { classes: 3 });

        fs::write(&ip, idx_bytes(0x802, &[4, 2, 3], &pixels)).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 0, .. })));
        fs::write(&ip, idx_bytes(0x803, &[4, 2, 3], &pixels[..20])).unwrap();
        match load_idx(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 36),
            other => panic!("{other:?}"),
        }
        fs::write(&ip, [0u8, 0, 8]).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn csv_errors_name_row_and_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "a,b,label\n1,2,0\n3,oops,1\n").unwrap();
        match load_csv(&p, "label", true) {
            Err(Error::Csv { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        fs::write(&p, "a,b,label\n1,2,0.5\n").unwrap();
        assert!(matches!(load_csv(&p, "label", true), Err(Error::Csv { row: 2, column: 3, .. })));
        assert!(matches!(load_csv(&p, "y", false), Err(Error::Csv { row: 1, .. })));
    }

    #[test]
    fn csv_round_trip_is_value_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p, q) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let ds = synth_gaussian_classes(&mut RngStream::new(2), 3, 7, 4, 1.5).unwrap();
        write_csv(&ds, &p, "label").unwrap();
        let back = load_csv(&p, "label", true).unwrap();
        assert_eq!(back, ds);
        write_csv(&back, &q, "label").unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    }
}
