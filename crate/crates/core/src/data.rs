//! Dataset loading, binarization and train/validation/test splitting.
//!
//! Every matrix holds one example per row with values in `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub type Matrix = Tensor<f32>;

pub const CIFAR_RECORD: usize = 1 + 3072;
const MATRIX_MAGIC: &[u8; 8] = b"F32MATRX";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Matrix,
    pub val: Matrix,
    pub test: Matrix,
}

impl Dataset {
    pub fn new(name: impl Into<String>, train: Matrix, val: Matrix, test: Matrix) -> Result<Self> {
        let dim = train.cols();
        for (split, m) in [("val", &val), ("test", &test)] {
            if m.cols() != dim {
                return Err(Error::Format(format!(
                    "{split} split has {} columns, train has {dim}",
                    m.cols()
                )));
            }
        }
        for m in [&train, &val, &test] {
            if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Format("dataset values must lie in [0, 1]".into()));
            }
        }
        Ok(Self {
            name: name.into(),
            train,
            val,
            test,
        })
    }

    pub fn dim(&self) -> usize {
        self.train.cols()
    }

    pub fn split(&self, which: SplitKind) -> &Matrix {
        match which {
            SplitKind::Train => &self.train,
            SplitKind::Val => &self.val,
            SplitKind::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitKind::Train => "train",
            SplitKind::Val => "val",
            SplitKind::Test => "test",
        })
    }
}

impl FromStr for SplitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitKind::Train),
            "val" => Ok(SplitKind::Val),
            "test" => Ok(SplitKind::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Decodes an unsigned-byte IDX file. The first dimension becomes rows,
/// the rest are flattened into columns, and bytes are scaled by 1/255.
pub fn parse_idx(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    // zero, zero, unsigned-byte type code, rank
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0 {
        return Err(Error::Format(format!("bad IDX magic {magic:#010x}")));
    }
    let ndim = bytes[3] as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(Error::Format("IDX header truncated".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let rows = dims[0];
    let cols: usize = dims[1..].iter().product();
    let payload = &bytes[header..];
    if payload.len() != rows * cols {
        return Err(Error::Format(format!(
            "IDX payload has {} bytes, header promises {}",
            payload.len(),
            rows * cols
        )));
    }
    Ok(Tensor::matrix(
        rows,
        cols,
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )?)
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_idx(&read(path.as_ref())?)
}

/// Encodes bytes as an IDX file with the given dimensions.
pub fn encode_idx(dims: &[usize], payload: &[u8]) -> Result<Vec<u8>> {
    if dims.iter().product::<usize>() != payload.len() || dims.is_empty() || dims.len() > 255 {
        return Err(Error::InvalidArgument(
            "IDX dimensions do not match payload".into(),
        ));
    }
    let magic = 0x0000_0800 | dims.len() as u32;
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend((d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    Ok(out)
}

/// Inverse of the 1/255 scaling used by the byte formats.
pub fn to_bytes(m: &Matrix) -> Vec<u8> {
    m.data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Decodes CIFAR-10 binary records, dropping the label byte.
pub fn parse_cifar(bytes: &[u8]) -> Result<Matrix> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let rows = bytes.len() / CIFAR_RECORD;
    let data = bytes
        .chunks_exact(CIFAR_RECORD)
        .flat_map(|r| r[1..].iter().map(|&b| b as f32 / 255.0))
        .collect();
    Ok(Tensor::matrix(rows, CIFAR_RECORD - 1, data)?)
}

pub fn load_cifar_file(path: impl AsRef<Path>) -> Result<Matrix> {
    parse_cifar(&read(path.as_ref())?)
}

/// Reads `data_batch_1..5.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar(dir: impl AsRef<Path>) -> Result<(Matrix, Matrix)> {
    let dir = dir.as_ref();
    let batches = (1..=5)
        .map(|i| load_cifar_file(dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    let train = vstack(&batches)?;
    let test = load_cifar_file(dir.join("test_batch.bin"))?;
    Ok((train, test))
}

pub fn vstack(parts: &[Matrix]) -> Result<Matrix> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidArgument("nothing to stack".into()));
    };
    let cols = first.cols();
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != cols {
            return Err(Error::Dimension {
                expected: cols,
                got: p.cols(),
            });
        }
        data.extend_from_slice(p.data());
        rows += p.rows();
    }
    Ok(Tensor::matrix(rows, cols, data)?)
}

#[derive(Clone, Debug, PartialEq)]
pub enum BinarizeMode {
    /// `v >= t` maps to 1.
    Threshold(f32),
    /// Values already binarized elsewhere, read from a matrix file.
    Static(PathBuf),
}

impl FromStr for BinarizeMode {
    type Err = Error;

    /// `threshold`, `threshold:<t>` or `static:<path>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "threshold" => Ok(BinarizeMode::Threshold(0.5)),
            Some(("threshold", t)) => t
                .parse()
                .map(BinarizeMode::Threshold)
                .map_err(|_| Error::Config(format!("bad threshold '{t}'"))),
            Some(("static", p)) => Ok(BinarizeMode::Static(PathBuf::from(p))),
            _ => Err(Error::Config(format!("unknown binarization mode '{s}'"))),
        }
    }
}

pub fn threshold(m: &Matrix, t: f32) -> Matrix {
    m.map(|v| if v >= t { 1.0 } else { 0.0 })
}

/// In static mode the file replaces `m` and must match its shape.
pub fn binarize(m: &Matrix, mode: &BinarizeMode) -> Result<Matrix> {
    match mode {
        BinarizeMode::Threshold(t) => Ok(threshold(m, *t)),
        BinarizeMode::Static(path) => {
            let b = read_matrix(path)?;
            if b.shape() != m.shape() {
                return Err(Error::Format(format!(
                    "static binarization has shape {:?}, data has {:?}",
                    b.shape(),
                    m.shape()
                )));
            }
            if b.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Format("static binarization is not 0/1".into()));
            }
            Ok(b)
        }
    }
}

/// Row indices of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition sizes: floor of each share, then the leftover rows go one at
/// a time to the largest fractional remainders (earlier partitions first
/// on ties).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::InvalidArgument(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    // tolerate representation error such as 0.1 * 10 = 1.0000000000000002
    let mut sizes: Vec<usize> = exact.iter().map(|e| (e + 1e-9).floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - sizes[a] as f64;
        let rb = exact[b] - sizes[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    for (i, (&s, &f)) in sizes.iter().zip(&fractions).enumerate() {
        if f > 0.0 && s == 0 {
            return Err(Error::InvalidArgument(format!(
                "partition {i} would be empty with {n} rows"
            )));
        }
    }
    Ok([sizes[0], sizes[1], sizes[2]])
}

/// Deterministic shuffled split of `0..n`.
pub fn split(n: usize, fractions: [f64; 3], seed: u64) -> Result<SplitIndices> {
    let [a, b, _] = split_sizes(n, fractions)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(SplitIndices {
        train: idx[..a].to_vec(),
        val: idx[a..a + b].to_vec(),
        test: idx[a + b..].to_vec(),
    })
}

/// Row-gathering form of [`split`].
pub fn split_matrix(
    m: &Matrix,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Matrix, Matrix, Matrix)> {
    let s = split(m.rows(), fractions, seed)?;
    Ok((
        m.gather_rows(&s.train),
        m.gather_rows(&s.val),
        m.gather_rows(&s.test),
    ))
}

/// Raw matrix file: 8-byte magic, rows and cols as little-endian u64,
/// then row-major little-endian f32 values.
pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(MATRIX_MAGIC)?;
    f.write_all(&(m.rows() as u64).to_le_bytes())?;
    f.write_all(&(m.cols() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.len() * 4);
    for v in m.data() {
        buf.extend(v.to_le_bytes());
    }
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let bytes = read(path.as_ref())?;
    if bytes.len() < 24 || &bytes[..8] != MATRIX_MAGIC {
        return Err(Error::Format("not a matrix file".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
    let body = &bytes[24..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "matrix body has {} bytes, header promises {}",
            body.len(),
            rows * cols * 4
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::matrix(rows, cols, data)?)
}

/// `points` random binary patterns of width `dim`, all distinct when
/// `2^dim` allows it.
pub fn synthetic_patterns(points: usize, dim: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(points);
    let distinct = dim >= 64 || points <= 1usize << dim;
    while rows.len() < points {
        let r: Vec<f32> = (0..dim)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 })
            .collect();
        if !distinct || !rows.contains(&r) {
            rows.push(r);
        }
    }
    Tensor::matrix(points, dim, rows.concat()).expect("sized above")
}

/// Memorization fixture: the same patterns serve as every split.
pub fn synthetic_dataset(points: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let m = synthetic_patterns(points, dim, seed);
    Dataset::new(format!("synthetic:{points}x{dim}"), m.clone(), m.clone(), m)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetId {
    Mnist,
    BinaryMnist,
    Cifar10,
    Omniglot,
    Synthetic { points: usize, dim: usize },
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Mnist => f.write_str("mnist"),
            DatasetId::BinaryMnist => f.write_str("binary_mnist"),
            DatasetId::Cifar10 => f.write_str("cifar10"),
            DatasetId::Omniglot => f.write_str("omniglot"),
            DatasetId::Synthetic { points, dim } => write!(f, "synthetic:{points}x{dim}"),
        }
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetId::Mnist),
            "binary_mnist" | "binarymnist" => Ok(DatasetId::BinaryMnist),
            "cifar10" => Ok(DatasetId::Cifar10),
            "omniglot" => Ok(DatasetId::Omniglot),
            "synthetic" => Ok(DatasetId::Synthetic { points: 8, dim: 16 }),
            other => {
                let bad = || Error::Config(format!("unknown dataset '{other}'"));
                let spec = other.strip_prefix("synthetic:").ok_or_else(bad)?;
                let (p, d) = spec.split_once('x').ok_or_else(bad)?;
                let points = p.parse().map_err(|_| bad())?;
                let dim = d.parse().map_err(|_| bad())?;
                if points == 0 || dim == 0 {
                    return Err(bad());
                }
                Ok(DatasetId::Synthetic { points, dim })
            }
        }
    }
}

pub const MNIST_SPLIT: [f64; 3] = [50_000.0 / 60_000.0, 10_000.0 / 60_000.0, 0.0];
pub const CIFAR_SPLIT: [f64; 3] = [0.9, 0.1, 0.0];

/// Loads a dataset with its default split. MNIST reads the four standard
/// uncompressed IDX files from `dir`; the 60k training file is split
/// 50k/10k into train/validation and the 10k file is the test set. CIFAR
/// splits its 50k training records 45k/5k.
pub fn load_dataset(id: &DatasetId, dir: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let dir = dir.as_ref();
    match id {
        DatasetId::Mnist | DatasetId::BinaryMnist => {
            let train = load_idx(dir.join("train-images-idx3-ubyte"))?;
            let test = load_idx(dir.join("t10k-images-idx3-ubyte"))?;
            let (train, test) = if *id == DatasetId::BinaryMnist {
                (threshold(&train, 0.5), threshold(&test, 0.5))
            } else {
                (train, test)
            };
            let (train, val, _) = split_matrix(&train, MNIST_SPLIT, seed)?;
            Dataset::new(id.to_string(), train, val, test)
        }
        DatasetId::Cifar10 => {
            let (train, test) = load_cifar(dir)?;
            let (train, val, _) = split_matrix(&train, CIFAR_SPLIT, seed)?;
            Dataset::new(id.to_string(), train, val, test)
        }
        DatasetId::Omniglot => load_omniglot(dir.join("omniglot.f32"), seed),
        DatasetId::Synthetic { points, dim } => synthetic_dataset(*points, *dim, seed),
    }
}

/// Omniglot importer. Expects the images already resized to 28×28 and
/// stored as a single matrix file (784 columns); they are binarized at
/// 0.5 and split 80/10/10.
pub fn load_omniglot(path: impl AsRef<Path>, seed: u64) -> Result<Dataset> {
    let m = read_matrix(path)?;
    if m.cols() != 784 {
        return Err(Error::Format(format!(
            "omniglot images must be 28x28, got {} columns",
            m.cols()
        )));
    }
    let (train, val, test) = split_matrix(&threshold(&m, 0.5), [0.8, 0.1, 0.1], seed)?;
    Dataset::new("omniglot", train, val, test)
}
