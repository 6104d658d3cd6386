//! End-to-end evaluation: encode, transmit through a sampled channel,
//! decode, and measure per-image squared error; Markov-chain sampling;
//! PGM/PPM image grids.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channels::{bec_corrupt_batch, bsc_corrupt_batch, ChannelKind, ChannelSpec};
use crate::data::Matrix;
use crate::diffcore::{Scalar, Tensor};
use crate::error::{check_dim, Error, Result};
use crate::nets::{sample_code_batch, CodingModel, Likelihood};

/// How a codeword is produced from the encoder probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    /// Threshold at 0.5 (`p >= 0.5` gives 1).
    Map,
    /// Draw each bit from its Bernoulli.
    Sample,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Map => "map",
            EvalMode::Sample => "sample",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "map" => Ok(EvalMode::Map),
            "sample" => Ok(EvalMode::Sample),
            other => Err(Error::Config(format!("unknown evaluation mode '{other}'"))),
        }
    }
}

pub const DEFAULT_DRAWS: usize = 10;
const CHUNK: usize = 500;

fn check_channel(channel: &ChannelSpec) -> Result<()> {
    if channel.kind == ChannelKind::Adversarial {
        return Err(Error::InvalidArgument(
            "the adversarial channel exists only during training".into(),
        ));
    }
    Ok(())
}

fn codes_for<T: Scalar, R: Rng>(probs: &Tensor<T>, mode: EvalMode, rng: &mut R) -> Tensor<T> {
    match mode {
        EvalMode::Map => probs.map(|p| if p.f64() >= 0.5 { T::one() } else { T::zero() }),
        EvalMode::Sample => sample_code_batch(probs, 1, rng),
    }
}

fn transmit<T: Scalar, R: Rng>(
    codes: &mut Tensor<T>,
    channel: &ChannelSpec,
    rng: &mut R,
) -> Result<()> {
    match channel.kind {
        ChannelKind::Bsc => bsc_corrupt_batch(codes, channel.epsilon, rng),
        ChannelKind::Bec => bec_corrupt_batch(codes, channel.epsilon, rng),
        ChannelKind::Adversarial => check_channel(channel),
    }
}

/// Reconstructions `x̂` (decoder means clamped to `[0, 1]`) for a batch.
pub fn reconstruct_batch<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    channel: &ChannelSpec,
    mode: EvalMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_channel(channel)?;
    let probs = model.encode_batch(x)?;
    let mut codes = codes_for(&probs, mode, rng);
    transmit(&mut codes, channel, rng)?;
    Ok(model
        .decode_batch(&codes)?
        .map(|v| v.max(T::zero()).min(T::one())))
}

pub fn reconstruct<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &[f64],
    channel: &ChannelSpec,
    mode: EvalMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dim(model.arch.data_dim, x.len())?;
    let t = Tensor::from_f64(1, x.len(), x)?;
    Ok(reconstruct_batch(model, &t, channel, mode, rng)?.to_f64_vec())
}

/// Per-image distortion averaged over `draws` channel realizations. The
/// encoding step is drawn once per image (in sample mode) and reused
/// across channel draws.
pub fn per_image_distortion<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    channel: &ChannelSpec,
    mode: EvalMode,
    draws: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    per_image_distortion_threaded(model, x, channel, mode, draws, 1, rng)
}

/// As [`per_image_distortion`], spread over `threads` workers. Each chunk
/// of images gets its own generator seeded from `rng` up front, so the
/// result does not depend on the thread count.
pub fn per_image_distortion_threaded<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    channel: &ChannelSpec,
    mode: EvalMode,
    draws: usize,
    threads: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_channel(channel)?;
    if draws == 0 {
        return Err(Error::InvalidArgument(
            "need at least one channel draw".into(),
        ));
    }
    check_dim(model.arch.data_dim, x.cols())?;
    let rows: Vec<usize> = (0..x.rows()).collect();
    let jobs: Vec<(&[usize], u64)> = rows.chunks(CHUNK).map(|c| (c, rng.gen())).collect();
    let run = |chunk: &[usize], seed: u64| -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xb = x.gather_rows(chunk);
        let probs = model.encode_batch(&xb)?;
        let mut codes = codes_for(&probs, mode, &mut rng).repeat_rows(draws);
        transmit(&mut codes, channel, &mut rng)?;
        let means = model.decode_batch(&codes)?;
        let mut out = Vec::with_capacity(chunk.len());
        for i in 0..chunk.len() {
            let target = xb.row(i);
            let mut total = 0.0;
            for d in 0..draws {
                total += means
                    .row(i * draws + d)
                    .iter()
                    .zip(target)
                    .map(|(m, t)| (m.f64().clamp(0.0, 1.0) - t.f64()).powi(2))
                    .sum::<f64>();
            }
            out.push(total / draws as f64);
        }
        Ok(out)
    };
    let threads = threads.clamp(1, jobs.len().max(1));
    let mut parts: Vec<Option<Result<Vec<f64>>>> = (0..jobs.len()).map(|_| None).collect();
    if threads == 1 {
        for (slot, &(c, s)) in parts.iter_mut().zip(&jobs) {
            *slot = Some(run(c, s));
        }
    } else {
        let per = jobs.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slots, js) in parts.chunks_mut(per).zip(jobs.chunks(per)) {
                let run = &run;
                scope.spawn(move || {
                    for (slot, &(c, s)) in slots.iter_mut().zip(js) {
                        *slot = Some(run(c, s));
                    }
                });
            }
        });
    }
    let mut out = Vec::with_capacity(x.rows());
    for p in parts {
        out.extend(p.expect("every chunk ran")?);
    }
    Ok(out)
}

/// Mean over images of the per-image squared error `Σ_pixels (x - x̂)²`.
pub fn distortion<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    channel: &ChannelSpec,
    mode: EvalMode,
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let v = per_image_distortion(model, x, channel, mode, draws, rng)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistortionReport {
    pub dataset: String,
    pub split: String,
    pub bits: usize,
    pub channel: ChannelKind,
    pub epsilon: f64,
    pub method: String,
    pub mode: EvalMode,
    pub draws: usize,
    pub seed: u64,
    pub images: usize,
    /// Mean per-image `Σ_pixels (x - x̂)²`.
    pub distortion: f64,
    /// Standard error of that mean across images.
    pub std_error: f64,
}

impl DistortionReport {
    pub const CSV_HEADER: &'static str =
        "dataset,split,bits,channel,epsilon,method,mode,draws,seed,images,distortion,std_error,metric";
    /// Recorded verbatim in every row.
    pub const METRIC: &'static str = "mean_over_images(sum_over_pixels((x-xhat)^2))";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{}",
            self.dataset,
            self.split,
            self.bits,
            self.channel,
            self.epsilon,
            self.method,
            self.mode,
            self.draws,
            self.seed,
            self.images,
            self.distortion,
            self.std_error,
            Self::METRIC
        )
    }
}

impl fmt::Display for DistortionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<10} {:<5} M={:<4} {}(eps={:.2}) {:<6} {:<6} draws={:<3} n={:<6} distortion={:.4} ± {:.4}",
            self.dataset,
            self.split,
            self.bits,
            self.channel,
            self.epsilon,
            self.method,
            self.mode,
            self.draws,
            self.images,
            self.distortion,
            self.std_error
        )
    }
}

/// Identifies what is being evaluated, for the report.
#[derive(Clone, Debug)]
pub struct EvalContext<'a> {
    pub dataset: &'a str,
    pub split: &'a str,
    pub method: &'a str,
    pub seed: u64,
    pub threads: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn distortion_report<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    channel: &ChannelSpec,
    mode: EvalMode,
    draws: usize,
    ctx: &EvalContext<'_>,
    rng: &mut R,
) -> Result<DistortionReport> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty split".into(),
        ));
    }
    let v = per_image_distortion_threaded(model, x, channel, mode, draws, ctx.threads, rng)?;
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(DistortionReport {
        dataset: ctx.dataset.to_string(),
        split: ctx.split.to_string(),
        bits: model.arch.bits,
        channel: channel.kind,
        epsilon: channel.epsilon,
        method: ctx.method.to_string(),
        mode,
        draws,
        seed: ctx.seed,
        images: v.len(),
        distortion: mean,
        std_error: (var / n).sqrt(),
    })
}

/// `x⁽ᵗ⁺¹⁾ ~ q(x | ŷ⁽ᵗ⁾)` with `ŷ⁽ᵗ⁾` a sampled code sent through the
/// channel. Bernoulli decoders are sampled; Gaussian decoders contribute
/// their clamped means. Returns `steps + 1` states including `x0`.
pub fn markov_chain<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    channel: &ChannelSpec,
    x0: &[f64],
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    check_channel(channel)?;
    check_dim(model.arch.data_dim, x0.len())?;
    let mut chain = vec![x0.to_vec()];
    for _ in 0..steps {
        let x = Tensor::from_f64(1, x0.len(), chain.last().expect("non-empty"))?;
        let means = reconstruct_batch(model, &x, channel, EvalMode::Sample, rng)?.to_f64_vec();
        let next = match model.likelihood {
            Likelihood::Bernoulli => means
                .iter()
                .map(|&m| if rng.gen::<f64>() < m { 1.0 } else { 0.0 })
                .collect(),
            Likelihood::Gaussian => means,
        };
        chain.push(next);
    }
    Ok(chain)
}

/// Image geometry for grid output. Three-channel images are stored
/// planar (all red, then green, then blue), as in CIFAR-10.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub const MNIST: ImageShape = ImageShape {
        height: 28,
        width: 28,
        channels: 1,
    };
    pub const CIFAR: ImageShape = ImageShape {
        height: 32,
        width: 32,
        channels: 3,
    };

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Square single-channel guess for `n` pixels, or a 1-row strip.
    pub fn guess(n: usize) -> ImageShape {
        if n == 3072 {
            return Self::CIFAR;
        }
        let side = (n as f64).sqrt().round() as usize;
        if side * side == n {
            ImageShape {
                height: side,
                width: side,
                channels: 1,
            }
        } else {
            ImageShape {
                height: 1,
                width: n,
                channels: 1,
            }
        }
    }
}

pub const GRID_FILL: u8 = 128;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Tiles images row-major into a `rows × cols` grid and writes binary PGM
/// (one channel) or PPM (three channels). Empty cells are mid-gray.
pub fn render_image_grid(
    images: &[Vec<f64>],
    shape: ImageShape,
    rows: usize,
    cols: usize,
) -> Result<Vec<u8>> {
    if images.len() > rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} images do not fit a {rows}x{cols} grid",
            images.len()
        )));
    }
    if shape.channels != 1 && shape.channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "{} channels not supported",
            shape.channels
        )));
    }
    for img in images {
        check_dim(shape.len(), img.len())?;
    }
    let (w, h, c) = (cols * shape.width, rows * shape.height, shape.channels);
    let mut pixels = vec![GRID_FILL; w * h * c];
    let plane = shape.height * shape.width;
    for (i, img) in images.iter().enumerate() {
        let (gr, gc) = (i / cols, i % cols);
        for y in 0..shape.height {
            for x in 0..shape.width {
                let py = gr * shape.height + y;
                let px = gc * shape.width + x;
                for ch in 0..c {
                    pixels[(py * w + px) * c + ch] = to_byte(img[ch * plane + y * shape.width + x]);
                }
            }
        }
    }
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn emit_image_grid(
    images: &[Vec<f64>],
    shape: ImageShape,
    rows: usize,
    cols: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = render_image_grid(images, shape, rows, cols)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

/// Rows of a matrix as `f64` images.
pub fn matrix_images(m: &Matrix, count: usize) -> Vec<Vec<f64>> {
    (0..count.min(m.rows()))
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}
