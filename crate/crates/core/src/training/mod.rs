//! Joint optimization of encoder, decoder and TC classifier.
//!
//! One step maximizes `mean_i bound_i + λ · L_info` over encoder and
//! decoder parameters, where the bound is taken through either the uniform
//! noise relaxation (`necst`) or the gradient-guided adversarial one
//! (`abf`, `iabf`), and separately takes one ascent step on the
//! classifier's real-vs-permuted objective.

mod checkpoint;
mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{ModelCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Method, TrainConfig};

use crate::channels::{allocate_adversarial_noise, flip_relaxation, NoiseAllocation};
use crate::data::{load_dataset, Dataset, Matrix};
use crate::diffcore::{Scalar, Tensor, Wrt};
use crate::error::{Error, Result};
use crate::eval::per_image_distortion_threaded;
use crate::nets::{sample_code_batch, CodingModel, ParamStore};
use crate::objectives::{
    attack_plans, classifier_loss_graph, code_loss_gradients, info_graph, permute_per_dimension,
    vimco_gradients,
};

/// Adam over a fixed set of parameter slots, minimizing.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    slots: Vec<usize>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamStore<T>, slots: Vec<usize>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros: Vec<Tensor<T>> = slots
            .iter()
            .map(|&s| Tensor::zeros(params.get(s).shape()))
            .collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            slots,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update; slots missing from `grads` see a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<usize, Tensor<T>>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(self.lr * c2.sqrt() / c1);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let eps = T::of(self.eps * c2.sqrt());
        for (i, &slot) in self.slots.iter().enumerate() {
            let g = grads.get(&slot);
            let p = params.get_mut(slot).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(T::zero(), |g| g.data()[j]);
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                p[j] = p[j] - step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Per-step diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepMetrics {
    /// `-mean_i bound_i`.
    pub rec_loss: f64,
    pub info_mi_sum: f64,
    pub info_tc: f64,
    pub classifier_objective: f64,
    /// Mean per-image squared error of the decoder means over the K noisy
    /// samples.
    pub distortion: f64,
    /// Fraction of bits marked for attack.
    pub flip_fraction: f64,
    /// Examples whose code gradient vanished and fell back to uniform noise.
    pub fallbacks: usize,
}

/// Channel relaxation for one batch: the Bernoulli parameters after noise
/// and `∂p'/∂p` per entry.
#[derive(Clone, Debug)]
pub struct Relaxation<T> {
    pub probs: Tensor<T>,
    pub dprobs: Tensor<T>,
    pub flip_fraction: f64,
    pub fallbacks: usize,
}

/// Uniform `p' = p(1 - 2ε) + ε`.
pub fn uniform_relaxation<T: Scalar>(probs: &Tensor<T>, epsilon: f64) -> Relaxation<T> {
    Relaxation {
        probs: probs.map(|p| T::of(flip_relaxation(p.f64(), epsilon))),
        dprobs: Tensor::full(probs.shape(), T::of(1.0 - 2.0 * epsilon)),
        flip_fraction: 0.0,
        fallbacks: 0,
    }
}

/// Gradient-guided relaxation: decode K clean samples, mark bits whose
/// flip raises the reconstruction loss, spread `M·ε` over them in
/// proportion to the gradient magnitude. An example whose code gradient
/// is identically zero gets the uniform relaxation instead.
pub fn adversarial_relaxation<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    probs: &Tensor<T>,
    epsilon: f64,
    k: usize,
    rng: &mut R,
) -> Result<Relaxation<T>> {
    let (n, m) = (probs.rows(), probs.cols());
    if epsilon == 0.0 {
        return Ok(uniform_relaxation(probs, 0.0));
    }
    let clean = sample_code_batch(probs, k, rng);
    let (grad, _) = code_loss_gradients(model, x, &clean, k)?;
    let plans = attack_plans(&clean, &grad, k)?;
    let mut out = Vec::with_capacity(n * m);
    let mut dout = Vec::with_capacity(n * m);
    let mut marked = 0usize;
    let mut fallbacks = 0usize;
    for (i, plan) in plans.iter().enumerate() {
        let alloc = if plan.magnitudes.iter().all(|&g| g == 0.0) {
            fallbacks += 1;
            NoiseAllocation::uniform(m, epsilon)?
        } else {
            marked += plan.mask.count_ones();
            allocate_adversarial_noise(&plan.magnitudes, epsilon, &plan.mask)?
        };
        for (p, &e) in probs.row(i).iter().zip(alloc.levels()) {
            out.push(T::of(flip_relaxation(p.f64(), e)));
            dout.push(T::of(1.0 - 2.0 * e));
        }
    }
    Ok(Relaxation {
        probs: Tensor::matrix(n, m, out)?,
        dprobs: Tensor::matrix(n, m, dout)?,
        flip_fraction: marked as f64 / (n * m) as f64,
        fallbacks,
    })
}

/// Model plus optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: CodingModel<T>,
    pub config: TrainConfig,
    main: Adam<T>,
    classifier: Adam<T>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: CodingModel<T>, config: TrainConfig) -> Self {
        let mut slots = model.encoder_slots();
        slots.extend(model.decoder_slots());
        let main = Adam::new(&model.params, slots, config.lr, config.beta1, config.beta2);
        let classifier = Adam::new(
            &model.params,
            model.classifier_slots(),
            config.classifier_lr,
            config.beta1,
            config.beta2,
        );
        Self {
            model,
            config,
            main,
            classifier,
        }
    }

    /// Replaces the configuration; optimizer state is kept.
    pub fn set_config(&mut self, config: TrainConfig) {
        self.main.lr = config.lr;
        self.classifier.lr = config.classifier_lr;
        self.config = config;
    }

    /// One update on batch `x`. Order: encode; relax the channel (for the
    /// adversarial methods this samples and decodes clean codes, builds
    /// flip masks and the noise allocation); multi-sample bound and its
    /// gradients through the relaxed probabilities; classifier update on
    /// real vs permuted codes; infomax term; combined update.
    pub fn step<R: Rng>(&mut self, x: &Tensor<T>, rng: &mut R) -> Result<StepMetrics> {
        let cfg = &self.config;
        let model = &self.model;
        let n = x.rows();
        let k = cfg.k;
        let lambda = cfg.effective_lambda();

        let mut eg = model.encoder_graph();
        eg.graph
            .forward(model.params.tensors(), std::slice::from_ref(x))?;
        let probs = eg.graph.value(eg.probs)?.clone();

        let relax = if cfg.method.adversarial() {
            adversarial_relaxation(model, x, &probs, cfg.epsilon, k, rng)?
        } else {
            uniform_relaxation(&probs, cfg.epsilon)
        };

        let vimco = vimco_gradients(model, x, &relax.probs, k, true, rng)?;
        let inv_n = 1.0 / n as f64;
        let rec = vimco.bounds.iter().sum::<f64>() * inv_n;
        if !rec.is_finite() {
            return Err(Error::NonFinite("reconstruction bound".into()));
        }
        let mut distortion = 0.0;
        for r in 0..n * k {
            let target = x.row(r / k);
            distortion += vimco
                .means
                .row(r)
                .iter()
                .zip(target)
                .map(|(a, b)| (a.f64() - b.f64()).powi(2))
                .sum::<f64>();
        }
        distortion /= (n * k) as f64;
        let prob_grad = vimco.prob_grad.expect("requested");
        let mut dprobs = prob_grad.zip_map(&relax.dprobs, |g, d| g * d * T::of(inv_n));

        let mut metrics = StepMetrics {
            rec_loss: -rec,
            distortion,
            flip_fraction: relax.flip_fraction,
            fallbacks: relax.fallbacks,
            ..StepMetrics::default()
        };

        if lambda > 0.0 {
            let real = sample_code_batch(&probs, 1, rng);
            let permuted = permute_per_dimension(&real, rng)?;
            let mut cg = classifier_loss_graph(model);
            cg.graph
                .forward(model.params.tensors(), &[real, permuted])?;
            metrics.classifier_objective = cg.graph.value(cg.objective)?.item().f64();
            let g = cg
                .graph
                .backward(cg.objective, Tensor::scalar(-T::one()), Wrt::Params)?;
            self.classifier.step(&mut self.model.params, &g.params);

            let model = &self.model;
            let mut ig = info_graph(model);
            ig.graph
                .forward(model.params.tensors(), std::slice::from_ref(&probs))?;
            metrics.info_mi_sum = ig.graph.value(ig.mi_sum)?.item().f64();
            metrics.info_tc = ig.graph.value(ig.tc)?.item().f64();
            let target = if cfg.tc_grad { ig.total } else { ig.mi_sum };
            let g = ig
                .graph
                .backward(target, Tensor::scalar(T::one()), Wrt::Inputs)?;
            let gi = g.inputs[0]
                .as_ref()
                .expect("probabilities are differentiable");
            dprobs = dprobs.zip_map(gi, |a, b| a + b * T::of(lambda));
        }

        // minimize the negated objective
        let enc = eg
            .graph
            .backward(eg.probs, dprobs.map(|v| -v), Wrt::Params)?;
        let mut grads = enc.params;
        for (slot, g) in vimco.decoder_grads {
            grads.insert(slot, g.map(|v| -v * T::of(inv_n)));
        }
        self.main.step(&mut self.model.params, &grads);
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("parameters after update".into()));
        }
        Ok(metrics)
    }
}

/// One line of the metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub split: &'static str,
    pub rec_loss: Option<f64>,
    pub info_mi_sum: Option<f64>,
    pub info_tc: Option<f64>,
    pub distortion: f64,
    pub epsilon: f64,
    pub method: Method,
    pub seed: u64,
    pub wall_ms: u128,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "step,epoch,split,rec_loss,info_mi_sum,info_tc,distortion,epsilon,method,seed,wall_ms";

    pub fn csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{},{}",
            self.step,
            self.epoch,
            self.split,
            opt(self.rec_loss),
            opt(self.info_mi_sum),
            opt(self.info_tc),
            self.distortion,
            self.epsilon,
            self.method,
            self.seed,
            self.wall_ms
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation distortion.
    pub best: ModelCheckpoint,
    /// Parameters after the final epoch.
    pub last: ModelCheckpoint,
    pub history: Vec<MetricsRow>,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LAST_CHECKPOINT_FILE: &str = "last.bin";
pub const CONFIG_FILE: &str = "config.txt";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";

fn limit(m: &Matrix, n: usize) -> Matrix {
    if n == 0 || n >= m.rows() {
        m.clone()
    } else {
        m.slice_rows(0, n)
    }
}

/// Loads the configured dataset and trains from scratch.
pub fn train(config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_dataset(&config.dataset, &config.data_dir, config.seed)?;
    train_on(config, &data, out)
}

/// Trains a freshly initialized model on `data`. With `out`, writes the
/// effective config, the metrics file, and best/last checkpoints there.
pub fn train_on(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let model =
        CodingModel::<f32>::new(config.architecture(data.dim()), config.likelihood, &mut rng);
    run(config, data, model, rng, 0, f64::INFINITY, out)
}

/// Continues from a checkpoint for `config.epochs` more epochs.
/// Architecture-affecting settings must match the checkpoint; optimizer
/// state starts fresh.
pub fn resume(
    ckpt: &ModelCheckpoint,
    config: &TrainConfig,
    data: &Dataset,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.architecture_fields() != ckpt.config.architecture_fields() {
        return Err(Error::Checkpoint(
            "architecture settings differ from the checkpoint".into(),
        ));
    }
    if data.dim() != ckpt.data_dim {
        return Err(Error::Checkpoint(format!(
            "dataset has {} columns, checkpoint expects {}",
            data.dim(),
            ckpt.data_dim
        )));
    }
    let model = ckpt.model()?;
    let rng = ChaCha8Rng::seed_from_u64(config.seed ^ (ckpt.epoch as u64).rotate_left(32));
    run(config, data, model, rng, ckpt.epoch, ckpt.best_val, out)
}

struct Output {
    dir: PathBuf,
    metrics: fs::File,
}

impl Output {
    fn open(dir: &Path, config: &TrainConfig, append: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), config.to_text())?;
        let path = dir.join(METRICS_FILE);
        let fresh = !append || !path.exists();
        let mut metrics = fs::OpenOptions::new()
            .create(true)
            .append(!fresh)
            .write(true)
            .truncate(fresh)
            .open(path)?;
        if fresh {
            writeln!(metrics, "{}", MetricsRow::HEADER)?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics,
        })
    }

    fn rows(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for r in rows {
            writeln!(self.metrics, "{}", r.csv())?;
        }
        self.metrics.flush()?;
        Ok(())
    }
}

fn write_diagnostic(
    dir: &Path,
    epoch: usize,
    step: u64,
    err: &Error,
    model: &CodingModel<f32>,
    last: &StepMetrics,
) {
    let mut s = format!(
        "training aborted at epoch {epoch}, step {step}\nerror: {err}\nlast step: {last:?}\n\n"
    );
    for (name, t) in model.params.names().iter().zip(model.params.tensors()) {
        let bad = t.data().iter().filter(|v| !v.is_finite()).count();
        let max = t
            .data()
            .iter()
            .filter(|v| v.is_finite())
            .fold(0f32, |a, v| a.max(v.abs()));
        let _ = writeln!(s, "{name} {:?} non-finite={bad} max|v|={max}", t.shape());
    }
    let _ = fs::write(dir.join(DIAGNOSTIC_FILE), s);
}

fn run(
    config: &TrainConfig,
    data: &Dataset,
    model: CodingModel<f32>,
    mut rng: ChaCha8Rng,
    start_epoch: usize,
    mut best_val: f64,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let wall = || {
        if config.reference {
            0
        } else {
            start.elapsed().as_millis()
        }
    };
    let mut output = out
        .map(|d| Output::open(d, config, start_epoch > 0))
        .transpose()?;
    let train_x = limit(&data.train, config.train_limit);
    let val_x = limit(&data.val, config.val_limit);
    let channel = config.eval_channel(config.epsilon)?;
    if train_x.rows() < 2 || val_x.rows() == 0 {
        return Err(Error::InvalidArgument(
            "training needs at least two training rows and one validation row".into(),
        ));
    }

    let mut trainer = Trainer::new(model, config.clone());
    let mut best = ModelCheckpoint::from_model(&trainer.model, config, start_epoch, best_val);
    let mut history = Vec::new();
    let mut step = 0u64;
    let mut order: Vec<usize> = (0..train_x.rows()).collect();
    let end_epoch = start_epoch + config.epochs;

    for epoch in start_epoch + 1..=end_epoch {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut batches = 0usize;
        let mut last = StepMetrics::default();
        for idx in order.chunks(config.batch_size) {
            if idx.len() < 2 {
                continue;
            }
            let x = train_x.gather_rows(idx);
            step += 1;
            last = match trainer.step(&x, &mut rng) {
                Ok(m) => m,
                Err(e) => {
                    if let Some(o) = &output {
                        write_diagnostic(&o.dir, epoch, step, &e, &trainer.model, &last);
                    }
                    return Err(e);
                }
            };
            sums[0] += last.rec_loss;
            sums[1] += last.info_mi_sum;
            sums[2] += last.info_tc;
            sums[3] += last.distortion;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let mut rows = vec![MetricsRow {
            step,
            epoch,
            split: "train",
            rec_loss: Some(sums[0] / b),
            info_mi_sum: Some(sums[1] / b),
            info_tc: Some(sums[2] / b),
            distortion: sums[3] / b,
            epsilon: config.epsilon,
            method: config.method,
            seed: config.seed,
            wall_ms: wall(),
        }];
        if (epoch - start_epoch).is_multiple_of(config.val_every) || epoch == end_epoch {
            let mut vrng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_add(0x9e37_79b9)
                    .wrapping_add(epoch as u64),
            );
            let v = per_image_distortion_threaded(
                &trainer.model,
                &val_x,
                &channel,
                config.eval_mode,
                config.eval_draws,
                config.threads,
                &mut vrng,
            )?;
            let d = v.iter().sum::<f64>() / v.len() as f64;
            rows.push(MetricsRow {
                step,
                epoch,
                split: "val",
                rec_loss: None,
                info_mi_sum: None,
                info_tc: None,
                distortion: d,
                epsilon: config.epsilon,
                method: config.method,
                seed: config.seed,
                wall_ms: wall(),
            });
            if d < best_val {
                best_val = d;
                best = ModelCheckpoint::from_model(&trainer.model, config, epoch, best_val);
                if let Some(o) = &output {
                    best.save(o.dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(o) = output.as_mut() {
            o.rows(&rows)?;
        }
        history.extend(rows);
    }
    let last = ModelCheckpoint::from_model(&trainer.model, config, end_epoch, best_val);
    if let Some(o) = &output {
        if config.epochs == 0 || !o.dir.join(CHECKPOINT_FILE).exists() {
            best.save(o.dir.join(CHECKPOINT_FILE))?;
        }
        last.save(o.dir.join(LAST_CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        best,
        last,
        history,
    })
}
