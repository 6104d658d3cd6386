use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::channels::{check_epsilon, ChannelKind, ChannelSpec};
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::eval::EvalMode;
use crate::nets::{Activation, Architecture, Likelihood};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    /// Adversarial bit flips plus the infomax term.
    Iabf,
    /// Adversarial bit flips only.
    Abf,
    /// Uniform-noise relaxation, no infomax term.
    Necst,
}

impl Method {
    pub fn adversarial(self) -> bool {
        matches!(self, Method::Iabf | Method::Abf)
    }

    pub fn infomax(self) -> bool {
        self == Method::Iabf
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Iabf => "iabf",
            Method::Abf => "abf",
            Method::Necst => "necst",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iabf" => Ok(Method::Iabf),
            "abf" => Ok(Method::Abf),
            "necst" => Ok(Method::Necst),
            other => Err(Error::Config(format!("unknown method '{other}'"))),
        }
    }
}

/// Every training and evaluation setting. Serialized as flat
/// `key = value` text; see [`TrainConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dataset: DatasetId,
    pub data_dir: PathBuf,
    pub bits: usize,
    pub channel: ChannelKind,
    pub epsilon: f64,
    pub lambda: f64,
    pub k: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub classifier_lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub likelihood: Likelihood,
    pub method: Method,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
    pub activation: Activation,
    /// Let the TC estimate's gradient reach the encoder.
    pub tc_grad: bool,
    pub eval_mode: EvalMode,
    pub eval_draws: usize,
    /// Use only the first this many rows of a split; 0 means all.
    pub train_limit: usize,
    pub val_limit: usize,
    pub threads: usize,
    /// Write 0 for wall-clock columns so metrics files are reproducible.
    pub reference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            data_dir: PathBuf::from("data/mnist"),
            bits: 100,
            channel: ChannelKind::Bsc,
            epsilon: 0.1,
            lambda: 0.01,
            k: 5,
            batch_size: 100,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            classifier_lr: 1e-4,
            epochs: 20,
            seed: 0,
            likelihood: Likelihood::Gaussian,
            method: Method::Iabf,
            val_every: 1,
            hidden: 500,
            hidden_layers: 2,
            classifier_hidden: 256,
            classifier_layers: 3,
            activation: Activation::Softplus,
            tc_grad: true,
            eval_mode: EvalMode::Map,
            eval_draws: 10,
            train_limit: 0,
            val_limit: 0,
            threads: 1,
            reference: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 29] = [
        "dataset",
        "data_dir",
        "bits",
        "channel",
        "epsilon",
        "lambda",
        "k",
        "batch_size",
        "lr",
        "beta1",
        "beta2",
        "classifier_lr",
        "epochs",
        "seed",
        "likelihood",
        "method",
        "val_every",
        "hidden",
        "hidden_layers",
        "classifier_hidden",
        "classifier_layers",
        "activation",
        "tc_grad",
        "eval_mode",
        "eval_draws",
        "train_limit",
        "val_limit",
        "threads",
        "reference",
    ];

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "bits" => self.bits = parse(key, v)?,
            "channel" => self.channel = v.parse()?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "classifier_lr" => self.classifier_lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "likelihood" => self.likelihood = v.parse()?,
            "method" => self.method = v.parse()?,
            "val_every" => self.val_every = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "hidden_layers" => self.hidden_layers = parse(key, v)?,
            "classifier_hidden" => self.classifier_hidden = parse(key, v)?,
            "classifier_layers" => self.classifier_layers = parse(key, v)?,
            "activation" => self.activation = v.parse()?,
            "tc_grad" => self.tc_grad = parse(key, v)?,
            "eval_mode" => self.eval_mode = v.parse()?,
            "eval_draws" => self.eval_draws = parse(key, v)?,
            "train_limit" => self.train_limit = parse(key, v)?,
            "val_limit" => self.val_limit = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            "reference" => self.reference = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and
    /// `#` comments are ignored; unknown keys are errors.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", i + 1)))?;
            c.set(k.trim(), v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        put("dataset", self.dataset.to_string());
        put("data_dir", self.data_dir.display().to_string());
        put("bits", self.bits.to_string());
        put("channel", self.channel.to_string());
        put("epsilon", self.epsilon.to_string());
        put("lambda", self.lambda.to_string());
        put("k", self.k.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("beta1", self.beta1.to_string());
        put("beta2", self.beta2.to_string());
        put("classifier_lr", self.classifier_lr.to_string());
        put("epochs", self.epochs.to_string());
        put("seed", self.seed.to_string());
        put("likelihood", self.likelihood.to_string());
        put("method", self.method.to_string());
        put("val_every", self.val_every.to_string());
        put("hidden", self.hidden.to_string());
        put("hidden_layers", self.hidden_layers.to_string());
        put("classifier_hidden", self.classifier_hidden.to_string());
        put("classifier_layers", self.classifier_layers.to_string());
        put("activation", self.activation.to_string());
        put("tc_grad", self.tc_grad.to_string());
        put("eval_mode", self.eval_mode.to_string());
        put("eval_draws", self.eval_draws.to_string());
        put("train_limit", self.train_limit.to_string());
        put("val_limit", self.val_limit.to_string());
        put("threads", self.threads.to_string());
        put("reference", self.reference.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        check_epsilon(self.epsilon).map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channel == ChannelKind::Adversarial {
            return bad("channel must be bsc or bec; adversarial training is selected by method");
        }
        if self.k < 2 {
            return bad("k must be at least 2");
        }
        if self.bits == 0 || self.hidden == 0 || self.classifier_hidden == 0 {
            return bad("layer widths must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be a finite non-negative number");
        }
        for (name, v) in [("lr", self.lr), ("classifier_lr", self.classifier_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.val_every == 0 || self.eval_draws == 0 || self.threads == 0 {
            return bad("val_every, eval_draws and threads must be positive");
        }
        Ok(())
    }

    /// The λ actually applied: zero unless the method uses the infomax term.
    pub fn effective_lambda(&self) -> f64 {
        if self.method.infomax() {
            self.lambda
        } else {
            0.0
        }
    }

    pub fn eval_channel(&self, epsilon: f64) -> Result<ChannelSpec> {
        ChannelSpec::new(self.channel, epsilon)
    }

    pub fn architecture(&self, data_dim: usize) -> Architecture {
        Architecture {
            data_dim,
            bits: self.bits,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
            classifier_hidden: self.classifier_hidden,
            classifier_layers: self.classifier_layers,
            activation: self.activation,
        }
    }

    /// Fields a checkpoint's parameters depend on.
    pub fn architecture_fields(
        &self,
    ) -> (usize, usize, usize, usize, usize, Activation, Likelihood) {
        (
            self.bits,
            self.hidden,
            self.hidden_layers,
            self.classifier_hidden,
            self.classifier_layers,
            self.activation,
            self.likelihood,
        )
    }
}
