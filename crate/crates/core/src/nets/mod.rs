//! Encoder, decoder and total-correlation classifier networks.
//!
//! The encoder maps a data vector to independent per-bit Bernoulli
//! probabilities. The decoder maps a (possibly corrupted) codeword to the
//! parameters of a per-pixel likelihood. The classifier maps a codeword to
//! the probability that it was drawn from the joint code distribution
//! rather than from the product of its marginals.

mod mlp;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use mlp::{Activation, Mlp, ParamStore};

use crate::diffcore::{Graph, NodeId, Scalar, Tensor, PROB_EPS};
use crate::error::{check_dim, Error, Result};

/// Clamps a probability into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Likelihood {
    Bernoulli,
    /// Unit variance, normalization constant dropped.
    Gaussian,
}

impl fmt::Display for Likelihood {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Likelihood::Bernoulli => "bernoulli",
            Likelihood::Gaussian => "gaussian",
        })
    }
}

impl FromStr for Likelihood {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Likelihood::Bernoulli),
            "gaussian" => Ok(Likelihood::Gaussian),
            other => Err(Error::Config(format!("unknown likelihood '{other}'"))),
        }
    }
}

/// Per-bit encoding probabilities, each clamped into `[1e-6, 1 - 1e-6]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BernoulliParams {
    probs: Vec<f64>,
}

impl BernoulliParams {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidArgument(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        Ok(Self {
            probs: probs.into_iter().map(clamp_prob).collect(),
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// A binary codeword, optionally carrying per-bit erasure marks.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitCode {
    bits: Vec<u8>,
    erased: Option<Vec<bool>>,
}

impl BitCode {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!(
                "bit value {b} not in {{0, 1}}"
            )));
        }
        Ok(Self { bits, erased: None })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![0; len],
            erased: None,
        }
    }

    pub(crate) fn with_erasures(bits: Vec<u8>, erased: Vec<bool>) -> Self {
        debug_assert_eq!(bits.len(), erased.len());
        Self {
            bits,
            erased: Some(erased),
        }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn erasures(&self) -> Option<&[bool]> {
        self.erased.as_deref()
    }

    pub fn is_erased(&self, i: usize) -> bool {
        self.erased.as_ref().is_some_and(|e| e[i])
    }

    pub fn erased_count(&self) -> usize {
        self.erased
            .as_ref()
            .map_or(0, |e| e.iter().filter(|&&x| x).count())
    }

    /// Real-valued view fed to the decoder; erased bits become 0.5.
    pub fn to_real(&self) -> Vec<f64> {
        (0..self.bits.len())
            .map(|i| {
                if self.is_erased(i) {
                    0.5
                } else {
                    self.bits[i] as f64
                }
            })
            .collect()
    }

    pub fn hamming(&self, other: &BitCode) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count()
    }
}

/// Reconstruction distribution parameters for one data vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput {
    pub likelihood: Likelihood,
    /// Bernoulli means or Gaussian means, one per pixel, in `[0, 1]`.
    pub means: Vec<f64>,
}

/// `log q(x | y)` in nats. The Gaussian normalization constant is dropped,
/// so that value equals `-½ ‖x − μ‖²`.
pub fn log_likelihood(x: &[f64], d: &DecoderOutput) -> Result<f64> {
    check_dim(d.means.len(), x.len())?;
    let ll: f64 = match d.likelihood {
        Likelihood::Bernoulli => x
            .iter()
            .zip(&d.means)
            .map(|(&x, &m)| {
                let m = clamp_prob(m);
                x * m.ln() + (1.0 - x) * (1.0 - m).ln()
            })
            .sum(),
        Likelihood::Gaussian => {
            -0.5 * x
                .iter()
                .zip(&d.means)
                .map(|(&x, &m)| (x - m) * (x - m))
                .sum::<f64>()
        }
    };
    if !ll.is_finite() {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    Ok(ll)
}

/// Draws `k` codewords, each bit independently with its own probability.
pub fn sample_codes<R: Rng>(p: &BernoulliParams, k: usize, rng: &mut R) -> Vec<BitCode> {
    (0..k)
        .map(|_| BitCode {
            bits: p
                .probs
                .iter()
                .map(|&pi| u8::from(rng.gen::<f64>() < pi))
                .collect(),
            erased: None,
        })
        .collect()
}

/// Batch sampler: each row of `probs` yields `k` consecutive rows of hard
/// 0/1 codes.
pub fn sample_code_batch<T: Scalar, R: Rng>(probs: &Tensor<T>, k: usize, rng: &mut R) -> Tensor<T> {
    let m = probs.cols();
    let mut out = Vec::with_capacity(probs.rows() * k * m);
    for r in 0..probs.rows() {
        let row = probs.row(r);
        for _ in 0..k {
            out.extend(row.iter().map(|p| {
                if rng.gen::<f64>() < p.f64() {
                    T::one()
                } else {
                    T::zero()
                }
            }));
        }
    }
    Tensor::matrix(probs.rows() * k, m, out).expect("sized above")
}

/// Layer widths for the three networks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub data_dim: usize,
    pub bits: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub classifier_hidden: usize,
    pub classifier_layers: usize,
    pub activation: Activation,
}

impl Architecture {
    /// Two hidden layers of 500 for encoder and decoder, 3×256 classifier.
    pub fn standard(data_dim: usize, bits: usize) -> Self {
        Self {
            data_dim,
            bits,
            hidden: 500,
            hidden_layers: 2,
            classifier_hidden: 256,
            classifier_layers: 3,
            activation: Activation::Softplus,
        }
    }

    pub fn encoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.data_dim];
        s.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        s.push(self.bits);
        s
    }

    pub fn decoder_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.bits];
        s.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        s.push(self.data_dim);
        s
    }

    pub fn classifier_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.bits];
        s.extend(std::iter::repeat_n(
            self.classifier_hidden,
            self.classifier_layers,
        ));
        s.push(1);
        s
    }
}

/// Encoder graph: `x → clamp(σ(f(x)))`.
#[derive(Clone, Debug)]
pub struct EncoderGraph<T> {
    pub graph: Graph<T>,
    pub x: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Decoder graph over a batch of codes and matching targets.
///
/// `loglik` is `rows × 1`. When built with a sample count `k`, consecutive
/// groups of `k` rows belong to the same data point and `bound` holds
/// `log (1/k) Σ q(x | y_i)` per data point, `total` its sum.
#[derive(Clone, Debug)]
pub struct DecoderGraph<T> {
    pub graph: Graph<T>,
    pub codes: NodeId,
    pub targets: NodeId,
    pub means: NodeId,
    pub loglik: NodeId,
    pub loglik_total: NodeId,
    pub bound: Option<NodeId>,
    pub total: Option<NodeId>,
}

/// Classifier applied to a batch of (hard or relaxed) codes.
#[derive(Clone, Debug)]
pub struct ClassifierGraph<T> {
    pub graph: Graph<T>,
    pub codes: NodeId,
    pub prob: NodeId,
}

/// Encoder, decoder and classifier sharing one parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct CodingModel<T> {
    pub arch: Architecture,
    pub likelihood: Likelihood,
    pub params: ParamStore<T>,
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub classifier: Mlp,
}

impl<T: Scalar> CodingModel<T> {
    pub fn new<R: Rng>(arch: Architecture, likelihood: Likelihood, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let encoder = Mlp::new(
            &mut params,
            "encoder",
            &arch.encoder_sizes(),
            arch.activation,
            rng,
        );
        let decoder = Mlp::new(
            &mut params,
            "decoder",
            &arch.decoder_sizes(),
            arch.activation,
            rng,
        );
        let classifier = Mlp::new(
            &mut params,
            "classifier",
            &arch.classifier_sizes(),
            arch.activation,
            rng,
        );
        Self {
            arch,
            likelihood,
            params,
            encoder,
            decoder,
            classifier,
        }
    }

    /// Rebuilds a model around existing parameter arrays, checking shapes.
    pub fn from_params(
        arch: Architecture,
        likelihood: Likelihood,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let encoder = Mlp::attach(&params, "encoder", &arch.encoder_sizes(), arch.activation)?;
        let decoder = Mlp::attach(&params, "decoder", &arch.decoder_sizes(), arch.activation)?;
        let classifier = Mlp::attach(
            &params,
            "classifier",
            &arch.classifier_sizes(),
            arch.activation,
        )?;
        Ok(Self {
            arch,
            likelihood,
            params,
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn cast<U: Scalar>(&self) -> CodingModel<U> {
        CodingModel {
            arch: self.arch.clone(),
            likelihood: self.likelihood,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            classifier: self.classifier.clone(),
        }
    }

    pub fn encoder_graph(&self) -> EncoderGraph<T> {
        let mut graph = Graph::new();
        let x = graph.input(Some(self.arch.data_dim), false);
        let logits = self.encoder.build(&mut graph, x);
        let s = graph.sigmoid(logits);
        let probs = graph.clamp(s, PROB_EPS, 1.0 - PROB_EPS);
        EncoderGraph {
            graph,
            x,
            logits,
            probs,
        }
    }

    pub fn decoder_graph(&self, k: Option<usize>) -> DecoderGraph<T> {
        let mut g = Graph::new();
        let codes = g.input(Some(self.arch.bits), true);
        let targets = g.input(Some(self.arch.data_dim), false);
        let out = self.decoder.build(&mut g, codes);
        let s = g.sigmoid(out);
        let (means, per_pixel) = match self.likelihood {
            Likelihood::Bernoulli => {
                let mu = g.clamp(s, PROB_EPS, 1.0 - PROB_EPS);
                let log_mu = g.log(mu);
                let one_minus_mu = g.one_minus(mu);
                let log_1m = g.log(one_minus_mu);
                let one_minus_x = g.one_minus(targets);
                let a = g.mul(targets, log_mu);
                let b = g.mul(one_minus_x, log_1m);
                (mu, g.add(a, b))
            }
            Likelihood::Gaussian => {
                let diff = g.sub(targets, s);
                let sq = g.mul(diff, diff);
                (s, g.scale(sq, -0.5))
            }
        };
        let loglik = g.sum_cols(per_pixel);
        let loglik_total = g.sum(loglik);
        let (bound, total) = match k {
            Some(k) => {
                let grouped = g.reshape(loglik, k);
                let lse = g.logsumexp(grouped);
                let bound = g.offset(lse, -(k as f64).ln());
                let total = g.sum(bound);
                (Some(bound), Some(total))
            }
            None => (None, None),
        };
        DecoderGraph {
            graph: g,
            codes,
            targets,
            means,
            loglik,
            loglik_total,
            bound,
            total,
        }
    }

    pub fn classifier_graph(&self) -> ClassifierGraph<T> {
        let mut graph = Graph::new();
        let codes = graph.input(Some(self.arch.bits), false);
        let prob = self.classifier_prob(&mut graph, codes);
        ClassifierGraph { graph, codes, prob }
    }

    /// Appends `clamp(σ(C(codes)))` to an existing graph.
    pub fn classifier_prob(&self, g: &mut Graph<T>, codes: NodeId) -> NodeId {
        let logit = self.classifier.build(g, codes);
        let s = g.sigmoid(logit);
        g.clamp(s, PROB_EPS, 1.0 - PROB_EPS)
    }

    pub fn encode_batch(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        check_dim(self.arch.data_dim, x.cols())?;
        let mut eg = self.encoder_graph();
        Ok(eg
            .graph
            .eval(self.params.tensors(), std::slice::from_ref(x), eg.probs)?)
    }

    pub fn encode(&self, x: &[f64]) -> Result<BernoulliParams> {
        check_dim(self.arch.data_dim, x.len())?;
        let t = Tensor::from_f64(1, x.len(), x)?;
        let probs = self.encode_batch(&t)?;
        BernoulliParams::new(probs.to_f64_vec())
    }

    /// Decoder means for a batch of real-valued codes.
    pub fn decode_batch(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        check_dim(self.arch.bits, codes.cols())?;
        let mut dg = self.decoder_graph(None);
        let targets = Tensor::zeros(&[codes.rows(), self.arch.data_dim]);
        Ok(dg
            .graph
            .eval(self.params.tensors(), &[codes.clone(), targets], dg.means)?)
    }

    pub fn decode(&self, y: &BitCode) -> Result<DecoderOutput> {
        check_dim(self.arch.bits, y.len())?;
        let t = Tensor::from_f64(1, y.len(), &y.to_real())?;
        let means = self.decode_batch(&t)?;
        Ok(DecoderOutput {
            likelihood: self.likelihood,
            means: means.to_f64_vec(),
        })
    }

    /// Classifier probabilities `C(y)` for a batch of codes, `rows × 1`.
    pub fn classify_batch(&self, codes: &Tensor<T>) -> Result<Tensor<T>> {
        check_dim(self.arch.bits, codes.cols())?;
        let mut cg = self.classifier_graph();
        Ok(cg
            .graph
            .eval(self.params.tensors(), std::slice::from_ref(codes), cg.prob)?)
    }

    pub fn encoder_slots(&self) -> Vec<usize> {
        self.encoder.slots()
    }

    pub fn decoder_slots(&self) -> Vec<usize> {
        self.decoder.slots()
    }

    pub fn classifier_slots(&self) -> Vec<usize> {
        self.classifier.slots()
    }
}
