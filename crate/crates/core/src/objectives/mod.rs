//! Loss components: adversarial bit-flip masks, the infomax entropy and
//! total-correlation terms, and the multi-sample reconstruction bound with
//! its leave-one-out score-function gradient.
//!
//! Entropies are in nats. "Reconstruction loss" always means the negative
//! log-likelihood, so flip masks point in the loss-increasing direction.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::diffcore::{logsumexp, Graph, NodeId, Scalar, Tensor, Wrt, PROB_EPS};
use crate::error::{check_dim, Error, Result};
use crate::nets::{clamp_prob, log_likelihood, sample_code_batch, BitCode, CodingModel};

/// Per-bit attack indicator: 1 where flipping the bit raises the loss.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FlipMask {
    bits: Vec<u8>,
}

impl FlipMask {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidArgument(format!("mask entry {b} is not 0/1")));
        }
        Ok(Self { bits })
    }

    pub fn zeros(len: usize) -> Self {
        Self { bits: vec![0; len] }
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

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

impl AsRef<[u8]> for FlipMask {
    fn as_ref(&self) -> &[u8] {
        &self.bits
    }
}

/// `m_i = 1` iff `(y_i = 0, g_i > 0)` or `(y_i = 1, g_i < 0)`. A zero
/// gradient never marks a bit.
pub fn flip_mask(y: &BitCode, loss_grad: &[f64]) -> Result<FlipMask> {
    check_dim(y.len(), loss_grad.len())?;
    if loss_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("code gradient".into()));
    }
    let bits = y
        .bits()
        .iter()
        .zip(loss_grad)
        .map(|(&b, &g)| u8::from((b == 0 && g > 0.0) || (b == 1 && g < 0.0)))
        .collect();
    Ok(FlipMask { bits })
}

/// `ŷ = y ⊕ m`.
pub fn apply_flip(y: &BitCode, m: &FlipMask) -> Result<BitCode> {
    check_dim(y.len(), m.len())?;
    BitCode::new(y.bits().iter().zip(&m.bits).map(|(a, b)| a ^ b).collect())
}

/// Bitwise majority over several masks; ties resolve to 0.
pub fn majority_mask(masks: &[FlipMask]) -> Result<FlipMask> {
    let Some(first) = masks.first() else {
        return Err(Error::InvalidArgument("no masks to combine".into()));
    };
    let m = first.len();
    let mut counts = vec![0usize; m];
    for mask in masks {
        check_dim(m, mask.len())?;
        for (c, &b) in counts.iter_mut().zip(&mask.bits) {
            *c += b as usize;
        }
    }
    Ok(FlipMask {
        bits: counts
            .into_iter()
            .map(|c| u8::from(2 * c > masks.len()))
            .collect(),
    })
}

/// `-p ln p - (1-p) ln(1-p)` with `p` clamped into the open interval.
pub fn binary_entropy(p: f64) -> f64 {
    let p = clamp_prob(p);
    -p * p.ln() - (1.0 - p) * (1.0 - p).ln()
}

fn check_batch<T: Scalar>(probs: &Tensor<T>) -> Result<()> {
    if probs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

/// `H(mean_i p_id)` per bit.
pub fn marginal_entropy<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<f64>> {
    check_batch(probs)?;
    let n = probs.rows() as f64;
    let mut sums = vec![0.0; probs.cols()];
    for r in 0..probs.rows() {
        for (s, p) in sums.iter_mut().zip(probs.row(r)) {
            *s += p.f64();
        }
    }
    Ok(sums.into_iter().map(|s| binary_entropy(s / n)).collect())
}

/// `mean_i H(p_id)` per bit.
pub fn conditional_entropy<T: Scalar>(probs: &Tensor<T>) -> Result<Vec<f64>> {
    check_batch(probs)?;
    let n = probs.rows() as f64;
    let mut sums = vec![0.0; probs.cols()];
    for r in 0..probs.rows() {
        for (s, p) in sums.iter_mut().zip(probs.row(r)) {
            *s += binary_entropy(p.f64());
        }
    }
    Ok(sums.into_iter().map(|s| s / n).collect())
}

/// Graph form of [`marginal_entropy`], `1 × M`.
pub fn marginal_entropy_node<T: Scalar>(g: &mut Graph<T>, probs: NodeId) -> NodeId {
    let mean = g.mean_rows(probs);
    let mean = g.clamp(mean, PROB_EPS, 1.0 - PROB_EPS);
    g.binary_entropy(mean)
}

/// Graph form of [`conditional_entropy`], `1 × M`.
pub fn conditional_entropy_node<T: Scalar>(g: &mut Graph<T>, probs: NodeId) -> NodeId {
    let p = g.clamp(probs, PROB_EPS, 1.0 - PROB_EPS);
    let h = g.binary_entropy(p);
    g.mean_rows(h)
}

/// Shuffles each column independently across the batch, giving samples
/// from the product of the per-bit marginals.
pub fn permute_per_dimension<T: Scalar, R: Rng>(
    codes: &Tensor<T>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let (n, m) = (codes.rows(), codes.cols());
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rows to permute, got {n}"
        )));
    }
    let mut out = codes.clone();
    let mut order: Vec<usize> = (0..n).collect();
    let src = codes.data();
    let dst = out.data_mut();
    for c in 0..m {
        order.shuffle(rng);
        for (r, &from) in order.iter().enumerate() {
            dst[r * m + c] = src[from * m + c];
        }
    }
    Ok(out)
}

/// Anything that scores codes with `C(y) ∈ (0, 1)`, the probability that
/// `y` came from the joint code distribution rather than the product of
/// its marginals.
pub trait Discriminator {
    fn discriminate(&self, codes: &Tensor<f64>) -> Result<Vec<f64>>;
}

impl<T: Scalar> Discriminator for CodingModel<T> {
    fn discriminate(&self, codes: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok(self.classify_batch(&codes.cast())?.to_f64_vec())
    }
}

/// Adapts a per-row closure into a [`Discriminator`].
pub struct FnDiscriminator<F>(pub F);

impl<F: Fn(&[f64]) -> f64> Discriminator for FnDiscriminator<F> {
    fn discriminate(&self, codes: &Tensor<f64>) -> Result<Vec<f64>> {
        Ok((0..codes.rows()).map(|r| (self.0)(codes.row(r))).collect())
    }
}

fn scores<D: Discriminator + ?Sized>(c: &D, codes: &Tensor<f64>) -> Result<Vec<f64>> {
    let s = c.discriminate(codes)?;
    check_dim(codes.rows(), s.len())?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier output".into()));
    }
    Ok(s.into_iter().map(clamp_prob).collect())
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// `E log C(y) + E log(1 - C(y*))`, the quantity the classifier maximizes.
pub fn classifier_loss<D: Discriminator + ?Sized>(
    real: &Tensor<f64>,
    permuted: &Tensor<f64>,
    c: &D,
) -> Result<f64> {
    check_dim(real.cols(), permuted.cols())?;
    if real.rows() == 0 || permuted.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let a = scores(c, real)?;
    let b = scores(c, permuted)?;
    Ok(mean(a.into_iter().map(f64::ln)) + mean(b.into_iter().map(|v| (1.0 - v).ln())))
}

/// Total-correlation estimate `E log(C / (1 - C))`.
pub fn tc_estimate<D: Discriminator + ?Sized>(codes: &Tensor<f64>, c: &D) -> Result<f64> {
    if codes.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let s = scores(c, codes)?;
    Ok(mean(s.into_iter().map(|v| (v / (1.0 - v)).ln())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfoLossReport {
    pub marginal: Vec<f64>,
    pub conditional: Vec<f64>,
    pub tc: f64,
    /// `Σ_d (H(Y_d) - H(Y_d|X)) - TC`.
    pub total: f64,
}

impl InfoLossReport {
    /// `Σ_d (H(Y_d) - H(Y_d|X))`.
    pub fn mi_sum(&self) -> f64 {
        self.marginal
            .iter()
            .zip(&self.conditional)
            .map(|(a, b)| a - b)
            .sum()
    }
}

/// Assembles the infomax term. `codes` is what the discriminator sees,
/// typically the relaxed probabilities themselves.
pub fn info_loss<T: Scalar, D: Discriminator + ?Sized>(
    probs: &Tensor<T>,
    codes: &Tensor<f64>,
    c: &D,
) -> Result<InfoLossReport> {
    check_dim(probs.cols(), codes.cols())?;
    let marginal = marginal_entropy(probs)?;
    let conditional = conditional_entropy(probs)?;
    let tc = tc_estimate(codes, c)?;
    let mut report = InfoLossReport {
        marginal,
        conditional,
        tc,
        total: 0.0,
    };
    report.total = report.mi_sum() - tc;
    Ok(report)
}

/// Differentiable infomax term over a batch of encoder probabilities,
/// with the classifier scoring the probabilities directly.
pub struct InfoGraph<T> {
    pub graph: Graph<T>,
    pub probs: NodeId,
    /// `Σ_d (H(Y_d) - H(Y_d|X))`, 1×1.
    pub mi_sum: NodeId,
    /// `mean log(C / (1 - C))`, 1×1.
    pub tc: NodeId,
    /// `mi_sum - tc`, 1×1.
    pub total: NodeId,
}

pub fn info_graph<T: Scalar>(model: &CodingModel<T>) -> InfoGraph<T> {
    let mut g = Graph::new();
    let probs = g.input(Some(model.arch.bits), true);
    let hm = marginal_entropy_node(&mut g, probs);
    let hc = conditional_entropy_node(&mut g, probs);
    let mi = g.sub(hm, hc);
    let mi_sum = g.sum(mi);
    let c = model.classifier_prob(&mut g, probs);
    let lc = g.log(c);
    let one_minus = g.one_minus(c);
    let l1m = g.log(one_minus);
    let odds = g.sub(lc, l1m);
    let tc = g.mean_rows(odds);
    let total = g.sub(mi_sum, tc);
    InfoGraph {
        graph: g,
        probs,
        mi_sum,
        tc,
        total,
    }
}

/// Classifier objective `mean log C(real) + mean log(1 - C(permuted))`.
pub struct ClassifierLossGraph<T> {
    pub graph: Graph<T>,
    pub real: NodeId,
    pub permuted: NodeId,
    pub objective: NodeId,
}

pub fn classifier_loss_graph<T: Scalar>(model: &CodingModel<T>) -> ClassifierLossGraph<T> {
    let mut g = Graph::new();
    let real = g.input(Some(model.arch.bits), false);
    let permuted = g.input(Some(model.arch.bits), false);
    let cr = model.classifier_prob(&mut g, real);
    let cp = model.classifier_prob(&mut g, permuted);
    let lr = g.log(cr);
    let a = g.mean_rows(lr);
    let one_minus = g.one_minus(cp);
    let lp = g.log(one_minus);
    let b = g.mean_rows(lp);
    let objective = g.add(a, b);
    ClassifierLossGraph {
        graph: g,
        real,
        permuted,
        objective,
    }
}

/// `log (1/K) Σ_k exp(ℓ_k)`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("log-likelihood".into()));
    }
    Ok(logsumexp(values.iter().copied()) - (values.len() as f64).ln())
}

/// `log (1/K) Σ_k q(x | y_k)` for one data point.
pub fn multisample_bound<T: Scalar>(
    x: &[f64],
    codes: &[BitCode],
    model: &CodingModel<T>,
) -> Result<f64> {
    let ll = codes
        .iter()
        .map(|y| log_likelihood(x, &model.decode(y)?))
        .collect::<Result<Vec<_>>>()?;
    log_mean_exp(&ll)
}

/// Leave-one-out learning signals `L - L_{-k}` for one group of K
/// log-likelihoods, where `L_{-k}` swaps `ℓ_k` for the mean of the rest.
pub fn vimco_signals(ll: &[f64]) -> Result<Vec<f64>> {
    let k = ll.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out baselines need K >= 2, got {k}"
        )));
    }
    let full = log_mean_exp(ll)?;
    let total: f64 = ll.iter().sum();
    let mut swapped = ll.to_vec();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let others = (total - ll[i]) / (k - 1) as f64;
        swapped[i] = others;
        out.push(full - log_mean_exp(&swapped)?);
        swapped[i] = ll[i];
    }
    Ok(out)
}

/// Result of one multi-sample pass over a batch.
#[derive(Clone, Debug)]
pub struct VimcoOutput<T> {
    /// Per-example bound values.
    pub bounds: Vec<f64>,
    /// Gradient of `Σ_i bound_i` w.r.t. the Bernoulli parameters, `N × M`.
    pub prob_grad: Option<Tensor<T>>,
    /// Gradient of `Σ_i bound_i` w.r.t. decoder parameters, by slot.
    pub decoder_grads: BTreeMap<usize, Tensor<T>>,
    /// The sampled codes, `N·K × M`, K consecutive rows per example.
    pub codes: Tensor<T>,
    /// Decoder means for every sampled code, `N·K × n`.
    pub means: Tensor<T>,
}

/// Draws K codes per row of `probs`, evaluates the bound and returns its
/// gradients. Decoder gradients are exact backpropagation through the
/// bound; the Bernoulli-parameter gradient is the score-function estimate
/// `Σ_k (L - L_{-k}) ∂ log p(y_k) / ∂p`.
pub fn vimco_gradients<T: Scalar, R: Rng>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    probs: &Tensor<T>,
    k: usize,
    want_prob_grad: bool,
    rng: &mut R,
) -> Result<VimcoOutput<T>> {
    let codes = sample_code_batch(probs, k, rng);
    vimco_from_codes(model, x, probs, codes, k, want_prob_grad)
}

/// [`vimco_gradients`] with the codes supplied by the caller.
pub fn vimco_from_codes<T: Scalar>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    probs: &Tensor<T>,
    codes: Tensor<T>,
    k: usize,
    want_prob_grad: bool,
) -> Result<VimcoOutput<T>> {
    let (n, m) = (probs.rows(), probs.cols());
    check_dim(model.arch.bits, m)?;
    check_dim(model.arch.data_dim, x.cols())?;
    check_dim(n, x.rows())?;
    check_dim(n * k, codes.rows())?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if want_prob_grad && k < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out baselines need K >= 2, got {k}"
        )));
    }
    let mut dg = model.decoder_graph(Some(k));
    let total = dg.total.expect("bound requested");
    let bound = dg.bound.expect("bound requested");
    dg.graph
        .forward(model.params.tensors(), &[codes.clone(), x.repeat_rows(k)])
        .map_err(|e| Error::NonFinite(format!("decoder forward: {e}")))?;
    let bounds = dg.graph.value(bound)?.to_f64_vec();
    let ll = dg.graph.value(dg.loglik)?.to_f64_vec();
    let means = dg.graph.value(dg.means)?.clone();
    let grads = dg
        .graph
        .backward(total, Tensor::scalar(T::one()), Wrt::Params)?;
    let decoder_grads = model
        .decoder_slots()
        .into_iter()
        .filter_map(|s| grads.params.get(&s).map(|g| (s, g.clone())))
        .collect();

    let prob_grad = if want_prob_grad {
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let signals = vimco_signals(&ll[i * k..(i + 1) * k])?;
            let p = probs.row(i);
            for (s, sig) in signals.iter().enumerate() {
                let y = codes.row(i * k + s);
                for j in 0..m {
                    let pj = clamp_prob(p[j].f64());
                    let score = (y[j].f64() - pj) / (pj * (1.0 - pj));
                    out[i * m + j] = out[i * m + j] + T::of(sig * score);
                }
            }
        }
        Some(Tensor::matrix(n, m, out)?)
    } else {
        None
    };
    Ok(VimcoOutput {
        bounds,
        prob_grad,
        decoder_grads,
        codes,
        means,
    })
}

/// Gradient of the reconstruction loss `-log q(x|y)` w.r.t. each code row,
/// with the codes treated as real vectors. `codes` holds K consecutive
/// rows per row of `x`. Also returns the per-row log-likelihoods.
pub fn code_loss_gradients<T: Scalar>(
    model: &CodingModel<T>,
    x: &Tensor<T>,
    codes: &Tensor<T>,
    k: usize,
) -> Result<(Tensor<T>, Vec<f64>)> {
    check_dim(x.rows() * k, codes.rows())?;
    let mut dg = model.decoder_graph(None);
    dg.graph
        .forward(model.params.tensors(), &[codes.clone(), x.repeat_rows(k)])
        .map_err(|e| Error::NonFinite(format!("decoder forward: {e}")))?;
    let ll = dg.graph.value(dg.loglik)?.to_f64_vec();
    let grads = dg
        .graph
        .backward(dg.loglik_total, Tensor::scalar(-T::one()), Wrt::Inputs)?;
    let g = grads.inputs[0].clone().expect("codes are differentiable");
    Ok((g, ll))
}

/// Per-example attack plan from K clean samples: the majority of the
/// per-sample flip masks and the absolute K-averaged code gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackPlan {
    pub mask: FlipMask,
    pub magnitudes: Vec<f64>,
}

pub fn attack_plans<T: Scalar>(
    codes: &Tensor<T>,
    loss_grad: &Tensor<T>,
    k: usize,
) -> Result<Vec<AttackPlan>> {
    check_dim(codes.rows(), loss_grad.rows())?;
    check_dim(codes.cols(), loss_grad.cols())?;
    if k == 0 || !codes.rows().is_multiple_of(k) {
        return Err(Error::InvalidArgument(format!(
            "{} code rows do not split into groups of {k}",
            codes.rows()
        )));
    }
    let m = codes.cols();
    (0..codes.rows() / k)
        .map(|i| {
            let mut masks = Vec::with_capacity(k);
            let mut avg = vec![0.0; m];
            for s in 0..k {
                let r = i * k + s;
                let y = BitCode::new(
                    codes
                        .row(r)
                        .iter()
                        .map(|v| u8::from(v.f64() > 0.5))
                        .collect(),
                )?;
                let g: Vec<f64> = loss_grad.row(r).iter().map(|v| v.f64()).collect();
                masks.push(flip_mask(&y, &g)?);
                for (a, gi) in avg.iter_mut().zip(&g) {
                    *a += gi / k as f64;
                }
            }
            Ok(AttackPlan {
                mask: majority_mask(&masks)?,
                magnitudes: avg.into_iter().map(f64::abs).collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests;
