//! Independent reference computations used to validate the estimators:
//! finite-difference checks on random networks, exhaustive enumeration of
//! small code spaces, and closed-form Bayes-optimal discriminators.

use rand::Rng;

use crate::diffcore::{grad_check, GradCheckReport, Graph, Tensor};
use crate::error::{check_dim, Error, Result};
use crate::nets::{clamp_prob, log_likelihood, Activation, BitCode, CodingModel, Mlp, ParamStore};
use crate::objectives::{log_mean_exp, vimco_gradients, Discriminator};

/// All `2^m` codewords of length `m`, bit `j` of index `i` is `(i >> j) & 1`.
pub fn all_codes(m: usize) -> Vec<BitCode> {
    (0..1usize << m)
        .map(|i| BitCode::new((0..m).map(|j| ((i >> j) & 1) as u8).collect()).expect("binary"))
        .collect()
}

/// Brute-force maximizer of `Σ c_i y_i` over `{0,1}^M`; ties keep the
/// lowest index.
pub fn exhaustive_argmax_linear(c: &[f64]) -> BitCode {
    let mut best: Option<(f64, BitCode)> = None;
    for y in all_codes(c.len()) {
        let v: f64 = y.bits().iter().zip(c).map(|(&b, ci)| b as f64 * ci).sum();
        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            best = Some((v, y));
        }
    }
    best.expect("at least one codeword").1
}

/// Finite-difference checks on `count` randomly shaped MLPs. Each network
/// gets a random depth, widths and activation, random inputs treated as
/// differentiable, and a nonlinear scalar head so every layer matters.
pub fn random_mlp_grad_checks<R: Rng>(
    count: usize,
    tolerance: f64,
    rng: &mut R,
) -> Result<Vec<GradCheckReport>> {
    let acts = [Activation::Softplus, Activation::Tanh, Activation::Sigmoid];
    let mut reports = Vec::with_capacity(count);
    for _ in 0..count {
        let depth = rng.gen_range(1..=3);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.gen_range(1..=6)).collect();
        let act = acts[rng.gen_range(0..acts.len())];
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "net", &sizes, act, rng);
        for t in 0..store.len() {
            for v in store.get_mut(t).data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut g = Graph::new();
        let x = g.input(Some(sizes[0]), true);
        let out = mlp.build(&mut g, x);
        let head = g.tanh(out);
        let rows = rng.gen_range(1..=4);
        let xs: Vec<f64> = (0..rows * sizes[0])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let xt = Tensor::from_f64(rows, sizes[0], &xs)?;
        reports.push(grad_check(&mut g, store.tensors(), &[xt], head, tolerance)?);
    }
    Ok(reports)
}

/// Exact `E[bound]` and its gradient w.r.t. the Bernoulli parameters `p`,
/// by summing over every K-tuple of codewords. Only feasible for `M·K`
/// up to about 20.
pub fn exact_bound_gradient(
    model: &CodingModel<f64>,
    x: &[f64],
    p: &[f64],
    k: usize,
) -> Result<(f64, Vec<f64>)> {
    let m = p.len();
    check_dim(model.arch.bits, m)?;
    if k == 0 || m * k > 20 {
        return Err(Error::InvalidArgument(format!(
            "enumeration over 2^{} tuples is not supported",
            m * k
        )));
    }
    let codes = all_codes(m);
    let p: Vec<f64> = p.iter().map(|&v| clamp_prob(v)).collect();
    let ll = codes
        .iter()
        .map(|y| log_likelihood(x, &model.decode(y)?))
        .collect::<Result<Vec<_>>>()?;
    let prob = |y: &BitCode| -> f64 {
        y.bits()
            .iter()
            .zip(&p)
            .map(|(&b, &pj)| if b == 1 { pj } else { 1.0 - pj })
            .product()
    };
    let probs: Vec<f64> = codes.iter().map(prob).collect();
    let n_codes = codes.len();
    let mut expectation = 0.0;
    let mut grad = vec![0.0; m];
    let mut idx = vec![0usize; k];
    let mut tuple_ll = vec![0.0; k];
    loop {
        let mut w = 1.0;
        for (s, &i) in idx.iter().enumerate() {
            w *= probs[i];
            tuple_ll[s] = ll[i];
        }
        let value = log_mean_exp(&tuple_ll)?;
        expectation += w * value;
        for (j, g) in grad.iter_mut().enumerate() {
            let score: f64 = idx
                .iter()
                .map(|&i| {
                    let y = codes[i].bits()[j] as f64;
                    (y - p[j]) / (p[j] * (1.0 - p[j]))
                })
                .sum();
            *g += w * value * score;
        }
        let mut pos = 0;
        loop {
            if pos == k {
                return Ok((expectation, grad));
            }
            idx[pos] += 1;
            if idx[pos] < n_codes {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VimcoCheck {
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    pub std_error: Vec<f64>,
    pub draws: usize,
}

impl VimcoCheck {
    /// Largest `|mean - exact| / SE` over coordinates.
    pub fn max_z(&self) -> f64 {
        self.exact
            .iter()
            .zip(&self.mean)
            .zip(&self.std_error)
            .map(|((e, m), s)| (m - e).abs() / s.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, z: f64) -> bool {
        self.max_z() <= z
    }
}

/// Runs the leave-one-out estimator `draws` times at a single `(x, p)` and
/// compares its mean with the enumeration oracle. Draws are batched
/// `chunk` rows at a time.
pub fn vimco_check<R: Rng>(
    model: &CodingModel<f64>,
    x: &[f64],
    p: &[f64],
    k: usize,
    draws: usize,
    chunk: usize,
    rng: &mut R,
) -> Result<VimcoCheck> {
    let m = p.len();
    let (_, exact) = exact_bound_gradient(model, x, p, k)?;
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut done = 0;
    while done < draws {
        let rows = chunk.min(draws - done);
        let xt = Tensor::from_f64(1, x.len(), x)?.repeat_rows(rows);
        let pt = Tensor::from_f64(1, m, p)?.repeat_rows(rows);
        let out = vimco_gradients(model, &xt, &pt, k, true, rng)?;
        let g = out.prob_grad.expect("requested");
        for r in 0..rows {
            for (j, v) in g.row(r).iter().enumerate() {
                sum[j] += v;
                sum_sq[j] += v * v;
            }
        }
        done += rows;
    }
    let n = draws as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_error = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| ((sq / n - mu * mu).max(0.0) * n / (n - 1.0) / n).sqrt())
        .collect();
    Ok(VimcoCheck {
        exact,
        mean,
        std_error,
        draws,
    })
}

/// Bayes-optimal joint-vs-product discriminator for a known distribution
/// over `{0,1}^M`: `C(y) = q(y) / (q(y) + Π_j q_j(y_j))`. Rows are read as
/// hard codes by thresholding at 0.5.
#[derive(Clone, Debug)]
pub struct BayesOptimal {
    joint: Vec<f64>,
    marginals: Vec<f64>,
}

impl BayesOptimal {
    /// `joint[i]` is the probability of the codeword with index `i` in
    /// the ordering of [`all_codes`].
    pub fn new(m: usize, joint: Vec<f64>) -> Result<Self> {
        check_dim(1 << m, joint.len())?;
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-9 || joint.iter().any(|&q| q < 0.0) {
            return Err(Error::InvalidArgument(
                "joint table is not a distribution".into(),
            ));
        }
        let marginals = (0..m)
            .map(|j| {
                joint
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| (i >> j) & 1 == 1)
                    .map(|(_, q)| q)
                    .sum()
            })
            .collect();
        Ok(Self { joint, marginals })
    }

    /// Exact total correlation `KL(q || Π q_j)` in nats.
    pub fn total_correlation(&self) -> f64 {
        self.joint
            .iter()
            .enumerate()
            .filter(|(_, &q)| q > 0.0)
            .map(|(i, &q)| q * (q / self.product(i)).ln())
            .sum()
    }

    fn product(&self, i: usize) -> f64 {
        self.marginals
            .iter()
            .enumerate()
            .map(|(j, &q)| if (i >> j) & 1 == 1 { q } else { 1.0 - q })
            .product()
    }

    fn index(row: &[f64]) -> usize {
        row.iter()
            .enumerate()
            .map(|(j, &v)| usize::from(v > 0.5) << j)
            .sum()
    }
}

impl Discriminator for BayesOptimal {
    fn discriminate(&self, codes: &Tensor<f64>) -> Result<Vec<f64>> {
        check_dim(self.marginals.len(), codes.cols())?;
        Ok((0..codes.rows())
            .map(|r| {
                let i = Self::index(codes.row(r));
                let (q, prod) = (self.joint[i], self.product(i));
                if q + prod == 0.0 {
                    0.5
                } else {
                    q / (q + prod)
                }
            })
            .collect())
    }
}
