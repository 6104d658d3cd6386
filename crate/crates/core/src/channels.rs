//! Discrete channel models.
//!
//! The sampling channels ([`bsc_corrupt`], [`bec_corrupt`]) act on hard
//! codewords and are what evaluation uses. The relaxations
//! ([`perturbed_bernoulli`], [`adversarial_perturbed_bernoulli`]) act on
//! encoder probabilities and are what training differentiates through:
//! flipping a Bernoulli(p) bit with probability ε yields a Bernoulli bit
//! with parameter `p(1 − 2ε) + ε`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::diffcore::{Scalar, Tensor};
use crate::error::{check_dim, Error, Result};
use crate::nets::{BernoulliParams, BitCode};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelKind {
    Bsc,
    Bec,
    /// Gradient-guided bit flips; a training-time construct only.
    Adversarial,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Bsc => "bsc",
            ChannelKind::Bec => "bec",
            ChannelKind::Adversarial => "adversarial",
        })
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsc" => Ok(ChannelKind::Bsc),
            "bec" => Ok(ChannelKind::Bec),
            "adversarial" => Ok(ChannelKind::Adversarial),
            other => Err(Error::Config(format!("unknown channel '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub epsilon: f64,
}

impl ChannelSpec {
    pub fn new(kind: ChannelKind, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self { kind, epsilon })
    }

    pub fn bsc(epsilon: f64) -> Result<Self> {
        Self::new(ChannelKind::Bsc, epsilon)
    }

    pub fn bec(epsilon: f64) -> Result<Self> {
        Self::new(ChannelKind::Bec, epsilon)
    }

    /// Applies the exact sampling channel to a hard codeword.
    pub fn corrupt<R: Rng>(&self, y: &BitCode, rng: &mut R) -> Result<BitCode> {
        match self.kind {
            ChannelKind::Bsc => bsc_corrupt(y, self.epsilon, rng),
            ChannelKind::Bec => bec_corrupt(y, self.epsilon, rng),
            ChannelKind::Adversarial => Err(Error::InvalidArgument(
                "the adversarial channel has no sampling form".into(),
            )),
        }
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.kind, self.epsilon)
    }
}

pub fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "channel noise {epsilon} outside [0, 0.5]"
        )));
    }
    Ok(())
}

/// Flips each bit independently with probability `epsilon`. No randomness
/// is consumed when `epsilon` is 0.
pub fn bsc_corrupt<R: Rng>(y: &BitCode, epsilon: f64, rng: &mut R) -> Result<BitCode> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(y.clone());
    }
    let bits = y
        .bits()
        .iter()
        .map(|&b| if rng.gen::<f64>() < epsilon { 1 - b } else { b })
        .collect();
    BitCode::new(bits)
}

/// Erases each bit independently with probability `epsilon`; surviving
/// bits pass unchanged. Erased positions keep their original value in
/// `bits()` but are flagged.
pub fn bec_corrupt<R: Rng>(y: &BitCode, epsilon: f64, rng: &mut R) -> Result<BitCode> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(y.clone());
    }
    let erased = (0..y.len()).map(|_| rng.gen::<f64>() < epsilon).collect();
    Ok(BitCode::with_erasures(y.bits().to_vec(), erased))
}

/// Batch BSC on rows of hard 0/1 codes.
pub fn bsc_corrupt_batch<T: Scalar, R: Rng>(
    codes: &mut Tensor<T>,
    epsilon: f64,
    rng: &mut R,
) -> Result<()> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(());
    }
    for v in codes.data_mut() {
        if rng.gen::<f64>() < epsilon {
            *v = T::one() - *v;
        }
    }
    Ok(())
}

/// Batch BEC on rows of hard 0/1 codes; erased entries become 0.5.
pub fn bec_corrupt_batch<T: Scalar, R: Rng>(
    codes: &mut Tensor<T>,
    epsilon: f64,
    rng: &mut R,
) -> Result<()> {
    check_epsilon(epsilon)?;
    if epsilon == 0.0 {
        return Ok(());
    }
    let half = T::of(0.5);
    for v in codes.data_mut() {
        if rng.gen::<f64>() < epsilon {
            *v = half;
        }
    }
    Ok(())
}

#[inline]
pub fn flip_relaxation(p: f64, eps: f64) -> f64 {
    p * (1.0 - 2.0 * eps) + eps
}

/// `p'_i = p_i (1 − 2ε) + ε`: the bit distribution after a BSC.
pub fn perturbed_bernoulli(p: &BernoulliParams, epsilon: f64) -> Result<BernoulliParams> {
    check_epsilon(epsilon)?;
    BernoulliParams::new(
        p.probs()
            .iter()
            .map(|&pi| flip_relaxation(pi, epsilon))
            .collect(),
    )
}

/// Per-bit noise levels, already multiplied by the flip mask.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseAllocation {
    levels: Vec<f64>,
}

impl NoiseAllocation {
    pub fn new(levels: Vec<f64>) -> Result<Self> {
        if let Some(l) = levels.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::InvalidArgument(format!(
                "noise level {l} outside [0, 1]"
            )));
        }
        Ok(Self { levels })
    }

    pub fn uniform(m: usize, epsilon: f64) -> Result<Self> {
        check_epsilon(epsilon)?;
        Ok(Self {
            levels: vec![epsilon; m],
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.levels.iter().sum()
    }
}

/// Splits the budget `M·ε` across bits in proportion to `magnitudes`,
/// capping each level at 1 and handing the excess to the uncapped bits in
/// the same proportions until nothing exceeds the cap. Levels are then
/// zeroed wherever `mask` is 0.
///
/// All-zero magnitudes fall back to the uniform level `ε`. Excess that
/// cannot be placed proportionally (every uncapped bit has zero magnitude)
/// is spread evenly over those bits.
pub fn allocate_adversarial_noise(
    magnitudes: &[f64],
    epsilon: f64,
    mask: impl AsRef<[u8]>,
) -> Result<NoiseAllocation> {
    check_epsilon(epsilon)?;
    let mask = mask.as_ref();
    check_dim(magnitudes.len(), mask.len())?;
    if let Some(g) = magnitudes.iter().find(|g| !g.is_finite() || **g < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "gradient magnitude {g} is not a finite non-negative number"
        )));
    }
    let m = magnitudes.len();
    let raw = proportional_levels(magnitudes, m as f64 * epsilon, epsilon);
    let levels = raw
        .into_iter()
        .zip(mask)
        .map(|(e, &b)| if b == 1 { e } else { 0.0 })
        .collect();
    NoiseAllocation::new(levels)
}

fn proportional_levels(magnitudes: &[f64], budget: f64, epsilon: f64) -> Vec<f64> {
    let m = magnitudes.len();
    if magnitudes.iter().all(|&g| g == 0.0) {
        return vec![epsilon; m];
    }
    let mut levels = vec![0.0; m];
    let mut capped = vec![false; m];
    loop {
        let remaining = budget - capped.iter().filter(|&&c| c).count() as f64;
        let free: Vec<usize> = (0..m).filter(|&i| !capped[i]).collect();
        if free.is_empty() {
            break;
        }
        let total: f64 = free.iter().map(|&i| magnitudes[i]).sum();
        let mut changed = false;
        for &i in &free {
            let share = if total > 0.0 {
                remaining * magnitudes[i] / total
            } else {
                remaining / free.len() as f64
            };
            if share > 1.0 {
                capped[i] = true;
                changed = true;
            }
            levels[i] = share.min(1.0);
        }
        if !changed {
            break;
        }
        for i in 0..m {
            if capped[i] {
                levels[i] = 1.0;
            }
        }
    }
    levels
}

/// Per-bit relaxation `p'_i = p_i (1 − 2ε*_i) + ε*_i`.
pub fn adversarial_perturbed_bernoulli(
    p: &BernoulliParams,
    a: &NoiseAllocation,
) -> Result<BernoulliParams> {
    check_dim(p.len(), a.len())?;
    BernoulliParams::new(
        p.probs()
            .iter()
            .zip(a.levels())
            .map(|(&pi, &e)| flip_relaxation(pi, e))
            .collect(),
    )
}
