use std::f64::consts::LN_2;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::grad_check;
use crate::nets::{Activation, Architecture, BernoulliParams, Likelihood};
use crate::oracles::{exhaustive_argmax_linear, BayesOptimal};

fn code(bits: &[u8]) -> BitCode {
    BitCode::new(bits.to_vec()).unwrap()
}

fn tiny_model(n: usize, m: usize, lik: Likelihood, seed: u64) -> CodingModel<f64> {
    let arch = Architecture {
        data_dim: n,
        bits: m,
        hidden: 5,
        hidden_layers: 1,
        classifier_hidden: 4,
        classifier_layers: 2,
        activation: Activation::Tanh,
    };
    CodingModel::new(arch, lik, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn half() -> FnDiscriminator<impl Fn(&[f64]) -> f64> {
    FnDiscriminator(|_: &[f64]| 0.5)
}

#[test]
fn flip_mask_examples() {
    let m = flip_mask(&code(&[0, 1, 1]), &[1.0, -2.0, 3.0]).unwrap();
    assert_eq!(m.bits(), &[1, 1, 0]);
    assert_eq!(
        flip_mask(&code(&[0, 1, 1]), &[0.0; 3]).unwrap(),
        FlipMask::zeros(3)
    );
    assert_eq!(flip_mask(&code(&[1]), &[5.0]).unwrap().bits(), &[0]);
    assert!(matches!(
        flip_mask(&code(&[1, 0]), &[f64::NAN, 1.0]),
        Err(Error::NonFinite(_))
    ));
    assert!(flip_mask(&code(&[1, 0]), &[1.0]).is_err());
}

#[test]
fn apply_flip_examples() {
    let y = code(&[0, 1, 1]);
    assert_eq!(apply_flip(&y, &FlipMask::zeros(3)).unwrap(), y);
    let m = flip_mask(&y, &[1.0, -2.0, 3.0]).unwrap();
    let flipped = apply_flip(&y, &m).unwrap();
    assert_eq!(flipped.bits(), &[1, 0, 1]);
    assert_eq!(flipped, exhaustive_argmax_linear(&[1.0, -2.0, 3.0]));
}

#[test]
fn flip_reaches_exhaustive_argmax_for_linear_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for m in 1..=10 {
        for _ in 0..4 {
            let c: Vec<f64> = (0..m)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.1..3.0);
                    if rng.gen() {
                        v
                    } else {
                        -v
                    }
                })
                .collect();
            let y = BitCode::new((0..m).map(|_| rng.gen_range(0..=1)).collect()).unwrap();
            let yhat = apply_flip(&y, &flip_mask(&y, &c).unwrap()).unwrap();
            assert_eq!(yhat, exhaustive_argmax_linear(&c), "M={m}");
        }
    }
}

#[test]
fn majority_mask_votes_per_bit() {
    let masks = [
        FlipMask::new(vec![1, 0, 1]).unwrap(),
        FlipMask::new(vec![1, 1, 0]).unwrap(),
        FlipMask::new(vec![0, 0, 1]).unwrap(),
    ];
    assert_eq!(majority_mask(&masks).unwrap().bits(), &[1, 0, 1]);
    let tie = [
        FlipMask::new(vec![1]).unwrap(),
        FlipMask::new(vec![0]).unwrap(),
    ];
    assert_eq!(majority_mask(&tie).unwrap().bits(), &[0]);
    assert!(majority_mask(&[]).is_err());
    assert!(FlipMask::new(vec![2]).is_err());
}

#[test]
fn entropy_examples() {
    let p = Tensor::<f64>::from_f64(3, 2, &[0.5; 6]).unwrap();
    for h in marginal_entropy(&p)
        .unwrap()
        .into_iter()
        .chain(conditional_entropy(&p).unwrap())
    {
        assert!((h - LN_2).abs() < 1e-12);
    }
    let p = Tensor::<f64>::from_f64(2, 1, &[0.0, 1.0]).unwrap();
    assert!((marginal_entropy(&p).unwrap()[0] - LN_2).abs() < 1e-12);
    assert!(conditional_entropy(&p).unwrap()[0] < 1e-4);

    let p = Tensor::<f64>::from_f64(2, 1, &[0.2, 0.8]).unwrap();
    assert!((marginal_entropy(&p).unwrap()[0] - LN_2).abs() < 1e-6);
    // closed form: -0.2 ln 0.2 - 0.8 ln 0.8
    let h02 = -(0.2f64 * 0.2f64.ln() + 0.8 * 0.8f64.ln());
    assert!((h02 - 0.500402).abs() < 1e-6);
    assert!((conditional_entropy(&p).unwrap()[0] - h02).abs() < 1e-12);
    assert!(marginal_entropy(&Tensor::<f64>::zeros(&[0, 3])).is_err());
}

#[test]
fn entropy_nodes_match_plain_functions_and_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = tiny_model(3, 4, Likelihood::Gaussian, 2);
    let vals: Vec<f64> = (0..20).map(|_| rng.gen_range(0.05..0.95)).collect();
    let p = Tensor::<f64>::from_f64(5, 4, &vals).unwrap();

    let mut ig = info_graph(&model);
    ig.graph
        .forward(model.params.tensors(), std::slice::from_ref(&p))
        .unwrap();
    let mi = ig.graph.value(ig.mi_sum).unwrap().item();
    let tc = ig.graph.value(ig.tc).unwrap().item();
    let report = info_loss(&p, &p, &model).unwrap();
    assert!((mi - report.mi_sum()).abs() < 1e-12);
    assert!((tc - report.tc).abs() < 1e-12);
    assert!((ig.graph.value(ig.total).unwrap().item() - report.total).abs() < 1e-12);

    let r = grad_check(&mut ig.graph, model.params.tensors(), &[p], ig.total, 1e-4).unwrap();
    assert!(r.passed(), "{}", r.max_rel_error());
}

#[test]
fn permute_rejects_single_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(permute_per_dimension(&Tensor::<f64>::zeros(&[1, 3]), &mut rng).is_err());
}

#[test]
fn permute_keeps_constant_columns_and_histograms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vals: Vec<f64> = (0..40)
        .map(|i| if i % 4 == 0 { 7.0 } else { rng.gen() })
        .collect();
    let t = Tensor::<f64>::from_f64(10, 4, &vals).unwrap();
    let out = permute_per_dimension(&t, &mut rng).unwrap();
    for c in 0..4 {
        let mut a: Vec<f64> = (0..10).map(|r| t.row(r)[c]).collect();
        let mut b: Vec<f64> = (0..10).map(|r| out.row(r)[c]).collect();
        if c == 0 {
            assert!(b.iter().all(|&v| v == 7.0));
        }
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }
}

/// Each column's row ordering should be uniform over the 3! orderings.
#[test]
fn permute_orderings_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = Tensor::<f64>::from_f64(3, 2, &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0]).unwrap();
    let trials = 10_000;
    let mut counts = [[0usize; 6]; 2];
    for _ in 0..trials {
        let out = permute_per_dimension(&t, &mut rng).unwrap();
        for (c, cnt) in counts.iter_mut().enumerate() {
            let order: Vec<usize> = (0..3).map(|r| (out.row(r)[c] as usize) % 10).collect();
            let idx = order[0] * 2 + usize::from(order[1] > order[2]);
            cnt[idx] += 1;
        }
    }
    let expected = trials as f64 / 6.0;
    for cnt in counts {
        let chi2: f64 = cnt
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // df = 5, p = 0.001
        assert!(chi2 < 20.52, "{cnt:?}");
    }
}

#[test]
fn classifier_loss_examples() {
    let real = Tensor::<f64>::from_f64(2, 2, &[0.0, 0.0, 1.0, 1.0]).unwrap();
    let perm = Tensor::<f64>::from_f64(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let v = classifier_loss(&real, &perm, &half()).unwrap();
    assert!((v + 1.386294).abs() < 1e-6);

    // separable batches, near-perfect classifier
    let sep = FnDiscriminator(|r: &[f64]| if r[0] > 0.5 { 1.0 } else { 0.0 });
    let ones = Tensor::<f64>::from_f64(2, 1, &[1.0, 1.0]).unwrap();
    let zeros = Tensor::<f64>::from_f64(2, 1, &[0.0, 0.0]).unwrap();
    let v = classifier_loss(&ones, &zeros, &sep).unwrap();
    assert!(v <= 0.0 && v > -1e-5);

    // Bayes-optimal on the copied pair, exact expectations via the four
    // product-distribution states: 2 JSD - 2 ln 2 = ln(2/3) + ln(1/3)/2.
    let d = BayesOptimal::new(2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    let v = classifier_loss(&real, &perm, &d).unwrap();
    let oracle = (2.0f64 / 3.0).ln() + 0.5 * (1.0f64 / 3.0).ln();
    assert!((v - oracle).abs() < 1e-5, "{v} vs {oracle}");
    assert!((oracle + 0.954771).abs() < 1e-6);
}

#[test]
fn tc_estimate_examples() {
    let codes = Tensor::<f64>::from_f64(2, 2, &[0.0, 0.0, 1.0, 1.0]).unwrap();
    assert_eq!(tc_estimate(&codes, &half()).unwrap(), 0.0);
    let d = BayesOptimal::new(2, vec![0.5, 0.0, 0.0, 0.5]).unwrap();
    assert!((tc_estimate(&codes, &d).unwrap() - LN_2).abs() < 1e-6);

    let indep = BayesOptimal::new(2, vec![0.25; 4]).unwrap();
    let all = Tensor::<f64>::from_f64(4, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    assert!(tc_estimate(&all, &indep).unwrap().abs() < 1e-12);
}

#[test]
fn info_loss_examples() {
    let p = Tensor::<f64>::from_f64(4, 3, &[0.5; 12]).unwrap();
    let r = info_loss(&p, &p.cast(), &half()).unwrap();
    assert!(r.total.abs() < 1e-12);

    // deterministic, balanced, independent bits: M ln 2 per batch
    let m = 3;
    let rows: Vec<f64> = (0..8usize)
        .flat_map(|i| (0..m).map(move |j| ((i >> j) & 1) as f64))
        .collect();
    let p = Tensor::<f64>::from_f64(8, m, &rows).unwrap();
    let d = BayesOptimal::new(m, vec![1.0 / 8.0; 8]).unwrap();
    let r = info_loss(&p, &p, &d).unwrap();
    assert!((r.total - m as f64 * LN_2).abs() < 1e-3, "{}", r.total);

    // every bit a copy of the first: entropy M ln 2, TC (M-1) ln 2
    let p = Tensor::<f64>::from_f64(2, m, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let mut joint = vec![0.0; 8];
    joint[0] = 0.5;
    joint[7] = 0.5;
    let d = BayesOptimal::new(m, joint).unwrap();
    let r = info_loss(&p, &p, &d).unwrap();
    assert!((r.mi_sum() - m as f64 * LN_2).abs() < 1e-3);
    assert!((r.tc - (m - 1) as f64 * LN_2).abs() < 1e-9);
    assert!((r.total - LN_2).abs() < 1e-3);
}

#[test]
fn log_mean_exp_examples() {
    assert!((log_mean_exp(&[0.2f64.ln(), 0.8f64.ln()]).unwrap() + LN_2).abs() < 1e-6);
    assert!((log_mean_exp(&[-3.0; 4]).unwrap() + 3.0).abs() < 1e-12);
    assert!(log_mean_exp(&[]).is_err());
    assert!(log_mean_exp(&[f64::NEG_INFINITY]).is_err());
}

#[test]
fn multisample_bound_examples() {
    let model = tiny_model(4, 3, Likelihood::Bernoulli, 5);
    let x = [1.0, 0.0, 0.0, 1.0];
    let y = code(&[1, 0, 1]);
    let single = log_likelihood(&x, &model.decode(&y).unwrap()).unwrap();
    assert!(
        (multisample_bound(&x, std::slice::from_ref(&y), &model).unwrap() - single).abs() < 1e-12
    );
    let same = multisample_bound(&x, &[y.clone(), y.clone(), y.clone()], &model).unwrap();
    assert!((same - single).abs() < 1e-12);
}

#[test]
fn bound_grows_with_k_in_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = tiny_model(4, 3, Likelihood::Bernoulli, 7);
    let x = [1.0, 0.0, 1.0, 1.0];
    let p = BernoulliParams::new(vec![0.3, 0.6, 0.5]).unwrap();
    let mut prev: Option<(f64, f64)> = None;
    for k in [1, 2, 5, 10] {
        let draws = 10_000;
        let vals: Vec<f64> = (0..draws)
            .map(|_| {
                multisample_bound(&x, &crate::nets::sample_codes(&p, k, &mut rng), &model).unwrap()
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / draws as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let se = (var / draws as f64).sqrt();
        if let Some((pm, pse)) = prev {
            assert!(
                mean >= pm - 3.0 * (se * se + pse * pse).sqrt(),
                "K={k}: {mean} < {pm}"
            );
        }
        prev = Some((mean, se));
    }
}

#[test]
fn vimco_signals_cancel_for_equal_likelihoods() {
    assert!(vimco_signals(&[-2.0; 5])
        .unwrap()
        .iter()
        .all(|s| s.abs() < 1e-12));
    assert!(vimco_signals(&[-2.0]).is_err());
    let s = vimco_signals(&[-1.0, -3.0]).unwrap();
    assert!(s[0] > 0.0 && s[1] < 0.0);
}

#[test]
fn vimco_zero_decoder_gives_zero_encoder_gradient() {
    let mut model = tiny_model(4, 3, Likelihood::Gaussian, 8);
    for s in model.decoder_slots() {
        model.params.get_mut(s).data_mut().fill(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::<f64>::from_f64(2, 4, &[0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6]).unwrap();
    let p = Tensor::<f64>::from_f64(2, 3, &[0.2, 0.5, 0.7, 0.4, 0.4, 0.9]).unwrap();
    let out = vimco_gradients(&model, &x, &p, 5, true, &mut rng).unwrap();
    assert!(out
        .prob_grad
        .unwrap()
        .data()
        .iter()
        .all(|g| g.abs() < 1e-12));
}

#[test]
fn vimco_requires_two_samples_for_encoder_gradient() {
    let model = tiny_model(4, 3, Likelihood::Gaussian, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::<f64>::from_f64(1, 4, &[0.5; 4]).unwrap();
    let p = Tensor::<f64>::from_f64(1, 3, &[0.5; 3]).unwrap();
    assert!(vimco_gradients(&model, &x, &p, 1, true, &mut rng).is_err());
    let out = vimco_gradients(&model, &x, &p, 1, false, &mut rng).unwrap();
    assert!(out.prob_grad.is_none());
}

/// Decoder gradients are those of the bound itself: compare with central
/// differences of `Σ_i multisample_bound` on the same codes.
#[test]
fn vimco_decoder_gradient_is_gradient_of_bound() {
    let model = tiny_model(3, 2, Likelihood::Bernoulli, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::<f64>::from_f64(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let p = Tensor::<f64>::from_f64(2, 2, &[0.3, 0.7, 0.5, 0.5]).unwrap();
    let k = 3;
    let out = vimco_gradients(&model, &x, &p, k, false, &mut rng).unwrap();
    let bound_sum = |m: &CodingModel<f64>| -> f64 {
        (0..2)
            .map(|i| {
                let codes: Vec<BitCode> = (0..k)
                    .map(|s| {
                        BitCode::new(out.codes.row(i * k + s).iter().map(|&v| v as u8).collect())
                            .unwrap()
                    })
                    .collect();
                multisample_bound(x.row(i), &codes, m).unwrap()
            })
            .sum()
    };
    assert!((bound_sum(&model) - out.bounds.iter().sum::<f64>()).abs() < 1e-10);
    for (slot, g) in &out.decoder_grads {
        for j in 0..g.len() {
            let h = 1e-6;
            let mut a = model.clone();
            a.params.get_mut(*slot).data_mut()[j] += h;
            let mut b = model.clone();
            b.params.get_mut(*slot).data_mut()[j] -= h;
            let fd = (bound_sum(&a) - bound_sum(&b)) / (2.0 * h);
            assert!(
                (fd - g.data()[j]).abs() < 1e-5 * fd.abs().max(1.0),
                "slot {slot}[{j}]: {fd} vs {}",
                g.data()[j]
            );
        }
    }
}

#[test]
fn vimco_estimator_is_unbiased_on_small_problem() {
    let model = tiny_model(4, 3, Likelihood::Bernoulli, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let report = crate::oracles::vimco_check(
        &model,
        &[1.0, 0.0, 1.0, 0.0],
        &[0.3, 0.6, 0.8],
        2,
        100_000,
        10_000,
        &mut rng,
    )
    .unwrap();
    assert!(report.passed(3.5), "{report:?}");
}

#[test]
fn code_gradients_match_finite_differences() {
    let model = tiny_model(3, 4, Likelihood::Gaussian, 16);
    let x = Tensor::<f64>::from_f64(1, 3, &[0.2, 0.9, 0.4]).unwrap();
    let codes = Tensor::<f64>::from_f64(2, 4, &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let (g, ll) = code_loss_gradients(&model, &x, &codes, 2).unwrap();
    let nll = |c: &Tensor<f64>, r: usize| -> f64 {
        let means = model.decode_batch(c).unwrap();
        let d = crate::nets::DecoderOutput {
            likelihood: Likelihood::Gaussian,
            means: means.row(r).to_vec(),
        };
        -log_likelihood(x.row(0), &d).unwrap()
    };
    for (r, l) in ll.iter().enumerate() {
        assert!((l + nll(&codes, r)).abs() < 1e-12);
        for j in 0..4 {
            let h = 1e-6;
            let mut a = codes.clone();
            a.data_mut()[r * 4 + j] += h;
            let mut b = codes.clone();
            b.data_mut()[r * 4 + j] -= h;
            let fd = (nll(&a, r) - nll(&b, r)) / (2.0 * h);
            assert!((fd - g.row(r)[j]).abs() < 1e-6);
        }
    }
}

#[test]
fn attack_plans_vote_and_average() {
    let codes = Tensor::<f64>::from_f64(3, 2, &[0.0, 1.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let grads = Tensor::<f64>::from_f64(3, 2, &[1.0, 2.0, 2.0, -1.0, 3.0, -4.0]).unwrap();
    let plans = attack_plans(&codes, &grads, 3).unwrap();
    assert_eq!(plans.len(), 1);
    // bit 0 votes [1, 1, 0]; bit 1 votes [0, 1, 1]
    assert_eq!(plans[0].mask.bits(), &[1, 1]);
    assert!((plans[0].magnitudes[0] - 2.0).abs() < 1e-12);
    assert!((plans[0].magnitudes[1] - 1.0).abs() < 1e-12);
    assert!(attack_plans(&codes, &grads, 2).is_err());
}

proptest! {
    #[test]
    fn xor_involution(bits in proptest::collection::vec(0u8..=1, 1..32), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = BitCode::new(bits).unwrap();
        let m = FlipMask::new((0..y.len()).map(|_| rng.gen_range(0..=1)).collect()).unwrap();
        prop_assert_eq!(apply_flip(&apply_flip(&y, &m).unwrap(), &m).unwrap(), y);
    }

    #[test]
    fn flip_moves_to_gradient_step(
        bits in proptest::collection::vec(0u8..=1, 1..24),
        grad in proptest::collection::vec(prop_oneof![Just(0.0), -5.0f64..5.0], 24),
    ) {
        let y = BitCode::new(bits).unwrap();
        let g = &grad[..y.len()];
        let yhat = apply_flip(&y, &flip_mask(&y, g).unwrap()).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            let expect = if gi > 0.0 { 1 } else if gi < 0.0 { 0 } else { y.bits()[i] };
            prop_assert_eq!(yhat.bits()[i], expect);
        }
    }

    #[test]
    fn entropy_ordering(rows in 1usize..12, vals in proptest::collection::vec(0.0f64..=1.0, 48)) {
        let p = Tensor::<f64>::from_f64(rows, 4, &vals[..rows * 4]).unwrap();
        let hm = marginal_entropy(&p).unwrap();
        let hc = conditional_entropy(&p).unwrap();
        for (m, c) in hm.iter().zip(&hc) {
            prop_assert!(*c >= 0.0);
            prop_assert!(*c <= *m + 1e-12);
            prop_assert!(*m <= LN_2 + 1e-12);
        }
    }
}
