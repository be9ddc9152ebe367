//! Loss terms and their composition into the total training objective.
//!
//! Three families of terms: the classification loss on image logits, the
//! alignment pair (an unsquared ℓ2 distance pulling the projected pivot
//! toward the sentence embedding, plus a cross-entropy term that stops the
//! joint space from collapsing), and the description pair (teacher-forced
//! negative log-likelihood minus the expected reward of sampled sentences,
//! trained through a policy-gradient surrogate). All terms are means over
//! the batch (and over valid time steps where applicable), so the weighting
//! coefficients mean the same thing at any batch size. Setting both
//! coefficients to zero recovers plain empirical risk minimization exactly.

use serde::{Deserialize, Serialize};

use crate::error::{GvrtError, Result};
use crate::nn::{self, Linear};

/// Floor applied inside logarithms so a zero probability at the target
/// yields a large finite loss instead of infinity.
pub const LOG_FLOOR: f64 = nn::LOG_FLOOR;

/// Per-step record of every loss term and their weighted total.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub align_l2: f64,
    pub align_ce: f64,
    pub expl_nll: f64,
    pub expl_reward: f64,
    pub total: f64,
}

/// The raw term values handed to [`total_loss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct LossInputs {
    pub task: f64,
    pub align_l2: f64,
    pub align_ce: f64,
    pub expl_nll: f64,
    pub expl_reward: f64,
}

/// Mean cross-entropy of predicted distribution rows against integer labels.
/// Returns the loss and how many rows hit the log floor.
pub fn cross_entropy(probs: &[f64], num_classes: usize, labels: &[u16]) -> (f64, usize) {
    assert_eq!(probs.len(), labels.len() * num_classes);
    let mut total = 0.0;
    let mut floored = 0;
    for (row, &y) in probs.chunks(num_classes).zip(labels) {
        let p = row[y as usize];
        if p < LOG_FLOOR {
            floored += 1;
        }
        total -= nn::safe_ln(p);
    }
    (total / labels.len().max(1) as f64, floored)
}

/// Classification loss on already-normalized prediction rows.
pub fn task_loss(yhat: &[f64], num_classes: usize, labels: &[u16]) -> (f64, usize) {
    cross_entropy(yhat, num_classes, labels)
}

/// Classification loss straight from logits, with the gradient w.r.t. the
/// logits (softmax and cross-entropy fused for stability).
pub fn task_loss_from_logits(
    logits: &[f64],
    num_classes: usize,
    labels: &[u16],
) -> (f64, Vec<f64>, usize) {
    let targets: Vec<usize> = labels.iter().map(|&y| y as usize).collect();
    let (loss, dlogits) = nn::softmax_xent(logits, num_classes, &targets);
    let probs = nn::softmax(logits, num_classes);
    let floored = probs
        .chunks(num_classes)
        .zip(&targets)
        .filter(|(row, &t)| row[t] < LOG_FLOOR)
        .count();
    (loss, dlogits, floored)
}

/// Mean unsquared ℓ2 distance between projected pivot rows and sentence
/// embedding rows, with gradients for both sides. At an exact coincidence the
/// norm is not differentiable; the subgradient 0 is used by convention, so a
/// perfectly aligned pair pushes nothing.
pub fn align_l2_with_grad(
    projected: &[f64],
    g_x: &[f64],
    dim: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if projected.len() != g_x.len() || dim == 0 || projected.len() % dim != 0 {
        return Err(GvrtError::Config(format!(
            "alignment operands disagree: projected {} vs sentence {} values (dim {dim})",
            projected.len(),
            g_x.len()
        )));
    }
    let batch = projected.len() / dim;
    let mut loss = 0.0;
    let mut d_proj = vec![0.0; projected.len()];
    let mut d_gx = vec![0.0; g_x.len()];
    for b in 0..batch {
        let row = b * dim;
        let mut sq = 0.0;
        for j in 0..dim {
            let d = projected[row + j] - g_x[row + j];
            sq += d * d;
        }
        let norm = sq.sqrt();
        loss += norm;
        if norm > 0.0 {
            let scale = 1.0 / (norm * batch as f64);
            for j in 0..dim {
                let d = projected[row + j] - g_x[row + j];
                d_proj[row + j] = d * scale;
                d_gx[row + j] = -d * scale;
            }
        }
    }
    Ok((loss / batch as f64, d_proj, d_gx))
}

/// Alignment pair as forward values: the ℓ2 term after projecting the pivot,
/// and the anti-collapse cross-entropy of the joint-space class predictions.
pub fn align_loss(
    v: &[f64],
    g_x: &[f64],
    ytilde: &[f64],
    labels: &[u16],
    f_proj: &Linear,
) -> Result<(f64, f64)> {
    let projected = f_proj.forward(v);
    let dim = f_proj.out_dim;
    let (l2, _, _) = align_l2_with_grad(&projected, g_x, dim)?;
    let num_classes = ytilde.len() / labels.len().max(1);
    let (ce, _) = cross_entropy(ytilde, num_classes, labels);
    Ok((l2, ce))
}

/// Description pair: mean NLL over scored steps, and the policy-gradient
/// surrogate whose gradient is the single-sample score-function estimator of
/// the expected-reward gradient. Rewards enter as constants; only the
/// log-probability path carries gradient. The reported reward metric is the
/// plain mean of `r`.
pub fn expl_loss(
    step_logp: &[Vec<f64>],
    valid_steps: usize,
    sampled_logprob: &[f64],
    r: &[f64],
    baseline: f64,
) -> (f64, f64) {
    let total: f64 = step_logp.iter().flatten().sum();
    let nll = -total / valid_steps.max(1) as f64;
    let batch = sampled_logprob.len().max(1) as f64;
    let surrogate = sampled_logprob
        .iter()
        .zip(r)
        .map(|(&lp, &ri)| -(ri - baseline) * lp)
        .sum::<f64>()
        / batch;
    (nll, surrogate)
}

/// d surrogate / d logprob_b: the coefficient each sampled sequence's total
/// log-probability receives in the policy-gradient backward.
pub fn surrogate_dlogp(r: &[f64], baseline: f64, batch: usize) -> Vec<f64> {
    r.iter().map(|&ri| -(ri - baseline) / batch as f64).collect()
}

/// Mean reward metric.
pub fn mean_reward(r: &[f64]) -> f64 {
    if r.is_empty() {
        0.0
    } else {
        r.iter().sum::<f64>() / r.len() as f64
    }
}

/// Compose the weighted total. Zero weights reduce bit-for-bit to the
/// classification loss alone.
pub fn total_loss(inputs: &LossInputs, lambda_align: f64, lambda_expl: f64) -> Result<LossBreakdown> {
    if lambda_align < 0.0 || !lambda_align.is_finite() {
        return Err(GvrtError::Config(format!(
            "lambda_align must be a finite value >= 0, got {lambda_align}"
        )));
    }
    if lambda_expl < 0.0 || !lambda_expl.is_finite() {
        return Err(GvrtError::Config(format!(
            "lambda_expl must be a finite value >= 0, got {lambda_expl}"
        )));
    }
    let mut total = inputs.task;
    if lambda_align > 0.0 {
        total += lambda_align * (inputs.align_l2 + inputs.align_ce);
    }
    if lambda_expl > 0.0 {
        total += lambda_expl * (inputs.expl_nll - inputs.expl_reward);
    }
    Ok(LossBreakdown {
        task: inputs.task,
        align_l2: inputs.align_l2,
        align_ce: inputs.align_ce,
        expl_nll: inputs.expl_nll,
        expl_reward: inputs.expl_reward,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn task_loss_is_zero_on_exact_prediction() {
        let yhat = vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0];
        let (loss, floored) = task_loss(&yhat, 3, &[1, 0]);
        assert_eq!(loss, 0.0);
        assert_eq!(floored, 0);
    }

    #[test]
    fn task_loss_closed_form() {
        let (loss, _) = task_loss(&[0.2, 0.5, 0.3], 3, &[1]);
        assert!((loss - (-(0.5_f64).ln())).abs() < 1e-12);
        assert!((loss - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn task_loss_floors_zero_probability() {
        let (loss, floored) = task_loss(&[1.0, 0.0], 2, &[1]);
        assert_eq!(floored, 1);
        assert!((loss - (-(LOG_FLOOR).ln())).abs() < 1e-9);
        assert!(loss.is_finite());
    }

    #[test]
    fn task_logit_gradient_matches_finite_differences() {
        let mut rng = crate::rng::component_rng(0, "test-objectives");
        let (batch, k) = (4, 3);
        let logits: Vec<f64> = (0..batch * k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u16> = (0..batch).map(|_| rng.gen_range(0..k) as u16).collect();
        let (_, dlogits, _) = task_loss_from_logits(&logits, k, &labels);
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut lp = logits.clone();
            lp[i] += h;
            let (up, _, _) = task_loss_from_logits(&lp, k, &labels);
            lp[i] -= 2.0 * h;
            let (dn, _, _) = task_loss_from_logits(&lp, k, &labels);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - dlogits[i]).abs() / fd.abs().max(dlogits[i].abs()).max(1e-8);
            assert!(rel < 1e-6, "coord {i}: fd {fd} vs analytic {}", dlogits[i]);
        }
    }

    #[test]
    fn align_l2_zero_at_identity() {
        let v = vec![0.3, -0.7, 1.1, 0.0];
        let (l2, dp, dg) = align_l2_with_grad(&v, &v, 2).unwrap();
        assert_eq!(l2, 0.0);
        // Subgradient 0 at the coincidence point.
        assert!(dp.iter().all(|&x| x == 0.0));
        assert!(dg.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn align_l2_three_four_five() {
        let (l2, _, _) = align_l2_with_grad(&[0.0, 0.0], &[3.0, 4.0], 2).unwrap();
        assert!((l2 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn align_l2_gradient_matches_finite_differences() {
        let mut rng = crate::rng::component_rng(1, "test-objectives");
        let dim = 3;
        let a: Vec<f64> = (0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, dp, dg) = align_l2_with_grad(&a, &b, dim).unwrap();
        let h = 1e-6;
        for i in 0..a.len() {
            let mut ap = a.clone();
            ap[i] += h;
            let up = align_l2_with_grad(&ap, &b, dim).unwrap().0;
            ap[i] -= 2.0 * h;
            let dn = align_l2_with_grad(&ap, &b, dim).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - dp[i]).abs() / fd.abs().max(dp[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "projected coord {i}");
        }
        for i in 0..b.len() {
            let mut bp = b.clone();
            bp[i] += h;
            let up = align_l2_with_grad(&a, &bp, dim).unwrap().0;
            bp[i] -= 2.0 * h;
            let dn = align_l2_with_grad(&a, &bp, dim).unwrap().0;
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - dg[i]).abs() / fd.abs().max(dg[i].abs()).max(1e-8);
            assert!(rel < 1e-5, "sentence coord {i}");
        }
    }

    #[test]
    fn align_dimension_mismatch_is_an_error() {
        assert!(align_l2_with_grad(&[1.0, 2.0], &[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn expl_zero_reward_zero_surrogate() {
        let (_, surrogate) = expl_loss(&[vec![-0.5]], 1, &[-2.0, -3.0], &[0.0, 0.0], 0.0);
        assert_eq!(surrogate, 0.0);
        assert!(surrogate_dlogp(&[0.0, 0.0], 0.0, 2).iter().all(|&c| c == 0.0));
    }

    #[test]
    fn expl_surrogate_arithmetic() {
        let (_, surrogate) = expl_loss(&[], 0, &[-2.0], &[1.0], 0.0);
        assert!((surrogate - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expl_nll_is_mean_over_valid_steps() {
        // Three valid log-probs across two rows of differing length.
        let step_logp = vec![vec![-1.0, -2.0], vec![-3.0, 0.0]];
        let (nll, _) = expl_loss(&step_logp, 3, &[], &[], 0.0);
        assert!((nll - 2.0).abs() < 1e-12);
    }

    #[test]
    fn score_function_terms_have_zero_mean_under_enumeration() {
        // A constant baseline must not change the expected gradient: the
        // summed probability-weighted score-function terms vanish. Verified
        // by exact enumeration of every sequence of a tiny generator.
        use crate::data::text::EOS;
        let mut rng = crate::rng::component_rng(7, "test-objectives");
        let cfg = crate::explainer::GeneratorConfig {
            vocab: 3,
            embed_dim: 2,
            hidden: 3,
            d_joint: 2,
            num_classes: 2,
            max_len: 2,
        };
        let mut gen = crate::explainer::ExplanationGenerator::new(cfg, &mut rng);
        let g_x = vec![0.4, -0.2];
        let c = vec![1.0, 0.0];

        // All sequences the sampler can produce with max_len = 2: an
        // immediate EOS, or any first token in {0, 1} followed by any second.
        let mut sequences: Vec<Vec<usize>> = vec![vec![EOS]];
        for first in [0usize, 1] {
            for second in 0..3usize {
                sequences.push(vec![first, second]);
            }
        }

        for p in gen.params_mut() {
            p.zero_grad();
        }
        // Accumulate Σ_õ p(õ)·∇log p(õ) — must be the zero vector.
        let mut probs = Vec::new();
        for seq in &sequences {
            let pass = gen.score_sequence(&[seq.clone()], &g_x, &c).unwrap();
            let p = pass.sequence_logprobs()[0].exp();
            probs.push(p);
            let dlogp = vec![p; pass.scored_steps];
            gen.backward(&pass, &dlogp, None);
        }
        let total_p: f64 = probs.iter().sum();
        assert!((total_p - 1.0).abs() < 1e-12, "enumeration must be exhaustive");
        for p in gen.params_mut() {
            for &g in &p.grad {
                assert!(g.abs() < 1e-10, "score-function mean leaked: {g}");
            }
        }
    }

    #[test]
    fn total_composes_and_validates() {
        let inputs = LossInputs {
            task: 1.5,
            align_l2: 0.4,
            align_ce: 0.6,
            expl_nll: 2.0,
            expl_reward: 0.25,
        };
        let b = total_loss(&inputs, 1.0, 1.0).unwrap();
        assert!((b.total - (1.5 + 1.0 + 1.75)).abs() < 1e-12);
        assert!(total_loss(&inputs, -0.1, 1.0).is_err());
        assert!(total_loss(&inputs, 1.0, f64::NAN).is_err());
        // Ablation weighting accepted.
        let a = total_loss(&inputs, 0.1, 1.0).unwrap();
        assert!((a.total - (1.5 + 0.1 + 1.75)).abs() < 1e-12);
    }

    #[test]
    fn zero_weights_reduce_to_task_bitwise() {
        let inputs = LossInputs {
            task: 0.123456789,
            align_l2: 9.0,
            align_ce: 9.0,
            expl_nll: 9.0,
            expl_reward: 9.0,
        };
        let b = total_loss(&inputs, 0.0, 0.0).unwrap();
        assert_eq!(b.total.to_bits(), inputs.task.to_bits());
    }

    proptest! {
        #[test]
        fn breakdown_total_recomposes(
            task in 0.0..5.0f64,
            l2 in 0.0..5.0f64,
            ce in 0.0..5.0f64,
            nll in 0.0..5.0f64,
            rew in 0.0..1.0f64,
            la in 0.0..3.0f64,
            le in 0.0..3.0f64,
        ) {
            let inputs = LossInputs { task, align_l2: l2, align_ce: ce, expl_nll: nll, expl_reward: rew };
            let b = total_loss(&inputs, la, le).unwrap();
            let recomposed = b.task + la * (b.align_l2 + b.align_ce) + le * (b.expl_nll - b.expl_reward);
            prop_assert!((b.total - recomposed).abs() < 1e-6);
        }

        #[test]
        fn increasing_align_weight_increases_total(
            task in 0.0..5.0f64,
            l2 in 0.01..5.0f64,
            ce in 0.01..5.0f64,
            la in 0.0..3.0f64,
            bump in 0.01..2.0f64,
        ) {
            let inputs = LossInputs { task, align_l2: l2, align_ce: ce, expl_nll: 0.7, expl_reward: 0.2 };
            let lo = total_loss(&inputs, la, 1.0).unwrap().total;
            let hi = total_loss(&inputs, la + bump, 1.0).unwrap().total;
            prop_assert!(hi > lo);
        }
    }
}
