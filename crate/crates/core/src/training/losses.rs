//! `E_D` and `E_G`.
//!
//! The discriminator loss is the mean adversarial term over every logit of
//! every sample against the true domain label. The generator loss adds
//! `w_gt * L_gt` to the weighted adversarial terms computed against the
//! flipped label: one mean over feature logits, one mean over all context
//! logits.

use crate::autodiff::{bce_logit, Graph, Var};
use crate::config::{AdvLoss, LossWeights};
use crate::discriminator::{DomainLabel, DomainLogitSeries};
use crate::error::{Result, TdaError};

/// Adversarial term for a single logit.
pub fn adv_term(logit: f64, target: f64, kind: AdvLoss) -> f64 {
    match kind {
        AdvLoss::Bce => bce_logit(logit, target),
        AdvLoss::Lsgan => (logit - target) * (logit - target),
    }
}

pub fn discriminator_loss(samples: &[(DomainLogitSeries, DomainLabel)], kind: AdvLoss) -> Result<f64> {
    if samples.is_empty() {
        return Err(TdaError::Contract("discriminator loss over no samples".into()));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (series, label) in samples {
        for x in series.to_vec() {
            total += adv_term(x, label.target(), kind);
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct GeneratorLoss {
    pub l_gt: f64,
    pub l_g_feat: f64,
    pub l_g_ctx: f64,
    pub total: f64,
}

/// `samples` carry the logits of the sequences pushed towards the flipped
/// label, each with its true label.
pub fn generator_loss(
    samples: &[(DomainLogitSeries, DomainLabel)],
    l_gt: f64,
    weights: &LossWeights,
    kind: AdvLoss,
) -> Result<GeneratorLoss> {
    if samples.is_empty() {
        return Err(TdaError::Contract("generator loss over no samples".into()));
    }
    let mut feat = 0.0;
    let (mut ctx, mut n_ctx) = (0.0, 0usize);
    for (series, label) in samples {
        let t = label.flipped().target();
        feat += adv_term(series.feature, t, kind);
        for x in &series.contexts {
            ctx += adv_term(*x, t, kind);
            n_ctx += 1;
        }
    }
    let l_g_feat = feat / samples.len() as f64;
    let l_g_ctx = if n_ctx == 0 { 0.0 } else { ctx / n_ctx as f64 };
    Ok(GeneratorLoss {
        l_gt,
        l_g_feat,
        l_g_ctx,
        total: weights.w_gt * l_gt + weights.w_feat * l_g_feat + weights.w_ctx * l_g_ctx,
    })
}

/// Sum of adversarial terms of `logits` (each `(1, 1)`) against `target`.
pub fn adv_sum(g: &mut Graph, logits: &[Var], target: f64, kind: AdvLoss) -> Result<Option<Var>> {
    if logits.is_empty() {
        return Ok(None);
    }
    let row = g.concat_cols(logits)?;
    let targets = vec![target; logits.len()];
    let mean = match kind {
        AdvLoss::Bce => g.bce_with_logits(row, &targets)?,
        AdvLoss::Lsgan => g.squared_error(row, &targets)?,
    };
    Ok(Some(g.scale(mean, logits.len() as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::tensor::Tensor;

    fn series(contexts: &[f64], feature: f64) -> DomainLogitSeries {
        DomainLogitSeries {
            contexts: contexts.to_vec(),
            feature,
        }
    }

    /// `-ln(sigmoid(x))` and `-ln(1 - sigmoid(x))` written out directly.
    fn bce_direct(x: f64, t: f64) -> f64 {
        let s = 1.0 / (1.0 + (-x).exp());
        -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
    }

    #[test]
    fn symmetric_point_is_ln2() {
        let s = vec![
            (series(&[0.0, 0.0], 0.0), DomainLabel::SourceDay),
            (series(&[0.0], 0.0), DomainLabel::TargetNight),
        ];
        let e_d = discriminator_loss(&s, AdvLoss::Bce).unwrap();
        assert!((e_d - std::f64::consts::LN_2).abs() < 1e-15);
        let unit = LossWeights {
            w_gt: 1.0,
            w_feat: 1.0,
            w_ctx: 1.0,
        };
        let e_g = generator_loss(&s, 0.0, &unit, AdvLoss::Bce).unwrap();
        assert!((e_g.total - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn saturated_cases_vanish() {
        let day = vec![(series(&[20.0, 20.0], 20.0), DomainLabel::SourceDay)];
        assert!(discriminator_loss(&day, AdvLoss::Bce).unwrap() < 1e-8);
        let fooled = vec![(series(&[-20.0], -20.0), DomainLabel::SourceDay)];
        let e_g = generator_loss(&fooled, 0.0, &LossWeights::default(), AdvLoss::Bce).unwrap();
        assert!(e_g.total < 1e-8);
    }

    #[test]
    fn hand_set_values_match_direct_arithmetic() {
        let s = vec![
            (series(&[0.3], -1.2), DomainLabel::SourceDay),
            (series(&[], 2.0), DomainLabel::TargetNight),
        ];
        let expect = (bce_direct(0.3, 1.0) + bce_direct(-1.2, 1.0) + bce_direct(2.0, 0.0)) / 3.0;
        assert!((discriminator_loss(&s, AdvLoss::Bce).unwrap() - expect).abs() < 1e-12);

        let two_step = vec![(series(&[0.7, -0.4], 1.1), DomainLabel::TargetNight)];
        let w = LossWeights {
            w_gt: 1.0,
            w_feat: 0.1,
            w_ctx: 0.1,
        };
        let got = generator_loss(&two_step, 0.25, &w, AdvLoss::Bce).unwrap();
        let ctx = (bce_direct(0.7, 1.0) + bce_direct(-0.4, 1.0)) / 2.0;
        let expect = 0.25 + 0.1 * bce_direct(1.1, 1.0) + 0.1 * ctx;
        assert!((got.total - expect).abs() < 1e-12);
        assert!((got.l_g_ctx - ctx).abs() < 1e-12);

        let ls = discriminator_loss(&two_step, AdvLoss::Lsgan).unwrap();
        assert!((ls - (0.49 + 0.16 + 1.21) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_contract_error() {
        assert!(matches!(
            discriminator_loss(&[], AdvLoss::Bce),
            Err(TdaError::Contract(_))
        ));
        assert!(generator_loss(&[], 0.0, &LossWeights::default(), AdvLoss::Bce).is_err());
    }

    #[test]
    fn graph_sum_matches_scalar_terms() {
        let xs = [0.4, -2.5, 3.0];
        for kind in [AdvLoss::Bce, AdvLoss::Lsgan] {
            let mut g = Graph::standalone();
            let vars: Vec<Var> = xs.iter().map(|x| g.constant(Tensor::scalar(*x))).collect();
            let s = adv_sum(&mut g, &vars, 1.0, kind).unwrap().unwrap();
            let expect: f64 = xs.iter().map(|x| adv_term(*x, 1.0, kind)).sum();
            assert!((g.value(s).item() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let logits = Tensor::row(vec![0.4, -1.3, 2.2, 0.05]);
        for kind in [AdvLoss::Bce, AdvLoss::Lsgan] {
            for target in [0.0, 1.0] {
                let err = check_input_gradient(
                    &logits,
                    |g, x| {
                        let parts: Vec<Var> = (0..4).map(|i| g.slice_cols(x, i, i + 1)).collect::<Result<_>>()?;
                        let s = adv_sum(g, &parts, target, kind)?.expect("non-empty");
                        Ok(g.scale(s, 0.25))
                    },
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-6, "{kind:?} {target}: {err}");
            }
        }
    }
}
