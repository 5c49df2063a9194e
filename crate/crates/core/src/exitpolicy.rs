//! Exit decisions: layer-to-layer similarity against static or decaying
//! thresholds, plus max-probability confidence and patience baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HiddenState;
use crate::numerics::{self, Tensor2D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Never,
    Static,
    Decay,
    Confidence,
    Patience,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Never => "never",
            PolicyKind::Static => "static",
            PolicyKind::Decay => "decay",
            PolicyKind::Confidence => "confidence",
            PolicyKind::Patience => "patience",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "never" => PolicyKind::Never,
            "static" => PolicyKind::Static,
            "decay" => PolicyKind::Decay,
            "confidence" => PolicyKind::Confidence,
            "patience" => PolicyKind::Patience,
            _ => return None,
        })
    }

    /// Whether the encoder stacks gate on similarity under this policy.
    /// Confidence and patience read decoder predictions, which the encoder
    /// does not have, so they leave the encoder at full depth.
    pub fn gates_encoder(self) -> bool {
        matches!(self, PolicyKind::Static | PolicyKind::Decay)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicyConfig {
    pub kind: PolicyKind,
    /// Decoder similarity threshold (static), or the base of the decay schedule.
    pub theta: f64,
    pub beta: f64,
    pub tau: f64,
    /// Step budget the decay schedule is normalized by.
    pub total_steps: usize,
    pub confidence_level: f64,
    pub patience: usize,
    pub theta_image: f64,
    pub theta_text: f64,
    /// Forces the image pass to stop after this many layers, whatever the kind.
    pub fixed_image_exit: Option<usize>,
    /// Forces the text pass to stop after this many layers, whatever the kind.
    pub fixed_text_exit: Option<usize>,
    /// Keep every computed similarity in the trace (profiling only).
    pub record_signals: bool,
}

impl Default for ExitPolicyConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::Decay,
            theta: 0.99,
            beta: 0.95,
            tau: 1.0,
            total_steps: 16,
            confidence_level: 0.9,
            patience: 2,
            theta_image: 0.9,
            theta_text: 0.95,
            fixed_image_exit: None,
            fixed_text_exit: None,
            record_signals: false,
        }
    }
}

impl ExitPolicyConfig {
    pub fn never() -> Self {
        Self {
            kind: PolicyKind::Never,
            ..Self::default()
        }
    }

    /// Static similarity policy with the same threshold on every stack.
    pub fn uniform_static(theta: f64) -> Self {
        Self {
            kind: PolicyKind::Static,
            theta,
            theta_image: theta,
            theta_text: theta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta {} outside [0, 1]", self.beta));
        }
        if !(self.tau >= 0.0) {
            return bad(format!("tau {} is negative", self.tau));
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1".into());
        }
        for (name, v) in [
            ("theta", self.theta),
            ("theta_image", self.theta_image),
            ("theta_text", self.theta_text),
            ("confidence_level", self.confidence_level),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} is not finite"));
            }
        }
        for (name, v) in [("fixed_image_exit", self.fixed_image_exit), ("fixed_text_exit", self.fixed_text_exit)] {
            if v == Some(0) {
                return bad(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }

    /// Decoder similarity threshold at generation step `t`, if the policy
    /// gates the decoder on similarity.
    pub fn decoder_threshold(&self, t: usize) -> Option<f64> {
        match self.kind {
            PolicyKind::Static => Some(self.theta),
            PolicyKind::Decay => Some(decay_threshold(t, self)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub exit_now: bool,
    pub signal_value: f64,
    pub threshold_used: f64,
}

/// Cosine similarity between a state and the state one layer below it.
/// Decoder states compare only their last row (the position being generated).
pub fn similarity_signal(prev: &HiddenState, curr: &HiddenState) -> Result<f64> {
    if prev.modality != curr.modality {
        return Err(Error::Contract(format!(
            "similarity between {:?} and {:?} states",
            prev.modality, curr.modality
        )));
    }
    if prev.layer + 1 != curr.layer {
        return Err(Error::Contract(format!(
            "similarity needs adjacent layers, got {} and {}",
            prev.layer, curr.layer
        )));
    }
    if prev.tensor.shape() != curr.tensor.shape() {
        return Err(Error::Contract(format!(
            "similarity between shapes {:?} and {:?}",
            prev.tensor.shape(),
            curr.tensor.shape()
        )));
    }
    if curr.modality == crate::model::Modality::Decoder && curr.tensor.rows() > 1 {
        let last = curr.tensor.rows() - 1;
        return numerics::cosine_sim(&prev.tensor.slice_rows(last, 1)?, &curr.tensor.slice_rows(last, 1)?);
    }
    numerics::cosine_sim(&prev.tensor, &curr.tensor)
}

pub fn static_decision(signal: f64, theta: f64) -> ExitDecision {
    ExitDecision {
        exit_now: signal > theta,
        signal_value: signal,
        threshold_used: theta,
    }
}

/// `βθ + (1−β)·exp(−τt/N)`, where `N` is the configured step budget.
pub fn decay_threshold(t: usize, cfg: &ExitPolicyConfig) -> f64 {
    let n = cfg.total_steps.max(1) as f64;
    cfg.beta * cfg.theta + (1.0 - cfg.beta) * (-cfg.tau * t as f64 / n).exp()
}

/// Exits when the most probable token's softmax probability exceeds `level`.
pub fn confidence_decision(logits_row: &Tensor2D, level: f64) -> Result<ExitDecision> {
    if logits_row.rows() != 1 || logits_row.cols() == 0 {
        return Err(Error::Contract(format!(
            "confidence needs one logits row, got {:?}",
            logits_row.shape()
        )));
    }
    let probs = numerics::softmax_rows(logits_row);
    let top = probs.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ExitDecision {
        exit_now: top > level,
        signal_value: top,
        threshold_used: level,
    })
}

/// Exits when the last `patience` per-layer predictions are all the same token.
/// The signal is the length of the trailing run of agreeing predictions.
pub fn patience_decision(argmax_history: &[usize], patience: usize) -> ExitDecision {
    let run = match argmax_history.last() {
        Some(&last) => argmax_history.iter().rev().take_while(|&&t| t == last).count(),
        None => 0,
    };
    ExitDecision {
        exit_now: patience >= 1 && run >= patience,
        signal_value: run as f64,
        threshold_used: patience as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Modality;
    use proptest::prelude::*;

    fn state(rows: &[&[f64]], modality: Modality, layer: usize) -> HiddenState {
        let tensors: Vec<Tensor2D> = rows.iter().map(|r| Tensor2D::row_vector(r)).collect();
        let refs: Vec<&Tensor2D> = tensors.iter().collect();
        HiddenState {
            tensor: Tensor2D::concat_rows(&refs).unwrap(),
            modality,
            layer,
        }
    }

    fn appendix() -> ExitPolicyConfig {
        ExitPolicyConfig {
            theta: 0.99,
            beta: 0.95,
            tau: 1.0,
            total_steps: 16,
            ..ExitPolicyConfig::default()
        }
    }

    #[test]
    fn similarity_examples() {
        let a = state(&[&[1.0, 2.0, 3.0]], Modality::Text, 0);
        let same = state(&[&[1.0, 2.0, 3.0]], Modality::Text, 1);
        assert_eq!(similarity_signal(&a, &same).unwrap(), 1.0);

        let x = state(&[&[1.0, 0.0]], Modality::Image, 2);
        let y = state(&[&[0.0, 1.0]], Modality::Image, 3);
        assert_eq!(similarity_signal(&x, &y).unwrap(), 0.0);

        let b = state(&[&[4.0, 5.0, 6.0]], Modality::Text, 1);
        let expect = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!((similarity_signal(&a, &b).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn similarity_contract_errors() {
        let a = state(&[&[1.0, 2.0]], Modality::Text, 0);
        let b = state(&[&[1.0, 2.0]], Modality::Image, 1);
        assert!(matches!(similarity_signal(&a, &b), Err(Error::Contract(_))));
        let c = state(&[&[1.0, 2.0]], Modality::Text, 2);
        assert!(matches!(similarity_signal(&a, &c), Err(Error::Contract(_))));
        let d = state(&[&[1.0, 2.0], &[3.0, 4.0]], Modality::Text, 1);
        assert!(matches!(similarity_signal(&a, &d), Err(Error::Contract(_))));
    }

    #[test]
    fn decoder_similarity_uses_current_row() {
        let prev = state(&[&[5.0, 5.0], &[1.0, 0.0]], Modality::Decoder, 1);
        let curr = state(&[&[-5.0, 9.0], &[0.0, 1.0]], Modality::Decoder, 2);
        assert_eq!(similarity_signal(&prev, &curr).unwrap(), 0.0);
    }

    #[test]
    fn static_decision_examples() {
        assert!(static_decision(0.97, 0.95).exit_now);
        assert!(!static_decision(0.95, 0.95).exit_now);
        for s in [-1.0, 0.0, 0.5, 0.999_999, 1.0] {
            assert!(!static_decision(s, 1.01).exit_now);
        }
        let d = static_decision(0.97, 0.95);
        assert_eq!((d.signal_value, d.threshold_used), (0.97, 0.95));
    }

    #[test]
    fn decay_threshold_examples() {
        let flat = ExitPolicyConfig {
            beta: 1.0,
            ..appendix()
        };
        for t in 0..40 {
            assert_eq!(decay_threshold(t, &flat), 0.99);
        }
        let cfg = appendix();
        assert!((decay_threshold(0, &cfg) - 0.9905).abs() < 1e-12);
        let end = 0.95 * 0.99 + 0.05 * (-1f64).exp();
        assert!((decay_threshold(16, &cfg) - end).abs() < 1e-15);
        assert!((end - 0.958_894).abs() < 1e-6);
    }

    #[test]
    fn confidence_examples() {
        let mut dominant = vec![0.0; 64];
        dominant[9] = 20.0;
        assert!(confidence_decision(&Tensor2D::row_vector(&dominant), 0.5).unwrap().exit_now);
        let uniform = Tensor2D::zeros(1, 64);
        let d = confidence_decision(&uniform, 0.5).unwrap();
        assert!(!d.exit_now);
        assert!((d.signal_value - 1.0 / 64.0).abs() < 1e-15);
        let mut huge = vec![0.0; 64];
        huge[0] = 1e6;
        assert!(!confidence_decision(&Tensor2D::row_vector(&huge), 1.0).unwrap().exit_now);
        assert!(confidence_decision(&Tensor2D::zeros(2, 4), 0.5).is_err());
    }

    #[test]
    fn patience_examples() {
        assert!(patience_decision(&[3, 3], 2).exit_now);
        assert!(!patience_decision(&[3, 5], 2).exit_now);
        assert!(!patience_decision(&[7], 2).exit_now);
        assert!(!patience_decision(&[], 1).exit_now);
        assert!(patience_decision(&[1, 4, 4, 4], 3).exit_now);
    }

    #[test]
    fn config_validation() {
        assert!(ExitPolicyConfig::default().validate().is_ok());
        for bad in [
            ExitPolicyConfig {
                beta: 1.5,
                ..Default::default()
            },
            ExitPolicyConfig {
                tau: -0.1,
                ..Default::default()
            },
            ExitPolicyConfig {
                patience: 0,
                ..Default::default()
            },
            ExitPolicyConfig {
                total_steps: 0,
                ..Default::default()
            },
            ExitPolicyConfig {
                fixed_text_exit: Some(0),
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in [
            PolicyKind::Never,
            PolicyKind::Static,
            PolicyKind::Decay,
            PolicyKind::Confidence,
            PolicyKind::Patience,
        ] {
            assert_eq!(PolicyKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(PolicyKind::parse("entropy"), None);
    }

    proptest! {
        #[test]
        fn decay_is_monotone_and_bounded(
            theta in 0.0f64..1.2,
            beta in 0.0f64..0.999,
            tau in 0.001f64..10.0,
            n in 1usize..40,
        ) {
            let cfg = ExitPolicyConfig { theta, beta, tau, total_steps: n, ..ExitPolicyConfig::default() };
            let lo = beta * theta;
            let hi = beta * theta + (1.0 - beta);
            prop_assert!((decay_threshold(0, &cfg) - hi).abs() < 1e-12);
            let mut prev = f64::INFINITY;
            for t in 0..=3 * n {
                let v = decay_threshold(t, &cfg);
                prop_assert!(v <= prev);
                prop_assert!(v >= lo && v <= hi + 1e-15);
                prev = v;
            }
        }

        #[test]
        fn static_exit_set_shrinks_with_theta(s in -1.0f64..=1.0, a in -1.5f64..1.5, b in -1.5f64..1.5) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if static_decision(s, hi).exit_now {
                prop_assert!(static_decision(s, lo).exit_now);
            }
        }

        #[test]
        fn similarity_scale_invariant(
            v in prop::collection::vec(-3.0f64..3.0, 6),
            w in prop::collection::vec(-3.0f64..3.0, 6),
            k in 0.01f64..100.0,
        ) {
            let prev = HiddenState { tensor: Tensor2D::from_vec(2, 3, v).unwrap(), modality: Modality::Image, layer: 0 };
            let curr = HiddenState { tensor: Tensor2D::from_vec(2, 3, w).unwrap(), modality: Modality::Image, layer: 1 };
            let base = similarity_signal(&prev, &curr).unwrap();
            let scaled = similarity_signal(
                &HiddenState { tensor: prev.tensor.scale(k), ..prev.clone() },
                &HiddenState { tensor: curr.tensor.scale(k), ..curr.clone() },
            ).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn confidence_shift_invariant(v in prop::collection::vec(-10.0f64..10.0, 8), c in -50.0f64..50.0, level in 0.0f64..1.0) {
            let row = Tensor2D::row_vector(&v);
            let shifted = row.map(|x| x + c);
            let a = confidence_decision(&row, level).unwrap();
            let b = confidence_decision(&shifted, level).unwrap();
            prop_assert!((a.signal_value - b.signal_value).abs() < 1e-12);
            if (a.signal_value - level).abs() > 1e-9 {
                prop_assert_eq!(a.exit_now, b.exit_now);
            }
        }
    }
}
