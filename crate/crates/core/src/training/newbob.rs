use serde::{Deserialize, Serialize};

/// Validation-driven learning-rate policy: hold the rate while the relative
/// improvement of validation error stays above `ramp_threshold`, then scale it
/// by `halving_factor` every epoch, and stop once the improvement during
/// halving drops below `stop_threshold`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewbobConfig {
    pub ramp_threshold: f64,
    pub stop_threshold: f64,
    pub halving_factor: f64,
}

impl Default for NewbobConfig {
    fn default() -> Self {
        Self {
            ramp_threshold: 0.005,
            stop_threshold: 0.001,
            halving_factor: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrAction {
    Keep,
    Halve,
    Stop,
}

/// `(prev - cur) / prev`; zero when `prev` is zero.
pub fn relative_improvement(prev: f64, cur: f64) -> f64 {
    if prev > 0.0 {
        (prev - cur) / prev
    } else {
        0.0
    }
}

/// Decision after the last entry of `errors`, replaying the whole sequence
/// so the result depends on nothing but the validation errors.
pub fn newbob_schedule(errors: &[f64], cfg: &NewbobConfig) -> LrAction {
    let mut halving = false;
    let mut action = LrAction::Keep;
    for w in errors.windows(2) {
        let gain = relative_improvement(w[0], w[1]);
        if halving {
            if gain < cfg.stop_threshold {
                return LrAction::Stop;
            }
            action = LrAction::Halve;
        } else if gain < cfg.ramp_threshold {
            halving = true;
            action = LrAction::Halve;
        } else {
            action = LrAction::Keep;
        }
    }
    action
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decide(errors: &[f64]) -> LrAction {
        newbob_schedule(errors, &NewbobConfig::default())
    }

    #[test]
    fn reference_transitions() {
        assert_eq!(decide(&[0.10, 0.09]), LrAction::Keep);
        assert_eq!(decide(&[0.10, 0.0998]), LrAction::Halve);
        assert_eq!(decide(&[0.10, 0.0998, 0.0996]), LrAction::Halve);
        // 0.05% relative while halving.
        assert_eq!(decide(&[0.10, 0.0998, 0.099_750_1]), LrAction::Stop);
    }

    #[test]
    fn single_epoch_keeps() {
        assert_eq!(decide(&[0.3]), LrAction::Keep);
        assert_eq!(decide(&[]), LrAction::Keep);
    }

    #[test]
    fn halving_is_sticky() {
        // A large improvement after halving started keeps halving.
        assert_eq!(decide(&[0.5, 0.499, 0.3]), LrAction::Halve);
        assert_eq!(decide(&[0.5, 0.6]), LrAction::Halve);
        assert_eq!(decide(&[0.5, 0.6, 0.7]), LrAction::Stop);
    }

    #[test]
    fn zero_error_counts_as_no_improvement() {
        assert_eq!(decide(&[0.2, 0.0]), LrAction::Keep);
        assert_eq!(decide(&[0.2, 0.0, 0.0]), LrAction::Halve);
    }
}
