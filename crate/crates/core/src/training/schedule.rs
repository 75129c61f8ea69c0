use crate::error::{Result, TdaError};

/// `base_lr * (1 - step / total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, base_lr: f64, power: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(TdaError::Contract(format!(
            "poly schedule step {step} outside 0..={total_steps}"
        )));
    }
    if step == total_steps {
        return Ok(0.0);
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 100, 0.005, 0.9).unwrap(), 0.005);
        assert_eq!(poly_lr(100, 100, 0.005, 0.9).unwrap(), 0.0);
        let mid = poly_lr(50, 100, 0.005, 0.9).unwrap();
        assert!((mid - 0.005 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.0026794).abs() < 1e-7);
    }

    #[test]
    fn strictly_decreasing() {
        let lrs: Vec<f64> = (0..=37).map(|s| poly_lr(s, 37, 0.005, 0.9).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn out_of_range_is_contract_error() {
        assert!(matches!(poly_lr(11, 10, 0.1, 0.9), Err(TdaError::Contract(_))));
        assert!(poly_lr(0, 0, 0.1, 0.9).is_err());
    }
}
