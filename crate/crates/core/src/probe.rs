//! Logistic-regression probe used to measure how separable two domains are.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Result, TdaError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub train_fraction: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            iterations: 1500,
            learning_rate: 0.5,
            l2: 1e-3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// Accuracy on the held-out split.
    pub accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
}

/// Trains a standardized logistic regression on a seeded split and scores
/// the held-out part.
pub fn linear_probe(features: &[Vec<f64>], labels: &[bool], settings: &ProbeSettings) -> Result<ProbeResult> {
    if features.len() != labels.len() {
        return Err(TdaError::Contract(format!(
            "{} feature rows but {} labels",
            features.len(),
            labels.len()
        )));
    }
    let n = features.len();
    let dim = features.first().map_or(0, |f| f.len());
    if n < 4 || dim == 0 || features.iter().any(|f| f.len() != dim) {
        return Err(TdaError::Contract(
            "probe needs at least 4 equal-length feature rows".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(settings.seed));
    let n_train = ((n as f64 * settings.train_fraction).round() as usize).clamp(1, n - 1);
    let (train, test) = order.split_at(n_train);

    let mut mean = vec![0.0; dim];
    for &i in train {
        for (m, v) in mean.iter_mut().zip(&features[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n_train as f64);
    let mut std = vec![0.0; dim];
    for &i in train {
        for ((s, v), m) in std.iter_mut().zip(&features[i]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    std.iter_mut()
        .for_each(|s| *s = (*s / n_train as f64).sqrt().max(1e-12));
    let standardized = |i: usize| -> Vec<f64> {
        features[i]
            .iter()
            .zip(&mean)
            .zip(&std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    };
    let xs: Vec<Vec<f64>> = (0..n).map(standardized).collect();
    let ys: Vec<f64> = labels.iter().map(|&l| l as u8 as f64).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    for _ in 0..settings.iterations {
        let mut gw = vec![0.0; dim];
        let mut gb = 0.0;
        for &i in train {
            let z = b + xs[i].iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
            let r = sigmoid(z) - ys[i];
            gb += r;
            for (g, x) in gw.iter_mut().zip(&xs[i]) {
                *g += r * x;
            }
        }
        let k = settings.learning_rate / n_train as f64;
        for (wj, gj) in w.iter_mut().zip(&gw) {
            *wj -= k * gj + settings.learning_rate * settings.l2 * *wj;
        }
        b -= k * gb;
    }
    let accuracy_on = |idx: &[usize]| -> f64 {
        let hits = idx
            .iter()
            .filter(|&&i| {
                let z = b + xs[i].iter().zip(&w).map(|(x, w)| x * w).sum::<f64>();
                (z > 0.0) == labels[i]
            })
            .count();
        hits as f64 / idx.len() as f64
    };
    Ok(ProbeResult {
        accuracy: accuracy_on(test),
        train_accuracy: accuracy_on(train),
        n_train,
        n_test: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_data_is_separated() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..200 {
            let label = i % 2 == 0;
            let shift = if label { 1.5 } else { -1.5 };
            xs.push(vec![shift + rng.random_range(-1.0..1.0), rng.random_range(-5.0..5.0)]);
            ys.push(label);
        }
        let r = linear_probe(&xs, &ys, &ProbeSettings::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n_test, 40);
    }

    #[test]
    fn identical_distributions_stay_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..800).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
        let ys: Vec<bool> = (0..800).map(|_| rng.random_bool(0.5)).collect();
        let r = linear_probe(&xs, &ys, &ProbeSettings::default()).unwrap();
        assert!(r.accuracy < 0.62, "{r:?}");
    }

    #[test]
    fn mismatched_inputs_rejected() {
        assert!(linear_probe(&vec![vec![1.0]; 5], &[true; 4], &ProbeSettings::default()).is_err());
    }
}
