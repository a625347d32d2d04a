//! Uniform noise on position and speed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::CarState;
use crate::nmpc::Measurement;

/// State components that are measured noisily: x, y and v.
pub const NOISY_COMPONENTS: [usize; 3] = [0, 1, 3];

/// How the configured noise amplitude is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// Draws lie in `[-a, a]`.
    #[default]
    HalfWidth,
    /// Draws lie in `[-a/2, a/2]`.
    PeakToPeak,
}

impl NoiseConvention {
    pub fn half_width(self, amplitude: f64) -> f64 {
        match self {
            NoiseConvention::HalfWidth => amplitude,
            NoiseConvention::PeakToPeak => 0.5 * amplitude,
        }
    }
}

/// Where the perturbation enters the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    /// The plant state itself is perturbed at every step and then measured
    /// exactly.
    #[default]
    State,
    /// Only the controller's measurement is perturbed.
    Measurement,
}

/// Perturb x, y and v by independent uniform draws on `[-a, a]`.
pub fn inject_noise<R: Rng + ?Sized>(state: CarState, amplitude: f64, rng: &mut R) -> CarState {
    if amplitude == 0.0 {
        return state;
    }
    let mut s = state;
    s.x_pos += rng.random_range(-amplitude..=amplitude);
    s.y_pos += rng.random_range(-amplitude..=amplitude);
    s.v += rng.random_range(-amplitude..=amplitude);
    s
}

/// Counter-based noise: the draws for step `k` depend only on the seed and
/// `k`, so every scheme sees the same disturbance at the same step no matter
/// how many draws it has made before.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSource {
    pub seed: u64,
    /// Half-width of the uniform distribution.
    pub amplitude: f64,
    pub target: NoiseTarget,
}

impl NoiseSource {
    pub fn new(seed: u64, amplitude: f64) -> Self {
        Self {
            seed,
            amplitude,
            target: NoiseTarget::State,
        }
    }

    pub fn with_target(mut self, target: NoiseTarget) -> Self {
        self.target = target;
        self
    }

    pub fn rng_for_step(&self, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng
    }

    /// The perturbation added at step `k`, in (x, y, v) order.
    pub fn draws(&self, k: usize) -> [f64; 3] {
        if self.amplitude == 0.0 {
            return [0.0; 3];
        }
        let a = self.amplitude;
        let mut rng = self.rng_for_step(k);
        std::array::from_fn(|_| rng.random_range(-a..=a))
    }
}

impl Measurement for NoiseSource {
    fn measure(&self, k: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut y = x.clone();
        if self.amplitude == 0.0 {
            return y;
        }
        for (d, &i) in self.draws(k).iter().zip(&NOISY_COMPONENTS) {
            y[i] += d;
        }
        y
    }

    fn disturbs_plant(&self) -> bool {
        self.target == NoiseTarget::State && self.amplitude != 0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_identity() {
        let s = CarState::new(1.0, 2.0, 0.3, 10.0, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(inject_noise(s, 0.0, &mut rng), s);
        let x = s.to_vector();
        assert_eq!(NoiseSource::new(3, 0.0).measure(7, &x), x);
    }

    #[test]
    fn draws_depend_on_step_only() {
        let n = NoiseSource::new(11, 0.05);
        let a = n.draws(5);
        let _ = n.draws(6);
        assert_eq!(n.draws(5), a);
        assert_ne!(n.draws(4), a);
    }

    #[test]
    fn psi_and_delta_untouched() {
        let n = NoiseSource::new(1, 0.05);
        let x = DVector::from_row_slice(&[0.0, 0.0, 0.7, 10.0, -0.2]);
        let y = n.measure(2, &x);
        assert_eq!(y[2], 0.7);
        assert_eq!(y[4], -0.2);
    }
}
