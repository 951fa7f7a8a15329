//! Fan-in based weight initialization.

use ndarray::ArrayD;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Fills a weight tensor with draws from N(0, 2/fan_in), the rectifier
/// variant of fan-based initialization. Biases and fusion logits stay zero.
pub fn kaiming_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    assert!(fan_in > 0);
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    let len: usize = shape.iter().product();
    let values: Vec<f64> = (0..len).map(|_| normal.sample(rng)).collect();
    ArrayD::from_shape_vec(ndarray::IxDyn(shape), values).expect("shape matches length")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empirical_variance_tracks_fan_in() {
        let mut rng = crate::rng::rng_for(42, crate::rng::STREAM_INIT);
        let fan_in = 64;
        let w = kaiming_normal(&[200, 64], fan_in, &mut rng); // 12800 draws
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let want = 2.0 / fan_in as f64;
        assert!(
            (var - want).abs() < 0.2 * want,
            "variance {var} vs expected {want}"
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let mut a = crate::rng::rng_for(9, crate::rng::STREAM_INIT);
        let mut b = crate::rng::rng_for(9, crate::rng::STREAM_INIT);
        let wa = kaiming_normal(&[4, 3], 3, &mut a);
        let wb = kaiming_normal(&[4, 3], 3, &mut b);
        assert_eq!(wa, wb);
    }
}
