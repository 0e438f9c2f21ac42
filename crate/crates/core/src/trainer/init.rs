use rand::Rng;

use crate::kernels::Tensor;
use crate::scalar::Scalar;

/// Glorot-uniform initialization in `±sqrt(6 / (fan_in + fan_out))`.
///
/// For a 2-d shape `[rows, cols]` the fans are `rows` and `cols`; an
/// embedding table `[num_nodes, d]` is therefore scaled by its full size. A
/// 1-d shape `[d]` is treated as `[1, d]`.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let (fan_in, fan_out) = match shape {
        [n] => (1, *n),
        [a, b] => (*a, *b),
        _ => {
            let receptive: usize = shape[2..].iter().product();
            (shape[1] * receptive, shape[0] * receptive)
        }
    };
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Tensor<f64> = xavier_init(&[3, 3], &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 1.0));
        let again: Tensor<f64> = xavier_init(&[3, 3], &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(t, again);
    }

    #[test]
    fn variance_matches_glorot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Tensor<f64> = xavier_init(&[200, 500], &mut rng);
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 700.0;
        assert!(
            (var - expected).abs() < 0.1 * expected,
            "{var} vs {expected}"
        );
    }
}
