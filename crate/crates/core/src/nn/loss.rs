//! Loss primitives and the Gaussian reparameterization.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;

/// `KL(N(mu, exp(logvar)) || N(0, I))` for one latent vector.
pub fn kl_gaussian<T: Real>(mu: &[T], logvar: &[T]) -> T {
    assert_eq!(mu.len(), logvar.len(), "kl_gaussian: mu and logvar lengths differ");
    let half = T::of(0.5);
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| -half * (T::one() + lv - m * m - lv.exp()))
        .sum()
}

/// Gradients of [`kl_gaussian`] scaled by `scale`, added into `d_mu`, `d_logvar`.
pub fn kl_gaussian_grad<T: Real>(mu: &[T], logvar: &[T], scale: T, d_mu: &mut [T], d_logvar: &mut [T]) {
    let half = T::of(0.5);
    for i in 0..mu.len() {
        d_mu[i] += scale * mu[i];
        d_logvar[i] += scale * half * (logvar[i].exp() - T::one());
    }
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize<T: Real>(mu: &[T], logvar: &[T], eps: &[T]) -> Vec<T> {
    let half = T::of(0.5);
    mu.iter()
        .zip(logvar)
        .zip(eps)
        .map(|((&m, &lv), &e)| m + (half * lv).exp() * e)
        .collect()
}

/// Standard-normal noise for [`reparameterize`].
pub fn sample_eps<T: Real, R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<T> {
    (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Draws `z ~ N(mu, exp(logvar))`.
pub fn sample_latent<T: Real, R: Rng + ?Sized>(rng: &mut R, mu: &[T], logvar: &[T]) -> Vec<T> {
    let eps = sample_eps(rng, mu.len());
    reparameterize(mu, logvar, &eps)
}

pub fn huber<T: Real>(pred: T, target: T, delta: T) -> T {
    let d = (pred - target).abs();
    if d <= delta {
        T::of(0.5) * d * d
    } else {
        delta * (d - T::of(0.5) * delta)
    }
}

/// d huber / d pred.
pub fn huber_grad<T: Real>(pred: T, target: T, delta: T) -> T {
    let d = pred - target;
    if d.abs() <= delta {
        d
    } else {
        delta * d.signum()
    }
}

pub fn mse<T: Real>(pred: &[T], target: &[T]) -> T {
    assert_eq!(pred.len(), target.len(), "mse: length mismatch");
    let s: T = pred.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
    s / T::of(pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_gaussian(&[0.0f64; 4], &[0.0; 4]), 0.0);
        assert_eq!(kl_gaussian(&[1.0f64], &[0.0]), 0.5);
        assert!(kl_gaussian(&[0.3f64, -1.0], &[0.7, -2.0]) > 0.0);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) - log p(z)] with z drawn from q.
        let mu = [0.7f64, -0.4, 1.2];
        let lv = [-0.5f64, 0.3, -1.1];
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let z = sample_latent(&mut rng, &mu, &lv);
                (0..3)
                    .map(|i| {
                        let var = lv[i].exp();
                        let log_q = -0.5 * (ln2pi + lv[i] + (z[i] - mu[i]).powi(2) / var);
                        let log_p = -0.5 * (ln2pi + z[i] * z[i]);
                        log_q - log_p
                    })
                    .sum()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let exact = kl_gaussian(&mu, &lv);
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn degenerate_gaussian_returns_mean() {
        let mu = [0.25f64, -3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = sample_latent(&mut rng, &mu, &[-60.0, -60.0]);
        for (a, b) in z.iter().zip(&mu) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn standard_normal_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let z = sample_latent(&mut rng, &vec![0.0f64; n], &vec![0.0; n]);
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.03);
        let mut again = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_latent(&mut again, &vec![0.0f64; n], &vec![0.0; n]), z);
    }

    #[test]
    fn huber_closed_forms() {
        assert_eq!(huber(1.0f64, 1.0, 1.0), 0.0);
        assert_eq!(huber(0.5f64, 0.0, 1.0), 0.125);
        assert_eq!(huber(2.0f64, 0.0, 1.0), 1.5);
        assert_eq!(huber(-2.0f64, 0.0, 1.0), 1.5);
        assert_eq!(huber_grad(-2.0f64, 0.0, 1.0), -1.0);
        assert_eq!(huber_grad(0.5f64, 0.0, 1.0), 0.5);
    }

    #[test]
    fn kl_gradient_matches_differences() {
        let mu = [0.3f64, -1.1];
        let lv = [0.2f64, -0.7];
        let mut dm = [0.0; 2];
        let mut dl = [0.0; 2];
        kl_gaussian_grad(&mu, &lv, 1.0, &mut dm, &mut dl);
        let h = 1e-6;
        for i in 0..2 {
            let mut a = mu;
            a[i] += h;
            let mut b = mu;
            b[i] -= h;
            let fd = (kl_gaussian(&a, &lv) - kl_gaussian(&b, &lv)) / (2.0 * h);
            assert!((fd - dm[i]).abs() < 1e-8);
            let mut a = lv;
            a[i] += h;
            let mut b = lv;
            b[i] -= h;
            let fd = (kl_gaussian(&mu, &a) - kl_gaussian(&mu, &b)) / (2.0 * h);
            assert!((fd - dl[i]).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn losses_non_negative(
            m in proptest::collection::vec(-5.0f64..5.0, 1..8),
            d in -10.0f64..10.0,
            delta in 0.01f64..3.0,
        ) {
            let lv: Vec<f64> = m.iter().map(|v| v * 0.7).collect();
            proptest::prop_assert!(kl_gaussian(&m, &lv) >= 0.0);
            proptest::prop_assert!(huber(d, 0.0, delta) >= 0.0);
            proptest::prop_assert_eq!(huber(d, 0.0, delta) == 0.0, d == 0.0);
        }
    }
}
