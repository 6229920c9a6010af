//! Reproducible random streams.
//!
//! A [`RandomStream`] is identified by `(seed, stream_id)`. The generator is a
//! counter-based ChaCha8 keyed by the seed, with `stream_id` selecting an
//! independent keystream, so task `k` of a parallel job gets the same numbers
//! whichever thread runs it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{NumericsError, SpdMatrix};

#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    /// Stream for retry `attempt` of task `task`. Attempt 0 is `(seed, task)`
    /// itself; later attempts re-key the seed so they never collide with
    /// another task's first attempt.
    pub fn derive(seed: u64, task: u64, attempt: u32) -> Self {
        if attempt == 0 {
            return Self::new(seed, task);
        }
        let rekeyed = splitmix64(seed ^ splitmix64(u64::from(attempt)));
        Self::new(rekeyed, task)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }
}

/// One draw from `N(mean, sd²)`. A standard normal is always consumed, so
/// `sd = 0` returns `mean` without shifting the stream.
pub fn normal_draw(rng: &mut RandomStream, mean: f64, sd: f64) -> Result<f64, NumericsError> {
    if !(sd >= 0.0) || !sd.is_finite() {
        return Err(NumericsError::InvalidParameter(format!("standard deviation {sd}")));
    }
    Ok(mean + sd * rng.standard_normal())
}

/// One draw from `N(mean, cov)` as `mean + L z` with `L` the Cholesky factor.
pub fn mvnormal_draw(
    rng: &mut RandomStream,
    mean: &[f64],
    cov: &SpdMatrix,
) -> Result<Vec<f64>, NumericsError> {
    let q = cov.dim();
    if mean.len() != q {
        return Err(NumericsError::DimensionMismatch(format!(
            "mean of length {} for a {}x{} covariance",
            mean.len(),
            q,
            q
        )));
    }
    let z: Vec<f64> = (0..q).map(|_| rng.standard_normal()).collect();
    let l = cov.cholesky().factor();
    Ok((0..q).map(|i| mean[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RandomStream::new(42, 7);
        let mut b = RandomStream::new(42, 7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_stream_differs() {
        let mut a = RandomStream::new(42, 7);
        let mut b = RandomStream::new(42, 8);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn retries_do_not_alias_first_attempts() {
        let mut retry = RandomStream::derive(3, 5, 1);
        let mut other = RandomStream::derive(3, 5, 0);
        assert_ne!(retry.next_u64(), other.next_u64());
        assert_eq!(RandomStream::derive(3, 5, 0).next_u64(), RandomStream::new(3, 5).next_u64());
    }

    #[test]
    fn zero_sd_returns_mean() {
        let mut r = RandomStream::new(1, 0);
        assert_eq!(normal_draw(&mut r, 7.0, 0.0).unwrap(), 7.0);
        assert!(normal_draw(&mut r, 7.0, -1.0).is_err());
    }

    #[test]
    fn standard_normal_moments() {
        let mut r = RandomStream::new(2024, 0);
        let n = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = normal_draw(&mut r, 0.0, 1.0).unwrap();
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 0.005, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn mvnormal_covariance_matches() {
        let cov = Matrix::from_rows(&[vec![2111.54, -121.63], vec![-121.63, 63.74]]).unwrap();
        let spd = SpdMatrix::new(cov.clone()).unwrap();
        let mut r = RandomStream::new(99, 1);
        let n = 100_000;
        let draws: Vec<Vec<f64>> =
            (0..n).map(|_| mvnormal_draw(&mut r, &[0.0, 0.0], &spd).unwrap()).collect();
        let mean: Vec<f64> =
            (0..2).map(|j| draws.iter().map(|d| d[j]).sum::<f64>() / n as f64).collect();
        for i in 0..2 {
            for j in 0..2 {
                let c = draws.iter().map(|d| (d[i] - mean[i]) * (d[j] - mean[j])).sum::<f64>()
                    / (n - 1) as f64;
                let rel = (c - cov[(i, j)]).abs() / cov[(i, j)].abs();
                assert!(rel < 0.05, "entry ({i},{j}): {c} vs {}", cov[(i, j)]);
            }
        }
    }

    #[test]
    fn semidefinite_covariance_gives_constant() {
        let spd = SpdMatrix::new(Matrix::zeros(2, 2)).unwrap();
        let mut r = RandomStream::new(1, 1);
        assert_eq!(mvnormal_draw(&mut r, &[1.0, -2.0], &spd).unwrap(), vec![1.0, -2.0]);
    }
}
