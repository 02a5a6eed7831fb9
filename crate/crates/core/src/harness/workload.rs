//! Workload generators: Poisson query arrivals and provider response delays.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

/// Provider delay bounds in milliseconds: uniform on [10, 2000).
pub const PROVIDER_DELAY_MIN_MS: u64 = 10;
pub const PROVIDER_DELAY_MAX_MS: u64 = 2_000;

/// Draws `n` i.i.d. exponential inter-arrival gaps with the given mean via
/// inverse transform: gap = -mean * ln(u) with u uniform in (0, 1).
pub fn generate_gaps(n: usize, mean_ms: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    assert!(n >= 1 && mean_ms > 0.0);
    let mut gaps = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u: f64 = rng.gen();
        while u <= 0.0 {
            u = rng.gen();
        }
        gaps.push(-mean_ms * u.ln());
    }
    gaps
}

/// Cumulative arrival times in whole milliseconds.
pub fn generate_arrivals(n: usize, mean_ms: f64, rng: &mut ChaCha12Rng) -> Vec<u64> {
    let gaps = generate_gaps(n, mean_ms, rng);
    let mut times = Vec::with_capacity(n);
    let mut cum = 0.0;
    for gap in gaps {
        cum += gap;
        times.push(cum.round() as u64);
    }
    times
}

/// One provider delay: continuous uniform on [min, max), floored to integer
/// milliseconds.
pub fn sample_provider_delay(rng: &mut ChaCha12Rng) -> u64 {
    sample_delay_in(PROVIDER_DELAY_MIN_MS, PROVIDER_DELAY_MAX_MS, rng)
}

pub fn sample_delay_in(min_ms: u64, max_ms: u64, rng: &mut ChaCha12Rng) -> u64 {
    assert!(max_ms > min_ms);
    let span = (max_ms - min_ms) as f64;
    let u: f64 = rng.gen();
    let d = min_ms + (u * span) as u64;
    d.min(max_ms - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::rng::{substream, Substream};

    #[test]
    fn gap_sample_mean_converges() {
        let mut rng = substream(42, Substream::Arrivals);
        let gaps = generate_gaps(100_000, 50.0, &mut rng);
        let mean: f64 = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!(
            (mean - 50.0).abs() / 50.0 < 0.02,
            "sample mean {mean} off by more than 2%"
        );
    }

    #[test]
    fn single_arrival_equals_first_gap() {
        let mut a = substream(1, Substream::Arrivals);
        let mut b = substream(1, Substream::Arrivals);
        let gaps = generate_gaps(1, 50.0, &mut a);
        let times = generate_arrivals(1, 50.0, &mut b);
        assert_eq!(times[0], gaps[0].round() as u64);
    }

    #[test]
    fn same_seed_is_deterministic() {
        let mut a = substream(9, Substream::Arrivals);
        let mut b = substream(9, Substream::Arrivals);
        assert_eq!(
            generate_arrivals(1000, 50.0, &mut a),
            generate_arrivals(1000, 50.0, &mut b)
        );
    }

    #[test]
    fn arrival_times_are_nondecreasing() {
        let mut rng = substream(3, Substream::Arrivals);
        let times = generate_arrivals(5_000, 50.0, &mut rng);
        assert!(times.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn provider_delays_in_bounds_with_midpoint_mean() {
        let mut rng = substream(42, Substream::Delays);
        let samples: Vec<u64> = (0..10_000).map(|_| sample_provider_delay(&mut rng)).collect();
        let min = *samples.iter().min().unwrap();
        let max = *samples.iter().max().unwrap();
        assert!(min >= 10);
        assert!(max < 2_000);
        let mean: f64 = samples.iter().sum::<u64>() as f64 / samples.len() as f64;
        assert!(
            (mean - 1_005.0).abs() / 1_005.0 < 0.02,
            "delay mean {mean} off midpoint by more than 2%"
        );
    }

    #[test]
    fn same_substream_state_same_value() {
        let mut a = substream(5, Substream::Delays);
        let mut b = substream(5, Substream::Delays);
        assert_eq!(sample_provider_delay(&mut a), sample_provider_delay(&mut b));
    }
}
