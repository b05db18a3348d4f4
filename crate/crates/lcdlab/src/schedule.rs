//! Discrete diffusion noise schedules: linear and scaled-linear beta curves,
//! forward noising, logSNR diagnostics, and the skipped-timestep pairs used
//! by consistency distillation.
//!
//! Tables are precomputed in f64 at construction and indexed by integer
//! timesteps `t in 0..=T`, with `alpha_bar[0] = 1` so `t = 0` is the
//! clean-data boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    ScaledLinear,
}

/// Precomputed beta/alpha-bar tables for a discrete forward process
/// `z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    pub t_max: usize,
    beta: Vec<f64>,      // beta[t] for t in 1..=T; beta[0] unused (0.0)
    alpha_bar: Vec<f64>, // alpha_bar[t] for t in 0..=T; alpha_bar[0] = 1
}

impl NoiseSchedule {
    pub fn build(
        kind: ScheduleKind,
        beta_start: f64,
        beta_end: f64,
        t_max: usize,
    ) -> Result<NoiseSchedule> {
        if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::InvalidArg {
                op: "build_schedule",
                msg: format!("need 0 < beta_start < beta_end < 1, got {beta_start} and {beta_end}"),
            });
        }
        if t_max < 2 {
            return Err(Error::InvalidArg {
                op: "build_schedule",
                msg: format!("need T >= 2, got {t_max}"),
            });
        }
        let mut beta = vec![0.0f64; t_max + 1];
        for (t, b) in beta.iter_mut().enumerate().skip(1) {
            let frac = (t - 1) as f64 / (t_max - 1) as f64;
            *b = match kind {
                ScheduleKind::Linear => beta_start + frac * (beta_end - beta_start),
                ScheduleKind::ScaledLinear => {
                    let s = beta_start.sqrt() + frac * (beta_end.sqrt() - beta_start.sqrt());
                    s * s
                }
            };
        }
        let mut alpha_bar = vec![1.0f64; t_max + 1];
        for t in 1..=t_max {
            alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
        }
        Ok(NoiseSchedule {
            kind,
            beta_start,
            beta_end,
            t_max,
            beta,
            alpha_bar,
        })
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_max {
            Err(Error::TimestepOutOfRange {
                t,
                lo,
                hi: self.t_max,
            })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(self.beta[t])
    }

    /// Cumulative product of (1 - beta); `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t, 0)?;
        Ok(self.alpha_bar[t])
    }

    /// `alpha(t) = sqrt(alpha_bar_t)`, the signal coefficient.
    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar(t)?.sqrt())
    }

    /// `sigma(t) = sqrt(1 - alpha_bar_t)`, the noise coefficient.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok((1.0 - self.alpha_bar(t)?).sqrt())
    }

    pub fn log_snr(&self, t: usize) -> Result<f64> {
        self.check_t(t, 1)?;
        Ok(log_snr_of_alpha_bar(self.alpha_bar[t]))
    }

    /// Forward noising `sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t, 0)?;
        if z0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch {
                op: "add_noise",
                lhs: z0.shape().to_vec(),
                rhs: eps.shape().to_vec(),
            });
        }
        if t == 0 {
            // alpha_bar(0) = 1: the clean-data boundary, exactly
            return z0.scale(1.0);
        }
        let a = self.alpha(t)? as f32;
        let s = self.sigma(t)? as f32;
        z0.scale(a)?.add(&eps.scale(s)?)
    }

    /// Admissible range of the lower index `n` for a skip interval `k`:
    /// pairs are `(n + k, n)` with `n` uniform in `[1, T - k]`.
    pub fn skip_pair_range(&self, k: usize) -> Result<(usize, usize)> {
        if k == 0 || k >= self.t_max {
            return Err(Error::InvalidArg {
                op: "skipped_timesteps",
                msg: format!("need 1 <= k < T, got k = {k}, T = {}", self.t_max),
            });
        }
        Ok((1, self.t_max - k))
    }

    /// Draw a training pair `(t_{n+k}, t_n)` with `n ~ U[1, T-k]`.
    pub fn sample_skip_pair(&self, k: usize, rng: &mut Rng) -> Result<(usize, usize)> {
        let (lo, hi) = self.skip_pair_range(k)?;
        let n = rng.int_range(lo as u64, hi as u64) as usize;
        Ok((n + k, n))
    }

    /// The full ordered pair list `(n+k, n)` for `n = 1..=T-k`.
    pub fn skip_pairs(&self, k: usize) -> Result<Vec<(usize, usize)>> {
        let (lo, hi) = self.skip_pair_range(k)?;
        Ok((lo..=hi).map(|n| (n + k, n)).collect())
    }

    /// CSV rows `t, beta, alpha_bar, log_snr` for t = 1..=T.
    pub fn dump_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha_bar,log_snr\n");
        for t in 1..=self.t_max {
            out.push_str(&format!(
                "{},{:.12e},{:.12e},{:.12e}\n",
                t,
                self.beta[t],
                self.alpha_bar[t],
                log_snr_of_alpha_bar(self.alpha_bar[t])
            ));
        }
        out
    }
}

pub fn log_snr_of_alpha_bar(alpha_bar: f64) -> f64 {
    (alpha_bar / (1.0 - alpha_bar)).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_default() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 1000).unwrap()
    }

    fn scaled_default() -> NoiseSchedule {
        NoiseSchedule::build(ScheduleKind::ScaledLinear, 0.00085, 0.012, 1000).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = linear_default();
        assert!((s.beta(1).unwrap() - 1e-4).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn scaled_linear_endpoints() {
        let s = scaled_default();
        assert!((s.beta(1).unwrap() - 0.00085).abs() < 1e-15);
        assert!((s.beta(1000).unwrap() - 0.012).abs() < 1e-12);
    }

    // Direct-product oracle: independently recompute alpha_bar_T.
    #[test]
    fn alpha_bar_matches_direct_product() {
        let s = linear_default();
        let t_max = 1000usize;
        let mut prod = 1.0f64;
        for t in 1..=t_max {
            let beta = 1e-4 + (t - 1) as f64 / 999.0 * (0.02 - 1e-4);
            prod *= 1.0 - beta;
        }
        let got = s.alpha_bar(t_max).unwrap();
        assert!(
            ((got - prod) / prod).abs() < 1e-6,
            "got {got}, oracle {prod}"
        );
    }

    #[test]
    fn beta_nondecreasing_and_alpha_bar_decreasing_both_kinds() {
        for s in [linear_default(), scaled_default()] {
            for t in 2..=s.t_max {
                assert!(s.beta(t).unwrap() >= s.beta(t - 1).unwrap());
                assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
                assert!(s.beta(t).unwrap() > 0.0 && s.beta(t).unwrap() < 1.0);
            }
            assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        }
    }

    #[test]
    fn log_snr_zero_at_half_alpha_bar_and_monotone() {
        assert_eq!(log_snr_of_alpha_bar(0.5), 0.0);
        for s in [linear_default(), scaled_default()] {
            for t in 2..=s.t_max {
                assert!(s.log_snr(t).unwrap() < s.log_snr(t - 1).unwrap());
            }
        }
    }

    // Independent recurrence oracle for the CSV dump.
    #[test]
    fn csv_matches_direct_recurrence() {
        for (kind, b0, b1) in [
            (ScheduleKind::Linear, 1e-4, 0.02),
            (ScheduleKind::ScaledLinear, 0.00085, 0.012),
        ] {
            let s = NoiseSchedule::build(kind, b0, b1, 1000).unwrap();
            let csv = s.dump_csv();
            let mut abar = 1.0f64;
            for (i, line) in csv.lines().skip(1).enumerate() {
                let t = i + 1;
                let fields: Vec<&str> = line.split(',').collect();
                assert_eq!(fields.len(), 4);
                let beta = match kind {
                    ScheduleKind::Linear => b0 + (t - 1) as f64 / 999.0 * (b1 - b0),
                    ScheduleKind::ScaledLinear => {
                        let v = b0.sqrt() + (t - 1) as f64 / 999.0 * (b1.sqrt() - b0.sqrt());
                        v * v
                    }
                };
                abar *= 1.0 - beta;
                let snr = (abar / (1.0 - abar)).ln();
                assert_eq!(fields[0].parse::<usize>().unwrap(), t);
                assert!((fields[1].parse::<f64>().unwrap() - beta).abs() < 1e-12 * beta.max(1e-12));
                assert!((fields[2].parse::<f64>().unwrap() - abar).abs() < 1e-9 * abar.abs().max(1e-12));
                assert!((fields[3].parse::<f64>().unwrap() - snr).abs() < 1e-6 * snr.abs().max(1.0));
            }
            assert_eq!(csv.lines().count(), 1001);
        }
    }

    #[test]
    fn add_noise_boundaries() {
        let s = linear_default();
        let mut rng = Rng::new(3);
        let z0 = Tensor::randn(&[4, 4], &mut rng);
        let eps = Tensor::randn(&[4, 4], &mut rng);
        // t = 0 returns z0 exactly
        let out = s.add_noise(&z0, &eps, 0).unwrap();
        assert_eq!(out.to_vec(), z0.to_vec());
        // eps = 0 gives scaled z0
        let zeros = Tensor::zeros(&[4, 4]);
        let out = s.add_noise(&z0, &zeros, 500).unwrap();
        let a = s.alpha(500).unwrap() as f32;
        for (o, z) in out.to_vec().iter().zip(z0.to_vec()) {
            assert!((o - a * z).abs() < 1e-7);
        }
        // t out of range
        assert!(s.add_noise(&z0, &eps, 1001).is_err());
    }

    // Monte-Carlo oracle: std of add_noise(0, eps, t) ~= sigma(t).
    #[test]
    fn add_noise_std_matches_sigma() {
        let s = linear_default();
        let mut rng = Rng::new(7);
        let n = 100_000usize;
        for t in [100usize, 500, 900] {
            let z0 = Tensor::zeros(&[n]);
            let eps = Tensor::randn(&[n], &mut rng);
            let out = s.add_noise(&z0, &eps, t).unwrap();
            let v = out.to_vec();
            let mean: f64 = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
            let var: f64 = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let sigma = s.sigma(t).unwrap();
            // SE(std) ~ sigma / sqrt(2n)
            let se = sigma / (2.0 * n as f64).sqrt();
            assert!(
                (var.sqrt() - sigma).abs() < 3.0 * se,
                "t={t}: std {} vs sigma {sigma}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn skip_pairs_range_and_boundary() {
        let s = linear_default();
        let (lo, hi) = s.skip_pair_range(20).unwrap();
        assert_eq!((lo, hi), (1, 980));
        let pairs = s.skip_pairs(20).unwrap();
        assert_eq!(pairs.first().copied(), Some((21, 1)));
        assert_eq!(pairs.last().copied(), Some((1000, 980)));
        // k = T - 1: single admissible n = 1
        let pairs = s.skip_pairs(999).unwrap();
        assert_eq!(pairs, vec![(1000, 1)]);
        assert!(s.skip_pair_range(1000).is_err());
        assert!(s.skip_pair_range(0).is_err());
    }

    // Chi-square uniformity of sampled n over [1, T-k].
    #[test]
    fn skip_pair_sampling_uniform_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 100).unwrap();
        let k = 20usize;
        let bins = 80usize; // n in [1, 80]
        let mut counts = vec![0u64; bins];
        let mut rng = Rng::new(12345);
        let draws = 100_000usize;
        for _ in 0..draws {
            let (hi, lo) = s.sample_skip_pair(k, &mut rng).unwrap();
            assert_eq!(hi, lo + k);
            assert!((1..=80).contains(&lo));
            counts[lo - 1] += 1;
        }
        let expected = draws as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let dist = ChiSquared::new((bins - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(chi2);
        assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
    }

    #[test]
    fn scaled_linear_below_linear_when_sqrt_interp_below() {
        // same endpoints: sqrt interpolation lies below linear interpolation,
        // so the scaled-linear betas are pointwise <= linear betas.
        let lin = NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 500).unwrap();
        let scl = NoiseSchedule::build(ScheduleKind::ScaledLinear, 1e-4, 0.02, 500).unwrap();
        for t in 1..=500 {
            assert!(scl.beta(t).unwrap() <= lin.beta(t).unwrap() + 1e-15, "t={t}");
        }
    }

    #[test]
    fn build_rejects_bad_params() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0.0, 0.02, 10).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0.02, 0.01, 10).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0.01, 1.0, 10).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 1e-4, 0.02, 1).is_err());
    }
}
