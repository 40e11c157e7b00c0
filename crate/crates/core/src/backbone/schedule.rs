//! Linear variance noise schedule and the one-step latent update.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};

/// Per-step signal and noise scales with `alpha_t^2 + beta_t^2 = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    alpha: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// Variances `b_s` linearly spaced over `[beta_min, beta_max]`;
/// `alpha_t = sqrt(prod_{s<=t} (1 - b_s))`, `beta_t = sqrt(1 - alpha_t^2)`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(param_err!("schedule needs at least one step"));
    }
    if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
        return Err(param_err!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        ));
    }
    let mut alpha = Vec::with_capacity(steps);
    let mut beta = Vec::with_capacity(steps);
    let mut cum = 1.0;
    for s in 0..steps {
        let b = if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * s as f64 / (steps - 1) as f64
        };
        cum *= 1.0 - b;
        alpha.push(cum.sqrt());
        // 1 - cum directly keeps alpha^2 + beta^2 = 1 to rounding.
        beta.push((1.0 - cum).sqrt());
    }
    Ok(Schedule { alpha, beta })
}

impl Schedule {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or_else(|| param_err!("time step {t} outside 0..{}", self.len()))
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.beta
            .get(t)
            .copied()
            .ok_or_else(|| param_err!("time step {t} outside 0..{}", self.len()))
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }
}

/// Forward noising `alpha_t * z + beta_t * n`, elementwise.
pub fn add_noise<T: Float>(z: &[T], n: &[T], t: usize, sch: &Schedule) -> Result<Vec<T>> {
    if z.len() != n.len() {
        return Err(shape_err!("latent has {} values, noise {}", z.len(), n.len()));
    }
    let a = T::from(sch.alpha(t)?).unwrap();
    let b = T::from(sch.beta(t)?).unwrap();
    Ok(z.iter().zip(n).map(|(&z, &n)| a * z + b * n).collect())
}

/// The one-step update `(z - beta_t * n) / alpha_t`.
pub fn remove_noise<T: Float>(z: &[T], n: &[T], t: usize, sch: &Schedule) -> Result<Vec<T>> {
    if z.len() != n.len() {
        return Err(shape_err!("latent has {} values, noise {}", z.len(), n.len()));
    }
    let alpha = sch.alpha(t)?;
    if alpha == 0.0 {
        return Err(Error::SingularSchedule(t));
    }
    let a = T::from(alpha).unwrap();
    let b = T::from(sch.beta(t)?).unwrap();
    Ok(z.iter().zip(n).map(|(&z, &n)| (z - b * n) / a).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_holds_for_default_schedule() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.len(), 1000);
        for t in 0..s.len() {
            let (a, b) = (s.alpha(t).unwrap(), s.beta(t).unwrap());
            assert!((a * a + b * b - 1.0).abs() <= 1e-10);
            assert!(a > 0.0 && a <= 1.0 && (0.0..1.0).contains(&b));
        }
        assert!(s.alphas().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_step_closed_form() {
        let s = make_schedule(1, 0.5, 0.5).unwrap();
        assert!((s.alpha(0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((s.beta(0).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn add_noise_linearity_and_bounds() {
        let s = ScheduleConfig::default().build().unwrap();
        let n = [0.3, -1.2, 2.0];
        let out = add_noise(&[0.0; 3], &n, 200, &s).unwrap();
        let b = s.beta(200).unwrap();
        for (o, n) in out.iter().zip(n) {
            assert_eq!(*o, b * n);
        }
        assert!(add_noise(&[0.0; 2], &n, 0, &s).is_err());
        assert!(add_noise(&[0.0; 3], &n, 1000, &s).is_err());
    }

    #[test]
    fn noiseless_step_is_identity() {
        // Smallest admissible variance: alpha_0 = sqrt(1 - 1e-300) rounds to 1.
        let s = make_schedule(1, 1e-300, 1e-300).unwrap();
        assert_eq!(s.alpha(0).unwrap(), 1.0);
        let z = [0.25, -3.0, 7.5];
        assert_eq!(add_noise(&z, &[9.0, 9.0, 9.0], 0, &s).unwrap(), z.to_vec());
    }
}
