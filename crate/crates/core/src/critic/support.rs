use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Scalar};

/// Fixed categorical support: `num_bins` equal-width bins covering `[v_min, v_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSupport {
    pub v_min: f64,
    pub v_max: f64,
    pub num_bins: usize,
    /// Standard deviation of the HL-Gauss smoothing kernel.
    pub hl_sigma: f64,
}

/// Default kernel width as a multiple of the bin width.
pub const HL_SIGMA_RATIO: f64 = 0.75;

impl ValueSupport {
    /// Support with the default kernel width `0.75 * bin width`.
    pub fn new(v_min: f64, v_max: f64, num_bins: usize) -> Result<Self> {
        if num_bins < 2 {
            return Err(Error::Config("value support needs at least 2 bins".into()));
        }
        let w = (v_max - v_min) / num_bins as f64;
        Self::with_sigma(v_min, v_max, num_bins, HL_SIGMA_RATIO * w)
    }

    pub fn with_sigma(v_min: f64, v_max: f64, num_bins: usize, hl_sigma: f64) -> Result<Self> {
        let s = Self {
            v_min,
            v_max,
            num_bins,
            hl_sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_min.is_finite() && self.v_max.is_finite() && self.v_min < self.v_max) {
            return Err(Error::Config(format!(
                "value support needs finite v_min < v_max, got [{}, {}]",
                self.v_min, self.v_max
            )));
        }
        if self.num_bins < 2 {
            return Err(Error::Config("value support needs at least 2 bins".into()));
        }
        if !(self.hl_sigma > 0.0 && self.hl_sigma.is_finite()) {
            return Err(Error::Config("hl_sigma must be positive".into()));
        }
        Ok(())
    }

    /// Support spanning `[lo, hi]` widened by `margin * (hi - lo)` on each side.
    pub fn from_range(lo: f64, hi: f64, margin: f64, num_bins: usize) -> Result<Self> {
        let span = (hi - lo).abs().max(1e-3);
        Self::new(lo - margin * span, hi + margin * span, num_bins)
    }

    pub fn bin_width(&self) -> f64 {
        (self.v_max - self.v_min) / self.num_bins as f64
    }

    /// `num_bins + 1` bin edges.
    pub fn edges(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..=self.num_bins)
            .map(|i| {
                if i == self.num_bins {
                    self.v_max
                } else {
                    self.v_min + i as f64 * w
                }
            })
            .collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.num_bins)
            .map(|i| self.v_min + (i as f64 + 0.5) * w)
            .collect()
    }
}

/// Probability vector over the bins of a [`ValueSupport`].
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalValue<T> {
    pub probs: Vec<T>,
}

impl<T: Scalar> CategoricalValue<T> {
    pub fn new(probs: Vec<T>) -> Result<Self> {
        let sum: f64 = probs.iter().map(|&p| to_f64(p)).sum();
        if probs.iter().any(|&p| !(p >= T::zero())) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!(
                "categorical probabilities must be nonnegative and sum to 1 (sum {sum})"
            )));
        }
        Ok(Self { probs })
    }

    pub fn uniform(bins: usize) -> Self {
        Self {
            probs: vec![lit(1.0 / bins as f64); bins],
        }
    }
}

/// `P(a < X < b)` for a standard normal `X`, accurate in both tails.
fn normal_mass(a: f64, b: f64) -> f64 {
    let r = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a * r) - libm::erfc(b * r))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * r) - libm::erfc(-a * r))
    } else {
        0.5 * (libm::erf(b * r) - libm::erf(a * r))
    }
}

/// HL-Gauss projection of a scalar target onto the support.
///
/// Bin `i` receives the mass of `N(y, hl_sigma^2)` over `[e_i, e_{i+1}]`,
/// renormalized over the support. Targets so far outside that the kernel
/// has no representable mass on the support collapse onto the nearest edge bin.
pub fn hl_gauss_project<T: Scalar>(y: f64, support: &ValueSupport) -> CategoricalValue<T> {
    let edges = support.edges();
    let s = support.hl_sigma;
    let mass: Vec<f64> = edges
        .windows(2)
        .map(|e| normal_mass((e[0] - y) / s, (e[1] - y) / s))
        .collect();
    let total: f64 = mass.iter().sum();
    let n = support.num_bins;
    if !(total > 1e-300) {
        let mut probs = vec![T::zero(); n];
        let idx = if y <= support.v_min { 0 } else { n - 1 };
        probs[idx] = T::one();
        return CategoricalValue { probs };
    }
    CategoricalValue {
        probs: mass.into_iter().map(|m| lit(m / total)).collect(),
    }
}

/// Mean of the categorical distribution, `sum_i p_i c_i`.
pub fn scalar_q<T: Scalar>(dist: &CategoricalValue<T>, support: &ValueSupport) -> T {
    dist.probs
        .iter()
        .zip(support.centers())
        .map(|(&p, c)| p * lit(c))
        .sum()
}
