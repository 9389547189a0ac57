//! Rotary position embeddings: application and exact inversion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which coordinates are rotated together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RopePairing {
    /// Pairs `(x[2i], x[2i+1])`.
    #[default]
    Interleaved,
    /// Pairs `(x[i], x[i + d/2])`.
    HalfSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta_base: f64,
    #[serde(default)]
    pub pairing: RopePairing,
}

impl RopeConfig {
    pub const DEFAULT_THETA: f64 = 10_000.0;

    pub fn new(head_dim: usize, theta_base: f64) -> Result<Self> {
        let cfg = Self {
            head_dim,
            theta_base,
            pairing: RopePairing::Interleaved,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_pairing(mut self, pairing: RopePairing) -> Self {
        self.pairing = pairing;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.theta_base > 0.0) || !self.theta_base.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "rope theta_base must be positive, got {}",
                self.theta_base
            )));
        }
        Ok(())
    }

    /// Frequency of rotation pair `i`: `theta_base^(-2i/d)`.
    pub fn frequency(&self, i: usize) -> f64 {
        self.theta_base.powf(-2.0 * i as f64 / self.head_dim as f64)
    }

    #[inline]
    fn pair(&self, i: usize) -> (usize, usize) {
        match self.pairing {
            RopePairing::Interleaved => (2 * i, 2 * i + 1),
            RopePairing::HalfSplit => (i, i + self.head_dim / 2),
        }
    }

    fn rotate(&self, x: &mut [f64], position: usize, sign: f64) -> Result<()> {
        if x.len() != self.head_dim {
            return Err(Error::DimensionMismatch(format!(
                "rope expects dim {}, got {}",
                self.head_dim,
                x.len()
            )));
        }
        let p = position as f64;
        for i in 0..self.head_dim / 2 {
            let (a, b) = self.pair(i);
            let (s, c) = (p * self.frequency(i)).sin_cos();
            let s = sign * s;
            let (xa, xb) = (x[a], x[b]);
            x[a] = xa * c - xb * s;
            x[b] = xa * s + xb * c;
        }
        Ok(())
    }

    pub fn apply_in_place(&self, x: &mut [f64], position: usize) -> Result<()> {
        self.rotate(x, position, 1.0)
    }

    pub fn invert_in_place(&self, x: &mut [f64], position: usize) -> Result<()> {
        self.rotate(x, position, -1.0)
    }
}

/// Rotates `x` to `position`.
pub fn rope_apply(x: &[f64], position: usize, config: &RopeConfig) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    config.apply_in_place(&mut out, position)?;
    Ok(out)
}

/// Undoes [`rope_apply`] at the same position.
pub fn rope_invert(x: &[f64], position: usize, config: &RopeConfig) -> Result<Vec<f64>> {
    let mut out = x.to_vec();
    config.invert_in_place(&mut out, position)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{dot, norm};
    use proptest::prelude::*;

    fn cfg(d: usize) -> RopeConfig {
        RopeConfig::new(d, RopeConfig::DEFAULT_THETA).unwrap()
    }

    #[test]
    fn position_zero_is_identity() {
        let x = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(rope_apply(&x, 0, &cfg(4)).unwrap(), x);
        assert_eq!(rope_invert(&x, 0, &cfg(4)).unwrap(), x);
    }

    #[test]
    fn two_dim_unit_rotation() {
        let y = rope_apply(&[1.0, 0.0], 1, &cfg(2)).unwrap();
        // mpmath: cos 1 = 0.5403023058681397174..., sin 1 = 0.8414709848078965066...
        assert!((y[0] - 0.540_302_305_868_139_7).abs() < 1e-15);
        assert!((y[1] - 0.841_470_984_807_896_5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(rope_apply(&[1.0, 2.0, 3.0], 1, &cfg(4)).is_err());
        assert!(rope_invert(&[1.0, 2.0], 1, &cfg(4)).is_err());
    }

    #[test]
    fn odd_head_dim_is_rejected() {
        assert!(RopeConfig::new(3, 10_000.0).is_err());
        assert!(RopeConfig::new(4, 0.0).is_err());
    }

    #[test]
    fn round_trip_at_listed_positions() {
        let c = cfg(16);
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        for p in [0, 1, 2047, 10_000] {
            let back = rope_invert(&rope_apply(&x, p, &c).unwrap(), p, &c).unwrap();
            for (a, b) in back.iter().zip(&x) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_split_pairs_first_and_second_halves() {
        let c = cfg(4).with_pairing(RopePairing::HalfSplit);
        // pair 0 is (x0, x2) at frequency 1
        let y = rope_apply(&[1.0, 0.0, 0.0, 0.0], 1, &c).unwrap();
        assert!((y[0] - 1f64.cos()).abs() < 1e-15);
        assert!((y[2] - 1f64.sin()).abs() < 1e-15);
        assert_eq!(y[1], 0.0);
    }

    proptest! {
        #[test]
        fn isometry(x in proptest::collection::vec(-5.0f64..5.0, 8), p in 0usize..50_000) {
            let y = rope_apply(&x, p, &cfg(8)).unwrap();
            prop_assert!((norm(&y) - norm(&x)).abs() < 1e-12);
        }

        #[test]
        fn composition(x in proptest::collection::vec(-5.0f64..5.0, 8), p2 in 0usize..5000, dp in 0usize..5000) {
            let c = cfg(8);
            let p1 = p2 + dp;
            let lhs = rope_invert(&rope_apply(&x, p1, &c).unwrap(), p2, &c).unwrap();
            let rhs = rope_apply(&x, dp, &c).unwrap();
            for (a, b) in lhs.iter().zip(&rhs) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn relative_position(
            q in proptest::collection::vec(-2.0f64..2.0, 8),
            k in proptest::collection::vec(-2.0f64..2.0, 8),
            p in 0usize..2000, s in 0usize..2000, shift in 0usize..2000,
        ) {
            let c = cfg(8);
            let a = dot(&rope_apply(&q, p, &c).unwrap(), &rope_apply(&k, s, &c).unwrap());
            let b = dot(&rope_apply(&q, p + shift, &c).unwrap(), &rope_apply(&k, s + shift, &c).unwrap());
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
