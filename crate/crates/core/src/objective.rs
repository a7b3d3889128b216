//! Masked binary cross-entropy, soft Dice and their sum, accumulated in
//! double precision over valid pixels only.

use num_traits::Float;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Smoothing constant added to the Dice numerator and denominator.
    pub epsilon: f64,
    /// Probabilities are clamped to `[prob_clamp, 1 - prob_clamp]` inside logs.
    pub prob_clamp: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            epsilon: 1e-6,
            prob_clamp: 1e-7,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1e-3) {
            return Err(Error::Config(format!("epsilon {} outside (0, 1e-3]", self.epsilon)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp <= 1e-4) {
            return Err(Error::Config(format!(
                "prob_clamp {} outside (0, 1e-4]",
                self.prob_clamp
            )));
        }
        Ok(())
    }
}

/// Logistic function, evaluated so that neither branch overflows.
pub fn sigmoid<F: Float>(z: F) -> F {
    let one = F::one();
    if z >= F::zero() {
        one / (one + (-z).exp())
    } else {
        let e = z.exp();
        e / (one + e)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub total: f64,
}

/// Running sums behind both losses. Sums from disjoint pixel sets can be
/// merged, which is how validation loss is pooled over a whole split.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossSums {
    pub log_likelihood: f64,
    pub valid: f64,
    pub intersection: f64,
    pub prob_sum: f64,
    pub label_sum: f64,
}

fn check_lengths(p: usize, y: usize, m: usize) -> Result<()> {
    if p != y || p != m {
        return Err(Error::DimensionMismatch(format!(
            "{p} probabilities, {y} labels, {m} mask cells"
        )));
    }
    Ok(())
}

fn label_value(y: u8) -> Result<f64> {
    match y {
        0 => Ok(0.0),
        1 => Ok(1.0),
        other => Err(Error::Invariant(format!("label {other} at a valid pixel"))),
    }
}

impl LossSums {
    pub fn accumulate<F: Float>(
        &mut self,
        p: &[F],
        y: &[u8],
        m: &[bool],
        config: &ObjectiveConfig,
    ) -> Result<()> {
        check_lengths(p.len(), y.len(), m.len())?;
        let (lo, hi) = (config.prob_clamp, 1.0 - config.prob_clamp);
        for ((&pi, &yi), &mi) in p.iter().zip(y).zip(m) {
            if !mi {
                continue;
            }
            let pi = pi.to_f64().unwrap_or(f64::NAN);
            let yi = label_value(yi)?;
            let pc = pi.clamp(lo, hi);
            self.log_likelihood += yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
            self.valid += 1.0;
            self.intersection += pi * yi;
            self.prob_sum += pi;
            self.label_sum += yi;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LossSums) {
        self.log_likelihood += other.log_likelihood;
        self.valid += other.valid;
        self.intersection += other.intersection;
        self.prob_sum += other.prob_sum;
        self.label_sum += other.label_sum;
    }

    pub fn bce(&self) -> Result<f64> {
        if self.valid == 0.0 {
            return Err(Error::EmptyValidMask);
        }
        Ok(-self.log_likelihood / self.valid)
    }

    pub fn dice(&self, config: &ObjectiveConfig) -> Result<f64> {
        if self.valid == 0.0 {
            return Err(Error::EmptyValidMask);
        }
        let eps = config.epsilon;
        Ok(1.0 - (2.0 * self.intersection + eps) / (self.prob_sum + self.label_sum + eps))
    }

    pub fn finish(&self, config: &ObjectiveConfig) -> Result<LossBreakdown> {
        let bce = self.bce()?;
        let dice = self.dice(config)?;
        Ok(LossBreakdown {
            bce,
            dice,
            total: bce + dice,
        })
    }
}

fn sums<F: Float>(p: &[F], y: &[u8], m: &[bool], config: &ObjectiveConfig) -> Result<LossSums> {
    let mut s = LossSums::default();
    s.accumulate(p, y, m, config)?;
    Ok(s)
}

/// Mean binary cross-entropy over pixels with `m[i]` set.
pub fn masked_bce<F: Float>(p: &[F], y: &[u8], m: &[bool], config: &ObjectiveConfig) -> Result<f64> {
    sums(p, y, m, config)?.bce()
}

/// `1 - (2 sum(p y) + eps) / (sum(p) + sum(y) + eps)` over valid pixels.
pub fn soft_dice<F: Float>(p: &[F], y: &[u8], m: &[bool], config: &ObjectiveConfig) -> Result<f64> {
    sums(p, y, m, config)?.dice(config)
}

pub fn total_loss<F: Float>(
    p: &[F],
    y: &[u8],
    m: &[bool],
    config: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    sums(p, y, m, config)?.finish(config)
}

/// Composite loss of `sigmoid(logits)` and its gradient w.r.t. each logit.
/// Invalid pixels get a zero gradient; so do pixels whose probability is
/// clamped, where the BCE term is flat.
pub fn logit_loss_and_grad<F: Float>(
    logits: &[F],
    y: &[u8],
    m: &[bool],
    config: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_lengths(logits.len(), y.len(), m.len())?;
    let p: Vec<f64> = logits
        .iter()
        .map(|z| sigmoid(z.to_f64().unwrap_or(f64::NAN)))
        .collect();
    let s = sums(&p, y, m, config)?;
    let loss = s.finish(config)?;
    let (lo, hi) = (config.prob_clamp, 1.0 - config.prob_clamp);
    let num = 2.0 * s.intersection + config.epsilon;
    let den = s.prob_sum + s.label_sum + config.epsilon;
    let grad = p
        .iter()
        .zip(y)
        .zip(m)
        .map(|((&pi, &yi), &mi)| {
            if !mi {
                return 0.0;
            }
            let yi = f64::from(yi);
            let dp = pi * (1.0 - pi);
            let bce = if (lo..=hi).contains(&pi) {
                (pi - yi) / s.valid
            } else {
                0.0
            };
            let dice = -(2.0 * yi * den - num) / (den * den);
            bce + dice * dp
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CFG: ObjectiveConfig = ObjectiveConfig {
        epsilon: 1e-6,
        prob_clamp: 1e-7,
    };

    #[test]
    fn sigmoid_fixed_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        let hi = sigmoid(88.0f64);
        assert!(hi.is_finite() && (1.0 - hi).abs() < 1e-12);
        assert!(sigmoid(-100.0f64) > 0.0);
        assert!(sigmoid(100.0f32).is_finite());
        for z in [-30.0, -3.5, -0.1, 0.7, 12.0f64] {
            assert!((sigmoid(-z) - (1.0 - sigmoid(z))).abs() < 1e-12);
        }
    }

    #[test]
    fn bce_closed_forms() {
        let v = masked_bce(&[0.5f64], &[1], &[true], &CFG).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);

        let v = masked_bce(&[0.9, 0.2, 0.37f64], &[1, 0, 1], &[true, true, false], &CFG).unwrap();
        let hand = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((v - hand).abs() < 1e-15);
        assert!((v - 0.164252).abs() < 1e-6);

        let perfect = masked_bce(&[1.0, 0.0f64], &[1, 0], &[true, true], &CFG).unwrap();
        assert!(perfect <= -(1.0 - 1e-7f64).ln() + 1e-18);
    }

    #[test]
    fn dice_closed_forms() {
        let y = [1u8, 0, 1, 1];
        let m = [true; 4];
        let p: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
        assert!(soft_dice(&p, &y, &m, &CFG).unwrap().abs() < 1e-15);

        let n = 10.0;
        let d = soft_dice(&[0.0f64; 10], &[1; 10], &[true; 10], &CFG).unwrap();
        assert!((d - (1.0 - 1e-6 / (n + 1e-6))).abs() < 1e-15);

        let d = soft_dice(&[0.5f64; 10], &[1; 10], &[true; 10], &CFG).unwrap();
        let want = 1.0 - (n + 1e-6) / (1.5 * n + 1e-6);
        assert!((d - want).abs() < 1e-15);
        assert!((d - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn total_of_the_two_pixel_case() {
        let p = [0.9, 0.2, 0.37f64];
        let y = [1u8, 0, 1];
        let m = [true, true, false];
        let t = total_loss(&p, &y, &m, &CFG).unwrap();
        // by hand: intersection 0.9, prob sum 1.1, label sum 1
        let dice = 1.0 - (1.8 + 1e-6) / (2.1 + 1e-6);
        let bce = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
        assert!((t.dice - dice).abs() < 1e-15);
        assert!((t.total - (bce + dice)).abs() < 1e-12);
        assert_eq!(t.total, t.bce + t.dice);
    }

    #[test]
    fn empty_mask_errors() {
        let err = masked_bce(&[0.3f64], &[1], &[false], &CFG).unwrap_err();
        assert!(matches!(err, Error::EmptyValidMask));
        assert!(soft_dice(&[0.3f64], &[1], &[false], &CFG).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(CFG.validate().is_ok());
        let bad = ObjectiveConfig {
            epsilon: 0.1,
            ..CFG
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bce_logit_gradient_matches_finite_differences() {
        // BCE alone: take a huge epsilon-free view by differencing the BCE part.
        let z = [0.3, -1.2, 2.0, 0.05, -0.7f64];
        let y = [1u8, 0, 0, 1, 1];
        let m = [true, true, false, true, true];
        let bce_of = |z: &[f64]| {
            let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();
            masked_bce(&p, &y, &m, &CFG).unwrap()
        };
        let valid = 4.0;
        for i in 0..z.len() {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let fd = (bce_of(&zp) - bce_of(&zm)) / (2.0 * h);
            let analytic = if m[i] {
                (sigmoid(z[i]) - f64::from(y[i])) / valid
            } else {
                0.0
            };
            if analytic == 0.0 {
                assert!(fd.abs() < 1e-12);
            } else {
                assert!(((fd - analytic) / analytic).abs() < 1e-6, "{i}: {fd} vs {analytic}");
            }
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let z = [0.3, -1.2, 2.0, 0.05, -0.7, 1.1f64];
        let y = [1u8, 0, 0, 1, 1, 7];
        let m = [true, true, true, true, true, false];
        let (_, g) = logit_loss_and_grad(&z, &y, &m, &CFG).unwrap();
        for i in 0..z.len() {
            let h = 1e-6;
            let mut zp = z;
            let mut zm = z;
            zp[i] += h;
            zm[i] -= h;
            let f = |z: &[f64]| logit_loss_and_grad(z, &y, &m, &CFG).unwrap().0.total;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-7 * (1.0 + g[i].abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn invalid_pixels_never_matter(
            p in prop::collection::vec(0.0f64..=1.0, 1..60),
            seed in any::<u64>(),
        ) {
            let n = p.len();
            let m: Vec<bool> = (0..n).map(|i| i == 0 || (seed >> (i % 64)) & 1 == 1).collect();
            let y: Vec<u8> = (0..n).map(|i| ((seed >> ((i + 7) % 64)) & 1) as u8).collect();
            let base = total_loss(&p, &y, &m, &CFG).unwrap();
            let mut p2 = p.clone();
            let mut y2 = y.clone();
            for i in 0..n {
                if !m[i] {
                    p2[i] = 1.0 - p2[i] * 0.5;
                    y2[i] = 200;
                }
            }
            let other = total_loss(&p2, &y2, &m, &CFG).unwrap();
            prop_assert_eq!(base.bce.to_bits(), other.bce.to_bits());
            prop_assert_eq!(base.dice.to_bits(), other.dice.to_bits());
        }

        #[test]
        fn ranges_and_permutation_invariance(
            p in prop::collection::vec(0.0f64..=1.0, 2..80),
            shift in 1usize..79,
        ) {
            let n = p.len();
            let y: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
            let m = vec![true; n];
            let t = total_loss(&p, &y, &m, &CFG).unwrap();
            prop_assert!(t.bce >= 0.0);
            prop_assert!((0.0..=1.0).contains(&t.dice));
            prop_assert!(t.total >= 0.0);
            let k = shift % n;
            let rot = |v: &[f64]| { let mut r = v.to_vec(); r.rotate_left(k); r };
            let mut y2 = y.clone();
            y2.rotate_left(k);
            let t2 = total_loss(&rot(&p), &y2, &m, &CFG).unwrap();
            prop_assert!((t.bce - t2.bce).abs() < 1e-12);
            prop_assert!((t.dice - t2.dice).abs() < 1e-12);
        }
    }
}
