//! Projected gradient descent in the L-infinity ball.
//!
//! The attack perturbs one image to maximize the classifier's
//! cross-entropy against its true label, taking sign-gradient steps and
//! projecting back into `[x - eps, x + eps] ∩ [0, 1]` after each step.

use super::classifier::Classifier;
use crate::error::{Error, Result};
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

/// Largest perturbation budget the impairment scale is calibrated over
/// (96/255 in pixel units; feature rotation saturates beyond that, so a
/// larger search range buys no additional impairment).
pub const EPS_MAX: f32 = 96.0 / 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    /// L-infinity budget in `[0, EPS_MAX]`. Zero disables the attack.
    pub epsilon: f32,
    /// Per-iteration step. Defaults to `epsilon / 4`.
    pub step_size: f32,
    pub iterations: usize,
    /// Start from a uniform point inside the ball instead of the input.
    pub random_start: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::for_epsilon(8.0 / 255.0)
    }
}

impl AttackConfig {
    /// The standard attack at a given budget: 10 iterations of `eps / 4`
    /// steps from a random start.
    pub fn for_epsilon(epsilon: f32) -> Self {
        AttackConfig {
            epsilon,
            step_size: epsilon / 4.0,
            iterations: 10,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(Error::Config(format!(
                "attack epsilon must be finite and non-negative, got {}",
                self.epsilon
            )));
        }
        if self.epsilon == 0.0 {
            return Ok(()); // no-op attack; remaining knobs are unused
        }
        if !self.step_size.is_finite() || self.step_size <= 0.0 || self.step_size > self.epsilon {
            return Err(Error::Config(format!(
                "attack step size must lie in (0, epsilon], got {} for epsilon {}",
                self.step_size, self.epsilon
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("attack needs at least one iteration".into()));
        }
        Ok(())
    }
}

/// Attack a single `[3, 32, 32]` image in `[0, 1]`. The classifier's
/// weights are not modified; `rng` drives only the random start, so a
/// cloned rng reproduces the attack exactly.
pub fn pgd_attack(
    image: &Array3<f32>,
    label: u8,
    clf: &mut Classifier,
    cfg: &AttackConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Array3<f32>> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(image.clone());
    }

    let clamp01 = |v: f32| v.clamp(0.0, 1.0);
    let mut x = image.clone();
    if cfg.random_start {
        x.zip_mut_with(image, |xv, &orig| {
            let u: f32 = rng.random_range(-1.0..=1.0);
            *xv = clamp01(orig + cfg.epsilon * u);
        });
    }

    let labels = [label];
    for _ in 0..cfg.iterations {
        let batch: Array4<f32> = x.clone().insert_axis(Axis(0));
        let (_, g_batch) = clf.input_gradient(&batch, &labels)?;
        let g = g_batch.index_axis(Axis(0), 0);
        // Ascend the loss, then project into the ball around the original.
        ndarray::Zip::from(&mut x)
            .and(&g)
            .and(image)
            .for_each(|xv, &gv, &orig| {
                let stepped = *xv + cfg.step_size * gv.signum();
                *xv = clamp01(stepped.clamp(orig - cfg.epsilon, orig + cfg.epsilon));
            });
    }
    Ok(x)
}
