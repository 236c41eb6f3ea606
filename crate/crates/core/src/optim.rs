//! Gradient post-processing and RMSprop.
//!
//! An update is always applied in the same order: per-component value
//! clipping to `[-C, C]`, then the recurrent ℓ2 penalty gradient `2βK`
//! (recurrent matrices only), then the RMSprop step
//!
//! ```text
//! a ← ρ·a + (1 − ρ)·g²
//! θ ← θ − η·g / (√a + ε)
//! ```

use serde::{Deserialize, Serialize};

use crate::engine::{LayerStack, ParamRole};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RmspropConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            rho: 0.9,
            epsilon: 1e-8,
        }
    }
}

impl RmspropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate must be positive"));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::config("optimizer.rho must lie in (0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon must be positive"));
        }
        Ok(())
    }
}

/// Squared-gradient accumulators for one model.
#[derive(Clone, Debug, PartialEq)]
pub struct Rmsprop {
    config: RmspropConfig,
    accumulators: LayerStack,
}

impl Rmsprop {
    pub fn new(config: RmspropConfig, params: &LayerStack) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            accumulators: params.zeros_like(),
        })
    }

    pub fn config(&self) -> &RmspropConfig {
        &self.config
    }

    pub fn accumulators(&self) -> &LayerStack {
        &self.accumulators
    }

    /// Applies one RMSprop step with already post-processed gradients.
    pub fn step(&mut self, params: &mut LayerStack, grads: &LayerStack) -> Result<()> {
        if params.arch() != grads.arch() || params.arch() != self.accumulators.arch() {
            return Err(Error::config(
                "optimizer state, parameters and gradients have different shapes",
            ));
        }
        let RmspropConfig {
            learning_rate,
            rho,
            epsilon,
        } = self.config;
        let mut updated = params.clone();
        let mut acc_next = self.accumulators.clone();
        for (((_, p), (_, g)), (_, a)) in updated
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(acc_next.tensors_mut())
        {
            for ((p, &g), a) in p.iter_mut().zip(g).zip(a.iter_mut()) {
                *a = rho * *a + (1.0 - rho) * g * g;
                *p -= learning_rate * g / (a.sqrt() + epsilon);
            }
        }
        for (_, t) in updated.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric("parameters after RMSprop update"));
            }
        }
        *params = updated;
        self.accumulators = acc_next;
        Ok(())
    }

    /// Clip, add the recurrent penalty, then step.
    pub fn update(
        &mut self,
        params: &mut LayerStack,
        mut grads: LayerStack,
        clip: f64,
        recurrent_l2: f64,
    ) -> Result<()> {
        clip_gradients(&mut grads, clip)?;
        add_recurrent_l2(&mut grads, params, recurrent_l2)?;
        self.step(params, &grads)
    }
}

/// Clamps every gradient component into `[-clip, clip]`.
pub fn clip_gradients(grads: &mut LayerStack, clip: f64) -> Result<()> {
    if !(clip > 0.0) {
        return Err(Error::config("clip value must be positive"));
    }
    for (_, t) in grads.tensors_mut() {
        for g in t {
            *g = g.clamp(-clip, clip);
        }
    }
    Ok(())
}

/// Adds `2β·K` to the gradient of every recurrent matrix `K`, i.e. the
/// gradient of `β·Σ‖K‖²_F`. Everything else is left alone.
pub fn add_recurrent_l2(grads: &mut LayerStack, params: &LayerStack, beta: f64) -> Result<()> {
    if !(beta >= 0.0) {
        return Err(Error::config("recurrent regularization must be non-negative"));
    }
    if beta == 0.0 {
        return Ok(());
    }
    for ((role, g), (_, p)) in grads.tensors_mut().into_iter().zip(params.tensors()) {
        if role == ParamRole::RecurrentWeights {
            for (g, &k) in g.iter_mut().zip(p) {
                *g += 2.0 * beta * k;
            }
        }
    }
    Ok(())
}

/// The penalty value `β·Σ‖K‖²_F` itself.
pub fn recurrent_l2_penalty(params: &LayerStack, beta: f64) -> f64 {
    params
        .tensors()
        .into_iter()
        .filter(|(role, _)| *role == ParamRole::RecurrentWeights)
        .map(|(_, k)| k.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{HeadActivation, StackArch};
    use proptest::prelude::*;

    fn small() -> LayerStack {
        LayerStack::init(
            &StackArch {
                input_size: 2,
                hidden_sizes: vec![3],
                output_size: 1,
                head: HeadActivation::Linear,
            },
            5,
        )
        .unwrap()
    }

    fn filled(like: &LayerStack, v: f64) -> LayerStack {
        let mut g = like.zeros_like();
        for (_, t) in g.tensors_mut() {
            t.fill(v);
        }
        g
    }

    #[test]
    fn clipping_examples() {
        let p = small();
        let mut g = filled(&p, 10.0);
        clip_gradients(&mut g, 1.0).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 1.0)));

        let mut g = filled(&p, -0.5);
        clip_gradients(&mut g, 1.0).unwrap();
        assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == -0.5)));

        let mut g = p.zeros_like();
        clip_gradients(&mut g, 1.0).unwrap();
        assert_eq!(g, p.zeros_like());

        assert!(clip_gradients(&mut g, 0.0).is_err());
    }

    #[test]
    fn recurrent_l2_touches_only_recurrent_matrices() {
        let mut p = small();
        p.layers[0].recurrent_weights.fill(0.3);
        let mut g = p.zeros_like();
        add_recurrent_l2(&mut g, &p, 1.5).unwrap();
        for (role, t) in g.tensors() {
            if role == ParamRole::RecurrentWeights {
                assert!(t.iter().all(|&v| (v - 0.9).abs() < 1e-15));
            } else {
                assert!(t.iter().all(|&v| v == 0.0));
            }
        }

        let mut g0 = filled(&p, 0.25);
        let before = g0.clone();
        add_recurrent_l2(&mut g0, &p, 0.0).unwrap();
        assert_eq!(g0, before);
    }

    #[test]
    fn fresh_state_step_matches_hand_value() {
        let mut p = small();
        let before = p.clone();
        let g = filled(&p, 0.2);
        let mut opt = Rmsprop::new(RmspropConfig::default(), &p).unwrap();
        opt.step(&mut p, &g).unwrap();
        let expected = -0.001 * 0.2 / ((0.1f64 * 0.04).sqrt() + 1e-8);
        assert!((expected + 0.0031623).abs() < 1e-7);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(before.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!(((x - y) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = small();
        let before = p.clone();
        let mut opt = Rmsprop::new(RmspropConfig::default(), &p).unwrap();
        let z = p.zeros_like();
        opt.step(&mut p, &z).unwrap();
        let once = (p.clone(), opt.clone());
        opt.step(&mut p, &z).unwrap();
        assert_eq!(p, before);
        assert_eq!(p, once.0);
        assert_eq!(opt, once.1);
    }

    #[test]
    fn non_finite_gradient_is_reported() {
        let mut p = small();
        let mut g = p.zeros_like();
        g.head.bias[0] = f64::NAN;
        let mut opt = Rmsprop::new(RmspropConfig::default(), &p).unwrap();
        assert!(matches!(opt.step(&mut p, &g), Err(Error::Numeric { .. })));
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(vals in prop::collection::vec(-50.0f64..50.0, 1..40), c in 0.01f64..10.0) {
            let p = small();
            let mut g = p.zeros_like();
            for (_, t) in g.tensors_mut() {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = vals[i % vals.len()];
                }
            }
            clip_gradients(&mut g, c).unwrap();
            let once = g.clone();
            clip_gradients(&mut g, c).unwrap();
            prop_assert_eq!(&g, &once);
            prop_assert!(g.tensors().iter().all(|(_, t)| t.iter().all(|v| v.abs() <= c)));
        }

        #[test]
        fn update_opposes_gradient(vals in prop::collection::vec(prop_oneof![-5.0f64..-1e-3, 1e-3f64..5.0], 1..20), beta in 0.0f64..2.0) {
            let mut p = small();
            for (_, t) in p.tensors_mut() { t.fill(0.0); }
            let before = p.clone();
            let mut g = p.zeros_like();
            for (_, t) in g.tensors_mut() {
                for (i, v) in t.iter_mut().enumerate() {
                    *v = vals[i % vals.len()];
                }
            }
            let mut processed = g.clone();
            clip_gradients(&mut processed, 1.0).unwrap();
            add_recurrent_l2(&mut processed, &before, beta).unwrap();
            let mut opt = Rmsprop::new(RmspropConfig::default(), &p).unwrap();
            opt.update(&mut p, g, 1.0, beta).unwrap();
            for (((_, a), (_, b)), (_, gr)) in p.tensors().into_iter().zip(before.tensors()).zip(processed.tensors()) {
                for ((x, y), g) in a.iter().zip(b).zip(gr) {
                    prop_assert!((x - y) * g < 0.0);
                }
            }
        }
    }
}
