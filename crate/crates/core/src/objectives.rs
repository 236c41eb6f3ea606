//! Losses and metrics. All logs are natural (nats); probabilities are floored
//! at `1e-12` before taking logs.
//!
//! Batches of real sequences are `(B, T)` arrays, per-step class
//! distributions are `(B, T, |X|)` arrays and labels are `(B, T)` arrays of
//! class indices.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

#[inline]
pub fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Which quantity stands in for the causally conditional entropy in the
/// releaser loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyTerm {
    /// Shannon entropy of the attacker's per-step output distribution.
    #[default]
    Predictive,
    /// The attacker's cross-entropy on the true labels (an upper bound).
    AdversarialXent,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistortionSpec {
    pub order: f64,
    pub lambda: f64,
    pub steps: usize,
}

impl DistortionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.order >= 2.0 && self.order.is_finite()) {
            return Err(Error::config(format!(
                "distortion order p must be a finite value >= 2, got {}",
                self.order
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("sequence length must be at least 1"));
        }
        Ok(())
    }
}

fn check_order(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("ℓp order must be finite and >= 1, got {p}")))
    }
}

/// `(Σ_t |z_t − y_t|^p)^{1/p}`, evaluated with max-scaling so large `p`
/// neither overflows nor underflows.
pub fn lp_distance(z: &[f64], y: &[f64], p: f64) -> Result<f64> {
    check_order(p)?;
    if z.len() != y.len() {
        return Err(Error::usage(format!(
            "sequences differ in length ({} vs {})",
            z.len(),
            y.len()
        )));
    }
    Ok(lp_norm(z.iter().zip(y).map(|(a, b)| a - b), p))
}

fn lp_norm(diff: impl Iterator<Item = f64> + Clone, p: f64) -> f64 {
    let max = diff.clone().fold(0.0f64, |m, d| m.max(d.abs()));
    if max == 0.0 {
        return 0.0;
    }
    let sum: f64 = diff.map(|d| (d.abs() / max).powf(p)).sum();
    max * sum.powf(1.0 / p)
}

/// `∂‖z − y‖_p / ∂z`; zero where the distance is zero.
pub fn lp_distance_grad(z: &[f64], y: &[f64], p: f64) -> Result<Vec<f64>> {
    let norm = lp_distance(z, y, p)?;
    if norm == 0.0 {
        return Ok(vec![0.0; z.len()]);
    }
    Ok(z.iter()
        .zip(y)
        .map(|(a, b)| {
            let d = a - b;
            d.signum() * (d.abs() / norm).powf(p - 1.0)
        })
        .collect())
}

fn check_batch(z: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    if z.dim() != y.dim() {
        return Err(Error::usage(format!(
            "release batch {:?} and reference batch {:?} differ in shape",
            z.dim(),
            y.dim()
        )));
    }
    if z.nrows() == 0 {
        return Err(Error::usage("empty batch"));
    }
    if z.ncols() == 0 {
        return Err(Error::usage("sequences must have at least one step"));
    }
    Ok(())
}

/// `E[‖Z − Y‖_p] / T`, the expectation taken as the batch mean.
pub fn normalized_distortion(z: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: f64) -> Result<f64> {
    check_batch(z, y)?;
    check_order(p)?;
    let (b, t) = z.dim();
    let total: f64 = z
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(zr, yr)| lp_norm(zr.iter().zip(yr.iter()).map(|(a, c)| a - c), p))
        .sum();
    Ok(total / (b as f64 * t as f64))
}

/// Value and gradient (w.r.t. `z`) of [`normalized_distortion`].
pub fn normalized_distortion_grad(
    z: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    p: f64,
) -> Result<(f64, Array2<f64>)> {
    let value = normalized_distortion(z, y, p)?;
    let (b, t) = z.dim();
    let scale = 1.0 / (b as f64 * t as f64);
    let mut grad = Array2::zeros((b, t));
    for ((zr, yr), mut gr) in z.rows().into_iter().zip(y.rows()).zip(grad.rows_mut()) {
        let g = lp_distance_grad(&zr.to_vec(), &yr.to_vec(), p)?;
        for (dst, v) in gr.iter_mut().zip(g) {
            *dst = v * scale;
        }
    }
    Ok((value, grad))
}

/// Normalized error `E[‖Y − Z‖_p] / E[‖Y‖_p]`.
pub fn ne_p(z: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, p: f64) -> Result<f64> {
    check_batch(z, y)?;
    check_order(p)?;
    let err: f64 = z
        .rows()
        .into_iter()
        .zip(y.rows())
        .map(|(zr, yr)| lp_norm(zr.iter().zip(yr.iter()).map(|(a, c)| c - a), p))
        .sum();
    let reference: f64 = y.rows().into_iter().map(|yr| lp_norm(yr.iter().copied(), p)).sum();
    if reference == 0.0 {
        return Err(Error::Degenerate(
            "reference batch is identically zero, NE_p undefined".into(),
        ));
    }
    Ok(err / reference)
}

fn check_probs(probs: ArrayView3<'_, f64>) -> Result<()> {
    let (b, t, k) = probs.dim();
    if b == 0 || t == 0 || k == 0 {
        return Err(Error::usage("probability batch must be nonempty"));
    }
    Ok(())
}

fn check_labels(probs: ArrayView3<'_, f64>, labels: ArrayView2<'_, usize>) -> Result<()> {
    check_probs(probs)?;
    let (b, t, k) = probs.dim();
    if labels.dim() != (b, t) {
        return Err(Error::usage(format!(
            "labels {:?} do not match probabilities ({b}, {t}, {k})",
            labels.dim()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::usage(format!(
            "label {bad} outside the alphabet of size {k}"
        )));
    }
    Ok(())
}

/// `(1/T) Σ_t E[−ln q(X_t | Z^t)]` with the expectation as the batch mean.
pub fn attacker_xent(probs: ArrayView3<'_, f64>, labels: ArrayView2<'_, usize>) -> Result<f64> {
    check_labels(probs, labels)?;
    let (b, t, _) = probs.dim();
    let total: f64 = labels
        .indexed_iter()
        .map(|((i, j), &l)| -floored_ln(probs[[i, j, l]]))
        .sum();
    Ok(total / (b * t) as f64)
}

/// Value and gradient (w.r.t. `probs`) of [`attacker_xent`].
pub fn attacker_xent_grad(
    probs: ArrayView3<'_, f64>,
    labels: ArrayView2<'_, usize>,
) -> Result<(f64, Array3<f64>)> {
    let value = attacker_xent(probs, labels)?;
    let (b, t, _) = probs.dim();
    let scale = 1.0 / (b * t) as f64;
    let mut grad = Array3::zeros(probs.raw_dim());
    for ((i, j), &l) in labels.indexed_iter() {
        let p = probs[[i, j, l]];
        if p > PROB_FLOOR {
            grad[[i, j, l]] = -scale / p;
        }
    }
    Ok((value, grad))
}

/// Batch mean of the Shannon entropy of each per-step distribution, i.e. the
/// per-step causally conditional entropy of the attacker's guesses given the
/// release.
pub fn predictive_entropy_rate(probs: ArrayView3<'_, f64>) -> Result<f64> {
    check_probs(probs)?;
    let (b, t, _) = probs.dim();
    let total: f64 = probs
        .lanes(Axis(2))
        .into_iter()
        .map(|row| row.iter().map(|&p| -p * floored_ln(p)).sum::<f64>())
        .sum();
    Ok(total / (b * t) as f64)
}

/// Value and gradient (w.r.t. `probs`) of [`predictive_entropy_rate`].
pub fn predictive_entropy_rate_grad(probs: ArrayView3<'_, f64>) -> Result<(f64, Array3<f64>)> {
    let value = predictive_entropy_rate(probs)?;
    let (b, t, _) = probs.dim();
    let scale = 1.0 / (b * t) as f64;
    let grad = probs.mapv(|p| {
        if p > PROB_FLOOR {
            -(p.ln() + 1.0) * scale
        } else {
            -(PROB_FLOOR.ln()) * scale
        }
    });
    Ok((value, grad))
}

/// `D − λ·h` where `h` is the per-step entropy term.
pub fn releaser_loss(distortion: f64, entropy_rate: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        distortion
    } else {
        distortion - lambda * entropy_rate
    }
}

/// Per-step argmax decisions, `(B, T)`.
pub fn argmax_decisions(probs: ArrayView3<'_, f64>) -> Array2<usize> {
    let (b, t, _) = probs.dim();
    Array2::from_shape_fn((b, t), |(i, j)| {
        let row = probs.slice(ndarray::s![i, j, ..]);
        let mut best = 0;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        best
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;

    #[test]
    fn lp_distance_examples() {
        assert_eq!(lp_distance(&[0.4, -1.0], &[0.4, -1.0], 2.0).unwrap(), 0.0);
        assert_relative_eq!(lp_distance(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap(), 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(lp_distance(&[1.0, 1.0], &[0.0, 0.0], 4.0).unwrap(), 1.189207115002721, epsilon = 1e-14);
        assert!(matches!(lp_distance(&[1.0], &[1.0, 2.0], 2.0), Err(Error::Usage(_))));
    }

    #[test]
    fn normalized_distortion_examples() {
        let y = array![[0.2, 0.5], [1.0, 0.0]];
        assert_eq!(normalized_distortion(y.view(), y.view(), 2.0).unwrap(), 0.0);

        // single sequence at distance 4.8 over 24 steps
        let mut z = Array2::zeros((1, 24));
        z[[0, 0]] = 4.8;
        let zero = Array2::zeros((1, 24));
        assert_relative_eq!(normalized_distortion(z.view(), zero.view(), 2.0).unwrap(), 0.2, epsilon = 1e-15);

        // distances 2 and 4, T = 2
        let z = array![[2.0, 0.0], [0.0, 4.0]];
        let zero = Array2::zeros((2, 2));
        assert_relative_eq!(normalized_distortion(z.view(), zero.view(), 2.0).unwrap(), 1.5, epsilon = 1e-15);

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(normalized_distortion(empty.view(), empty.view(), 2.0), Err(Error::Usage(_))));
    }

    #[test]
    fn ne_p_examples() {
        let y = array![[0.3, 1.2, 0.7], [0.9, 0.1, 0.4]];
        assert_eq!(ne_p(y.view(), y.view(), 2.0).unwrap(), 0.0);
        let z2 = y.mapv(|v| 2.0 * v);
        assert_relative_eq!(ne_p(z2.view(), y.view(), 2.0).unwrap(), 1.0, epsilon = 1e-15);
        let zero = Array2::zeros((2, 3));
        assert_relative_eq!(ne_p(zero.view(), y.view(), 4.0).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(ne_p(y.view(), zero.view(), 2.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ne_p_is_scale_invariant() {
        let y = array![[0.3, 1.2, 0.7], [0.9, 0.1, 0.4]];
        let z = array![[0.1, 1.0, 0.9], [1.3, 0.0, 0.2]];
        let a = ne_p(z.view(), y.view(), 4.0).unwrap();
        let b = ne_p(z.mapv(|v| 3.5 * v).view(), y.mapv(|v| 3.5 * v).view(), 4.0).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-14);
    }

    #[test]
    fn xent_examples() {
        let labels = array![[0usize, 1, 1], [1, 0, 0]];
        let perfect = Array3::from_shape_fn((2, 3, 2), |(i, j, k)| if labels[[i, j]] == k { 1.0 } else { 0.0 });
        assert_eq!(attacker_xent(perfect.view(), labels.view()).unwrap(), 0.0);

        let uniform2 = Array3::from_elem((2, 3, 2), 0.5);
        assert_relative_eq!(attacker_xent(uniform2.view(), labels.view()).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let uniform5 = Array3::from_elem((2, 3, 5), 0.2);
        assert_relative_eq!(attacker_xent(uniform5.view(), labels.view()).unwrap(), 5f64.ln(), epsilon = 1e-15);

        let bad = array![[0usize, 2, 1], [1, 0, 0]];
        assert!(matches!(attacker_xent(uniform2.view(), bad.view()), Err(Error::Usage(_))));
    }

    #[test]
    fn entropy_rate_examples() {
        let det = Array3::from_shape_fn((2, 3, 2), |(_, _, k)| if k == 0 { 1.0 } else { 0.0 });
        assert_eq!(predictive_entropy_rate(det.view()).unwrap(), 0.0);
        let uniform = Array3::from_elem((4, 3, 2), 0.5);
        assert_relative_eq!(predictive_entropy_rate(uniform.view()).unwrap(), 2f64.ln(), epsilon = 1e-15);
        let skew = Array3::from_shape_fn((3, 5, 2), |(_, _, k)| if k == 0 { 0.75 } else { 0.25 });
        assert_relative_eq!(predictive_entropy_rate(skew.view()).unwrap(), 0.5623351446188083, epsilon = 1e-14);
    }

    #[test]
    fn xent_equals_entropy_for_correct_deterministic_guesses() {
        let labels = array![[1usize, 0], [0, 1]];
        let probs = Array3::from_shape_fn((2, 2, 2), |(i, j, k)| if labels[[i, j]] == k { 1.0 } else { 0.0 });
        assert_eq!(
            attacker_xent(probs.view(), labels.view()).unwrap(),
            predictive_entropy_rate(probs.view()).unwrap()
        );
    }

    #[test]
    fn releaser_loss_examples() {
        assert_eq!(releaser_loss(0.3, 0.0, 5.0), 0.3);
        assert_eq!(releaser_loss(0.3, 2f64.ln(), 0.0), 0.3);
        assert_relative_eq!(releaser_loss(0.2, 0.5, 2.0), -0.8, epsilon = 1e-15);
    }

    #[test]
    fn distortion_spec_validation() {
        assert!(DistortionSpec { order: 2.0, lambda: 0.0, steps: 24 }.validate().is_ok());
        assert!(DistortionSpec { order: 1.5, lambda: 0.0, steps: 24 }.validate().is_err());
        assert!(DistortionSpec { order: 2.0, lambda: -1.0, steps: 24 }.validate().is_err());
        assert!(DistortionSpec { order: 2.0, lambda: 1.0, steps: 0 }.validate().is_err());
    }

    fn central_diff(f: impl Fn(&Array2<f64>) -> f64, z: &Array2<f64>, h: f64) -> Array2<f64> {
        let mut g = Array2::zeros(z.raw_dim());
        for idx in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp.as_slice_mut().unwrap()[idx] += h;
            zm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&zp) - f(&zm)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn distortion_gradient_matches_finite_differences() {
        let z = array![[0.3, -1.1, 0.8, 0.05], [1.4, 0.2, -0.6, 0.9]];
        let y = array![[0.1, -0.5, 0.2, 0.6], [0.4, 0.3, -0.1, 0.0]];
        for p in [2.0, 4.0, 5.0] {
            let (_, g) = normalized_distortion_grad(z.view(), y.view(), p).unwrap();
            let fd = central_diff(|zz| normalized_distortion(zz.view(), y.view(), p).unwrap(), &z, 1e-6);
            for (a, b) in g.iter().zip(fd.iter()) {
                assert_relative_eq!(a, b, epsilon = 1e-8, max_relative = 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn lp_norm_ordering(d in prop::collection::vec(-10.0f64..10.0, 1..48), p in 1.0f64..8.0, extra in 0.0f64..20.0) {
            let q = p + extra;
            let zero = vec![0.0; d.len()];
            let a = lp_distance(&d, &zero, p).unwrap();
            let b = lp_distance(&d, &zero, q).unwrap();
            prop_assert!(a >= b * (1.0 - 1e-12));
        }

        #[test]
        fn high_order_approaches_max(d in prop::collection::vec(-10.0f64..10.0, 1..=48)) {
            let zero = vec![0.0; d.len()];
            let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assume!(max > 0.0);
            let l32 = lp_distance(&d, &zero, 32.0).unwrap();
            prop_assert!(l32 >= max * (1.0 - 1e-12));
            prop_assert!((l32 - max) / max < 0.12);
        }

        #[test]
        fn releaser_loss_is_affine_in_lambda(d in 0.0f64..5.0, h in 0.0f64..2.0, l1 in 0.01f64..10.0, l2 in 0.01f64..10.0) {
            let slope = (releaser_loss(d, h, l2) - releaser_loss(d, h, l1)) / (l2 - l1);
            prop_assume!((l2 - l1).abs() > 1e-3);
            prop_assert!((slope + h).abs() < 1e-9);
        }
    }
}
