//! Training objectives: frame reconstruction, mask supervision and the
//! cycle-consistency pair coupling the two networks.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Completion, FrameCompleter, MaskPredictor};
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_f: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_y: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_f: 2.5,
            lambda_s: 0.25,
            lambda_c: 1.0,
            lambda_y: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_f", self.lambda_f),
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
            ("lambda_y", self.lambda_y),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss.{name} must be a non-negative number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_f: f64,
    pub l_s: f64,
    pub l_y: f64,
    pub l_m: f64,
    pub l_c: f64,
    pub total: f64,
}

/// Combines component losses: `l_c = l_m + λ_y·l_y` and
/// `total = λ_f·l_f + λ_s·l_s + λ_c·l_c`.
pub fn total_loss(l_f: f64, l_s: f64, l_m: f64, l_y: f64, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let l_c = l_m + w.lambda_y * l_y;
    Ok(LossReport {
        l_f,
        l_s,
        l_y,
        l_m,
        l_c,
        total: w.lambda_f * l_f + w.lambda_s * l_s + w.lambda_c * l_c,
    })
}

/// Whole-frame mean absolute error.
pub fn loss_reconstruction<'t, T: Scalar>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    pred.mean_abs_diff(gt)
}

/// Mean binary cross-entropy with predictions clamped to `[1e-7, 1-1e-7]`.
pub fn loss_mask<'t, T: Scalar>(pred: Var<'t, T>, gt: Var<'t, T>) -> Result<Var<'t, T>> {
    pred.bce_mean(gt)
}

/// How the predicted soft mask is turned into Φ's input on the cycle pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Binarization {
    /// Hard threshold forward, identity backward.
    #[default]
    StraightThrough,
    /// The soft mask itself. Smooth everywhere, so finite differences apply.
    Soft,
}

impl Binarization {
    pub fn apply<'t, T: Scalar>(self, soft: Var<'t, T>, threshold: f64) -> Var<'t, T> {
        match self {
            Binarization::StraightThrough => soft.straight_through_binarize(threshold),
            Binarization::Soft => soft,
        }
    }
}

/// Frame-cycle and mask-cycle terms.
///
/// `first` is Φ's completion under the given mask and `soft_t` is Ψ's mask
/// for the target frame judged against `first`. The frame cycle re-runs Φ
/// with the binarized prediction and compares; the mask cycle compares the
/// prediction with the given mask.
#[allow(clippy::too_many_arguments)]
pub fn cycle_losses<'t, T, P>(
    tape: &'t Tape<T>,
    phi: &P,
    prepared: &P::Prepared<'t>,
    first: &Completion<'t, T>,
    soft_t: Var<'t, T>,
    m_t: Var<'t, T>,
    binarization: Binarization,
    threshold: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)>
where
    T: Scalar,
    P: FrameCompleter<T>,
{
    let m_tilde = binarization.apply(soft_t, threshold);
    let second = phi.finish(tape, prepared, m_tilde)?;
    let l_y = first.frame.mean_abs_diff(second.frame)?;
    let l_m = m_t.mean_abs_diff(soft_t)?;
    Ok((l_y, l_m))
}

/// One batch of training inputs on a tape, all `[n,·,h,w]`.
pub struct BatchVars<'t, T: Scalar> {
    pub refs: Vec<Var<'t, T>>,
    pub x_t: Var<'t, T>,
    pub y_t: Var<'t, T>,
    pub m_t: Var<'t, T>,
    pub x_next: Var<'t, T>,
    pub m_next: Var<'t, T>,
}

/// Loss graph of one batch.
pub struct LossTerms<'t, T: Scalar> {
    pub l_f: Var<'t, T>,
    pub l_s: Var<'t, T>,
    pub l_y: Var<'t, T>,
    pub l_m: Var<'t, T>,
    pub total: Var<'t, T>,
}

impl<T: Scalar> LossTerms<'_, T> {
    pub fn report(&self, w: &LossWeights) -> Result<LossReport> {
        total_loss(
            self.l_f.item().as_f64(),
            self.l_s.item().as_f64(),
            self.l_m.item().as_f64(),
            self.l_y.item().as_f64(),
            w,
        )
    }
}

/// Builds the full objective with teacher forcing: Φ sees the given `m_t`;
/// Ψ is supervised on both the target and the next frame.
pub fn batch_losses<'t, T, P, M>(
    tape: &'t Tape<T>,
    phi: &P,
    psi: &M,
    batch: &BatchVars<'t, T>,
    weights: &LossWeights,
    binarization: Binarization,
    threshold: f64,
) -> Result<LossTerms<'t, T>>
where
    T: Scalar,
    P: FrameCompleter<T>,
    M: MaskPredictor<T>,
{
    weights.validate()?;
    let prepared = phi.prepare(tape, &batch.refs, batch.x_t)?;
    let first = phi.finish(tape, &prepared, batch.m_t)?;
    let l_f = loss_reconstruction(first.frame, batch.y_t)?;
    let soft = psi.predict(tape, &first, &[batch.x_t, batch.x_next])?;
    let [soft_t, soft_next] = soft[..] else {
        return Err(Error::Invalid("mask predictor returned the wrong count".into()));
    };
    let l_s = loss_mask(soft_t, batch.m_t)?
        .add(loss_mask(soft_next, batch.m_next)?)?
        .affine(0.5, 0.0);
    let (l_y, l_m) = cycle_losses(
        tape,
        phi,
        &prepared,
        &first,
        soft_t,
        batch.m_t,
        binarization,
        threshold,
    )?;
    let l_c = l_m.add(l_y.affine(weights.lambda_y, 0.0))?;
    let total = l_f
        .affine(weights.lambda_f, 0.0)
        .add(l_s.affine(weights.lambda_s, 0.0))?
        .add(l_c.affine(weights.lambda_c, 0.0))?;
    Ok(LossTerms {
        l_f,
        l_s,
        l_y,
        l_m,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_weights_compose() {
        let r = total_loss(1.0, 1.0, 1.0, 1.0, &LossWeights::default()).unwrap();
        assert!((r.total - 4.75).abs() < 1e-12);
        assert!((r.l_c - 2.0).abs() < 1e-12);
        let zero = total_loss(0.0, 0.0, 0.0, 0.0, &LossWeights::default()).unwrap();
        assert_eq!(zero.total, 0.0);
        let no_cycle = LossWeights {
            lambda_c: 0.0,
            ..LossWeights::default()
        };
        let a = total_loss(0.3, 0.2, 5.0, 7.0, &no_cycle).unwrap();
        let b = total_loss(0.3, 0.2, 0.0, 0.0, &no_cycle).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights {
            lambda_s: -0.1,
            ..LossWeights::default()
        };
        assert!(total_loss(1.0, 1.0, 1.0, 1.0, &w).is_err());
    }

    #[test]
    fn reconstruction_and_mask_closed_forms() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full([1, 3, 2, 2], 0.5));
        let b = tape.constant(Tensor::full([1, 3, 2, 2], 0.4));
        assert_eq!(loss_reconstruction(a, a).unwrap().item(), 0.0);
        assert!((loss_reconstruction(a, b).unwrap().item() - 0.1).abs() < 1e-12);

        let half = tape.constant(Tensor::full([1, 1, 2, 2], 0.5));
        let gt = tape.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap());
        assert!((loss_mask(half, gt).unwrap().item() - 2f64.ln()).abs() < 1e-12);
        assert!(loss_mask(gt, gt).unwrap().item() < 1e-5);
    }

    /// Pastes the ground truth into whatever mask it is given.
    struct PasteTruth {
        y: Tensor<f64>,
    }

    impl FrameCompleter<f64> for PasteTruth {
        type Prepared<'t> = Var<'t, f64>;

        fn prepare<'t>(
            &self,
            _tape: &'t Tape<f64>,
            _refs: &[Var<'t, f64>],
            target: Var<'t, f64>,
        ) -> Result<Var<'t, f64>> {
            Ok(target)
        }

        fn finish<'t>(
            &self,
            tape: &'t Tape<f64>,
            x: &Var<'t, f64>,
            mask: Var<'t, f64>,
        ) -> Result<Completion<'t, f64>> {
            let y = tape.constant(self.y.clone());
            Ok(Completion::frame_only(x.masked_blend(y, mask)?))
        }
    }

    /// Returns a fixed mask for every query.
    struct FixedMask(Tensor<f64>);

    impl MaskPredictor<f64> for FixedMask {
        fn predict<'t>(
            &self,
            tape: &'t Tape<f64>,
            _completion: &Completion<'t, f64>,
            queries: &[Var<'t, f64>],
        ) -> Result<Vec<Var<'t, f64>>> {
            Ok(queries.iter().map(|_| tape.constant(self.0.clone())).collect())
        }
    }

    fn two_pixel() -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
        let x = Tensor::new([1, 1, 1, 2], vec![0.2, 0.9]).unwrap();
        let y = Tensor::new([1, 1, 1, 2], vec![0.2, 0.5]).unwrap();
        let m = Tensor::new([1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        (x, y, m)
    }

    fn cycle_with(psi_mask: Tensor<f64>) -> (f64, f64) {
        let (x, y, m) = two_pixel();
        let phi = PasteTruth { y };
        let psi = FixedMask(psi_mask);
        let tape = Tape::new();
        let (xv, mv) = (tape.constant(x), tape.constant(m));
        let prep = phi.prepare(&tape, &[xv], xv).unwrap();
        let first = phi.finish(&tape, &prep, mv).unwrap();
        let soft = psi.predict(&tape, &first, &[xv]).unwrap()[0];
        let (l_y, l_m) = cycle_losses(
            &tape,
            &phi,
            &prep,
            &first,
            soft,
            mv,
            Binarization::StraightThrough,
            0.5,
        )
        .unwrap();
        (l_y.item(), l_m.item())
    }

    #[test]
    fn exact_oracles_are_a_fixed_point() {
        let (_, _, m) = two_pixel();
        assert_eq!(cycle_with(m), (0.0, 0.0));
    }

    #[test]
    fn missed_hole_costs_the_hole_difference_times_its_area() {
        // Ψ finds nothing, so the second pass returns x; the first pass
        // filled the hole with y. By hand: |0.5 - 0.9| over one hole pixel,
        // times a hole fraction of 1/2.
        let (l_y, l_m) = cycle_with(Tensor::zeros([1, 1, 1, 2]));
        assert!((l_y - 0.4 * 0.5).abs() < 1e-12);
        assert!((l_m - 0.5).abs() < 1e-12);
    }
}
