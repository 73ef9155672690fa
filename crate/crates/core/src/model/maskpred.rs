//! Mask prediction network: compare a query frame with a completed frame
//! whose corruption has been removed.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{Mask, SoftMask};
use crate::tensor::Scalar;

use super::completion::align_reference;
use super::layers::{conv, decode};
use super::{Completion, Model};

/// `value >= threshold → 1`.
pub fn binarize_mask(soft: &SoftMask, threshold: f64) -> Mask {
    let (h, w) = soft.dims();
    let t = threshold as f32;
    Mask::new(
        h,
        w,
        soft.data()
            .iter()
            .map(|&v| if v >= t { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("binary by construction")
}

impl<T: Scalar> Model<T> {
    /// Soft masks `[n,1,h,w]` for each query, all judged against the same
    /// completed frame and its aggregated feature.
    pub fn psi<'t>(
        &self,
        tape: &'t Tape<T>,
        completion: &Completion<'t, T>,
        queries: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        let feature = completion
            .feature
            .ok_or_else(|| Error::Invalid("mask prediction needs the completion feature".into()))?;
        let [_, _, h, w] = completion.frame.shape();
        let g = self.encode_frame(tape, "psi.enc", completion.frame)?;
        let q = conv(
            tape,
            &self.params,
            "psi.proj",
            tape.concat_channels(&[g, feature])?,
            1,
        )?;
        queries
            .iter()
            .map(|&xq| {
                if xq.shape() != completion.frame.shape() {
                    return Err(Error::shape(
                        "psi",
                        format!(
                            "query {:?} vs completed {:?}",
                            xq.shape(),
                            completion.frame.shape()
                        ),
                    ));
                }
                let fq = self.encode_frame(tape, "psi.enc", xq)?;
                let qa = align_reference(tape, &self.params, self.config.dca_blocks, q, fq)?;
                let cat = tape.concat_channels(&[qa, fq])?;
                decode(tape, &self.params, "psi.dec", cat)?.crop(h, w)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binarize_tie_goes_to_one() {
        let soft = SoftMask::new(1, 3, vec![0.5, 0.9, 0.1]).unwrap();
        let m = binarize_mask(&soft, 0.5);
        assert_eq!(m.data(), &[1.0, 1.0, 0.0]);
        let again = binarize_mask(&SoftMask::from(&m), 0.5);
        assert_eq!(again, m);
    }
}
