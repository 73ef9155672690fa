//! Completion network: encode, align references with cascaded deformable
//! blocks, aggregate with per-pixel attention, decode and paste back.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

use super::layers::{conv, decode, encode, stride_padding};
use super::{Completion, Model, STRIDE};

/// One alignment block: offsets from `concat(target, source)`, then a
/// deformable convolution of `source`.
pub fn dca_block<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    index: usize,
    source: Var<'t, T>,
    target: Var<'t, T>,
) -> Result<Var<'t, T>> {
    if source.shape() != target.shape() {
        return Err(Error::shape(
            "dca_block",
            format!("source {:?} vs target {:?}", source.shape(), target.shape()),
        ));
    }
    let p = format!("align.{index}");
    let cat = tape.concat_channels(&[target, source])?;
    let hidden = conv(tape, store, &format!("{p}.off1"), cat, 1)?.relu();
    let offsets = conv(tape, store, &format!("{p}.off2"), hidden, 1)?;
    let w = tape.param(store, &format!("{p}.dcn.w"))?;
    let b = tape.param(store, &format!("{p}.dcn.b"))?;
    source.deform_conv(offsets, w, Some(b))
}

/// `blocks` alignment blocks applied in sequence against the same target.
pub fn align_reference<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    blocks: usize,
    source: Var<'t, T>,
    target: Var<'t, T>,
) -> Result<Var<'t, T>> {
    (0..blocks).try_fold(source, |s, i| dca_block(tape, store, i, s, target))
}

/// Attention-weighted fusion of aligned references.
///
/// Returns the fused feature and the `[n, refs, h, w]` softmax weights.
pub fn aggregate<'t, T: Scalar>(
    tape: &'t Tape<T>,
    store: &ParamStore<T>,
    target: Var<'t, T>,
    aligned: &[Var<'t, T>],
    mask_feat: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    if aligned.is_empty() {
        return Err(Error::Invalid(
            "aggregation needs at least one reference".into(),
        ));
    }
    let q = conv(tape, store, "phi.agg.q", target, 1)?;
    let logits = aligned
        .iter()
        .map(|&f| q.channel_dot(conv(tape, store, "phi.agg.k", f, 1)?))
        .collect::<Result<Vec<_>>>()?;
    let weights = tape.concat_channels(&logits)?.softmax_channels();
    let mut parts = Vec::with_capacity(aligned.len() + 2);
    for (r, &f) in aligned.iter().enumerate() {
        let v = conv(tape, store, "phi.agg.v", f, 1)?;
        parts.push(v.mul_channels(weights.narrow_channels(r, 1)?)?);
    }
    parts.push(target);
    parts.push(mask_feat);
    let fused = conv(tape, store, "phi.agg.a", tape.concat_channels(&parts)?, 1)?;
    Ok((fused, weights))
}

/// Encoded target and aligned references, reusable across masks.
pub struct PhiPrepared<'t, T: Scalar> {
    pub target: Var<'t, T>,
    pub aligned: Vec<Var<'t, T>>,
    pub frame: Var<'t, T>,
}

impl<T: Scalar> Model<T> {
    fn padded<'t>(&self, x: Var<'t, T>) -> Var<'t, T> {
        let [_, _, h, w] = x.shape();
        let (pb, pr) = stride_padding(h, w);
        x.pad_replicate(pb, pr)
    }

    pub fn encode_frame<'t>(
        &self,
        tape: &'t Tape<T>,
        prefix: &str,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        if !x.value().all_finite() {
            return Err(Error::NonFinite("encoder input".into()));
        }
        encode(tape, &self.params, prefix, &self.config, self.padded(x))
    }

    /// Encodes the target and every reference and aligns each reference.
    pub fn phi_prepare<'t>(
        &self,
        tape: &'t Tape<T>,
        refs: &[Var<'t, T>],
        x: Var<'t, T>,
    ) -> Result<PhiPrepared<'t, T>> {
        if refs.is_empty() {
            return Err(Error::Invalid(
                "completion needs at least one reference".into(),
            ));
        }
        for r in refs {
            if r.shape() != x.shape() {
                return Err(Error::shape(
                    "phi_prepare",
                    format!("reference {:?} vs target {:?}", r.shape(), x.shape()),
                ));
            }
        }
        let target = self.encode_frame(tape, "phi.enc", x)?;
        let aligned = refs
            .iter()
            .map(|&r| {
                let f = self.encode_frame(tape, "phi.enc", r)?;
                align_reference(tape, &self.params, self.config.dca_blocks, f, target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PhiPrepared {
            target,
            aligned,
            frame: x,
        })
    }

    /// Aggregates, decodes and pastes the prediction into the mask region.
    pub fn phi_finish<'t>(
        &self,
        tape: &'t Tape<T>,
        prepared: &PhiPrepared<'t, T>,
        mask: Var<'t, T>,
    ) -> Result<Completion<'t, T>> {
        let x = prepared.frame;
        let [n, _, h, w] = x.shape();
        if mask.shape() != [n, 1, h, w] {
            return Err(Error::shape(
                "phi_finish",
                format!("mask {:?} vs frame {:?}", mask.shape(), x.shape()),
            ));
        }
        let mask_feat = self.padded(mask).avg_pool(STRIDE)?;
        let (fused, weights) = aggregate(
            tape,
            &self.params,
            prepared.target,
            &prepared.aligned,
            mask_feat,
        )?;
        let decoded = decode(tape, &self.params, "phi.dec", fused)?.crop(h, w)?;
        if !decoded.value().all_finite() {
            return Err(Error::NonFinite("completion decoder output".into()));
        }
        Ok(Completion {
            frame: x.masked_blend(decoded, mask)?,
            feature: Some(fused),
            decoded: Some(decoded),
            weights: Some(weights),
        })
    }
}
