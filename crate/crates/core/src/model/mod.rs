//! The completion network Φ and the mask prediction network Ψ.
//!
//! Both networks read their weights from one [`ParamStore`]. The alignment
//! blocks live under `align.*` and are used by both, so a single tensor (and
//! a single gradient) backs the shared module.

mod completion;
mod layers;
mod maskpred;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor};

pub use completion::{aggregate, align_reference, dca_block, PhiPrepared};
pub use maskpred::binarize_mask;

/// Spatial downsampling of every feature map.
pub const STRIDE: usize = 4;
/// Largest supported number of alignment blocks.
pub const MAX_DCA_BLOCKS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C`.
    pub channels: usize,
    /// Temporal radius `n`: references are `t-n..t+n` without `t`.
    pub ref_radius: usize,
    pub dca_blocks: usize,
    pub res_blocks: usize,
    /// Binarization threshold for predicted masks.
    pub threshold: f64,
    /// Seed of the parameter initializer.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            ref_radius: 1,
            dca_blocks: 4,
            res_blocks: 4,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "model.channels must be even and at least 2, got {}",
                self.channels
            )));
        }
        if self.ref_radius == 0 {
            return Err(Error::Config("model.ref_radius must be at least 1".into()));
        }
        if self.dca_blocks > MAX_DCA_BLOCKS {
            return Err(Error::Config(format!(
                "model.dca_blocks must be in 0..={MAX_DCA_BLOCKS}, got {}",
                self.dca_blocks
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "model.threshold must be in (0,1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn num_refs(&self) -> usize {
        2 * self.ref_radius
    }

    /// Reference indices for frame `t` of a `len`-frame clip, clamped at the
    /// ends so boundary frames repeat their nearest valid neighbour.
    pub fn reference_indices(&self, t: usize, len: usize) -> Vec<usize> {
        let n = self.ref_radius as isize;
        let last = len.saturating_sub(1) as isize;
        (-n..=n)
            .filter(|&d| d != 0)
            .map(|d| (t as isize + d).clamp(0, last) as usize)
            .collect()
    }
}

/// A completed frame plus what Ψ needs from the pass that produced it.
pub struct Completion<'t, T: Scalar> {
    /// Completed frame with known pixels pasted back.
    pub frame: Var<'t, T>,
    /// Aggregated stride-4 feature.
    pub feature: Option<Var<'t, T>>,
    /// Raw decoder output before paste-back.
    pub decoded: Option<Var<'t, T>>,
    /// Softmax aggregation weights, one channel per reference.
    pub weights: Option<Var<'t, T>>,
}

impl<'t, T: Scalar> Completion<'t, T> {
    pub fn frame_only(frame: Var<'t, T>) -> Self {
        Self {
            frame,
            feature: None,
            decoded: None,
            weights: None,
        }
    }
}

/// Anything that completes frames on a tape. Splitting preparation from the
/// mask-dependent part lets one encoding serve several masks.
pub trait FrameCompleter<T: Scalar> {
    type Prepared<'t>;

    fn prepare<'t>(
        &self,
        tape: &'t Tape<T>,
        refs: &[Var<'t, T>],
        target: Var<'t, T>,
    ) -> Result<Self::Prepared<'t>>;

    fn finish<'t>(
        &self,
        tape: &'t Tape<T>,
        prepared: &Self::Prepared<'t>,
        mask: Var<'t, T>,
    ) -> Result<Completion<'t, T>>;
}

/// Anything that predicts soft masks of query frames against a completion.
pub trait MaskPredictor<T: Scalar> {
    fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        completion: &Completion<'t, T>,
        queries: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> FrameCompleter<T> for Model<T> {
    type Prepared<'t> = PhiPrepared<'t, T>;

    fn prepare<'t>(
        &self,
        tape: &'t Tape<T>,
        refs: &[Var<'t, T>],
        target: Var<'t, T>,
    ) -> Result<PhiPrepared<'t, T>> {
        self.phi_prepare(tape, refs, target)
    }

    fn finish<'t>(
        &self,
        tape: &'t Tape<T>,
        prepared: &PhiPrepared<'t, T>,
        mask: Var<'t, T>,
    ) -> Result<Completion<'t, T>> {
        self.phi_finish(tape, prepared, mask)
    }
}

impl<T: Scalar> MaskPredictor<T> for Model<T> {
    fn predict<'t>(
        &self,
        tape: &'t Tape<T>,
        completion: &Completion<'t, T>,
        queries: &[Var<'t, T>],
    ) -> Result<Vec<Var<'t, T>>> {
        self.psi(tape, completion, queries)
    }
}

enum Init {
    He(f64),
    Zero,
    /// Centre tap of a square kernel set to the identity matrix.
    Identity,
    Const(f64),
}

/// Every parameter of the model with its shape and initializer, in a fixed
/// order that defines the random stream.
fn layout(config: &ModelConfig) -> Vec<(String, Shape, Init)> {
    let c = config.channels;
    let half = c / 2;
    let mut out = Vec::new();
    let mut conv = |name: String, co: usize, ci: usize, k: usize, w: Init, b: Init| {
        out.push((format!("{name}.w"), [co, ci, k, k], w));
        out.push((format!("{name}.b"), [1, co, 1, 1], b));
    };
    for prefix in ["phi.enc", "psi.enc"] {
        conv(
            format!("{prefix}.stem"),
            half,
            3,
            3,
            Init::He(1.0),
            Init::Zero,
        );
        conv(
            format!("{prefix}.s1a"),
            c,
            half,
            3,
            Init::He(1.0),
            Init::Zero,
        );
        conv(format!("{prefix}.s1b"), c, c, 3, Init::He(1.0), Init::Zero);
        conv(format!("{prefix}.s2a"), c, c, 3, Init::He(1.0), Init::Zero);
        conv(format!("{prefix}.s2b"), c, c, 3, Init::He(1.0), Init::Zero);
        for i in 0..config.res_blocks {
            conv(
                format!("{prefix}.res{i}.c1"),
                c,
                c,
                3,
                Init::He(1.0),
                Init::Zero,
            );
            conv(
                format!("{prefix}.res{i}.c2"),
                c,
                c,
                3,
                Init::He(0.1),
                Init::Zero,
            );
        }
    }
    for i in 0..config.dca_blocks {
        conv(
            format!("align.{i}.off1"),
            c,
            2 * c,
            3,
            Init::He(1.0),
            Init::Zero,
        );
        conv(format!("align.{i}.off2"), 18, c, 3, Init::Zero, Init::Zero);
        conv(
            format!("align.{i}.dcn"),
            c,
            c,
            3,
            Init::Identity,
            Init::Zero,
        );
    }
    for q in ["q", "k"] {
        conv(format!("phi.agg.{q}"), c, c, 1, Init::He(0.25), Init::Zero);
    }
    conv("phi.agg.v".into(), c, c, 1, Init::He(1.0), Init::Zero);
    let fused_in = config.num_refs() * c + c + 1;
    conv(
        "phi.agg.a".into(),
        c,
        fused_in,
        1,
        Init::He(1.0),
        Init::Zero,
    );
    conv("psi.proj".into(), c, 2 * c, 1, Init::He(1.0), Init::Zero);
    for (prefix, cin, cout, bias) in [
        ("phi.dec", c, 3, 0.0),
        ("psi.dec", 2 * c, 1, (0.1f64 / 0.9).ln()),
    ] {
        conv(format!("{prefix}.c0"), c, cin, 3, Init::He(1.0), Init::Zero);
        conv(format!("{prefix}.up1"), c, c, 3, Init::He(1.0), Init::Zero);
        conv(
            format!("{prefix}.up2"),
            half,
            c,
            3,
            Init::He(1.0),
            Init::Zero,
        );
        conv(
            format!("{prefix}.head"),
            cout,
            half,
            3,
            Init::He(0.1),
            Init::Const(bias),
        );
    }
    out
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized model. Offset predictors start at zero and the
    /// deformable kernels at the identity, so alignment initially passes
    /// reference features through unchanged.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut init = Initializer::new(ChaCha8Rng::seed_from_u64(config.seed));
        let mut params = ParamStore::default();
        for (name, shape, kind) in layout(&config) {
            let t = match kind {
                Init::He(gain) => init.he(shape, gain),
                Init::Zero => Tensor::zeros(shape),
                Init::Const(v) => Tensor::full(shape, T::from_f64_lossy(v)),
                Init::Identity => {
                    let [co, ci, k, _] = shape;
                    let mut t = Tensor::zeros(shape);
                    for o in 0..co.min(ci) {
                        t.data_mut()[((o * ci + o) * k + k / 2) * k + k / 2] = T::one();
                    }
                    t
                }
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    /// Checks that `params` holds exactly the tensors `config` calls for.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape, _) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape => {}
                Some(t) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Parameter names grouped by sub-module prefix (`phi.enc`, `align.0.off1`, ...).
    pub fn parameter_groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .params
            .names()
            .map(|n| n.rsplit_once('.').map_or(n, |(g, _)| g).to_owned())
            .collect();
        groups.dedup();
        groups
    }
}
