//! Pitch side of the encoder: embedding of quantized F0 (or a linear lift of
//! the raw normalized contour), the stacked pitch encoder units, and the
//! fusion of pitch features with the acoustic path.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamBinder, Tape, Var};

use super::blocks::{Conv1d, Embedding, GroupNorm, Linear, ParamMuts, ParamRefs};
use super::fusion::PitchFusionBlock;
use super::{ModelError, PitchVariant};

/// Per-utterance pitch input, matching the configured variant.
#[derive(Debug, Clone)]
pub enum PitchInput {
    /// No pitch path.
    None,
    /// Quantized indices for the embedded variants.
    Indices(Vec<usize>),
    /// Normalized scalar F0 per frame (unvoiced frames 0) for the
    /// embedding-free variant.
    Scalar(Vec<f64>),
}

impl PitchInput {
    pub fn len(&self) -> usize {
        match self {
            PitchInput::None => 0,
            PitchInput::Indices(v) => v.len(),
            PitchInput::Scalar(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Maps frame-wise pitch inputs into `[t_pitch, d_pitch_embed]`.
#[derive(Debug, Clone)]
pub enum PitchEmbedding {
    Table(Embedding),
    ScalarLift(Linear),
}

impl PitchEmbedding {
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        variant: PitchVariant,
        embed_vocab: usize,
        dim: usize,
    ) -> Option<Self> {
        match variant {
            PitchVariant::None => None,
            PitchVariant::RawNoEmbed => {
                Some(Self::ScalarLift(Linear::new(format!("{name}.lift"), rng, 1, dim)))
            }
            _ => Some(Self::Table(Embedding::new(format!("{name}.embed"), rng, embed_vocab, dim))),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &mut ParamBinder,
        input: &PitchInput,
    ) -> Result<Var, ModelError> {
        match (self, input) {
            (Self::Table(embed), PitchInput::Indices(indices)) => {
                for &i in indices {
                    if i >= embed.vocab() {
                        return Err(ModelError::PitchIndexOutOfRange {
                            index: i,
                            vocab: embed.vocab(),
                        });
                    }
                }
                Ok(embed.forward(tape, ps, indices))
            }
            (Self::ScalarLift(lift), PitchInput::Scalar(values)) => {
                let x = tape.leaf_from(vec![values.len(), 1], values.clone());
                Ok(lift.forward(tape, ps, x))
            }
            _ => Err(ModelError::PitchInputMismatch),
        }
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        match self {
            Self::Table(e) => e.params(out),
            Self::ScalarLift(l) => l.params(out),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        match self {
            Self::Table(e) => e.params_mut(out),
            Self::ScalarLift(l) => l.params_mut(out),
        }
    }
}

/// One pitch encoder unit: conv1d (kernel 3, padding 1, configured stride),
/// group norm, mish, then a pitch fusion block.
#[derive(Debug, Clone)]
pub struct PitchEncoderUnit {
    conv: Conv1d,
    norm: GroupNorm,
    fusion: PitchFusionBlock,
}

impl PitchEncoderUnit {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        dim: usize,
        stride: usize,
        n_heads: usize,
        global_only: bool,
        output_gamma: f64,
    ) -> Self {
        let groups = if dim.is_multiple_of(4) { 4 } else { 1 };
        Self {
            conv: Conv1d::new(format!("{name}.conv"), rng, c_in, dim, 3, stride, 1),
            norm: GroupNorm::new(format!("{name}.norm"), dim, groups),
            fusion: PitchFusionBlock::with_output_gamma(
                &format!("{name}.pfb"),
                rng,
                dim,
                n_heads,
                global_only,
                output_gamma,
            ),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let x = self.conv.forward(tape, ps, x);
        let x = self.norm.forward(tape, ps, x);
        let x = tape.mish(x);
        self.fusion.forward(tape, ps, x)
    }
}

/// `M` stacked pitch encoder units aligning the pitch hop to the 40 ms
/// encoder hop.
#[derive(Debug, Clone)]
pub struct PitchEncoder {
    units: Vec<PitchEncoderUnit>,
}

impl PitchEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        rng: &mut ChaCha8Rng,
        d_pitch_embed: usize,
        fusion_dim: usize,
        m_units: usize,
        stride: usize,
        n_heads: usize,
        global_only: bool,
    ) -> Self {
        let units = (0..m_units)
            .map(|i| {
                let c_in = if i == 0 { d_pitch_embed } else { fusion_dim };
                // The final unit's output fades in so the acoustic path
                // dominates the fused features early in training.
                let output_gamma = if i + 1 == m_units { 0.1 } else { 1.0 };
                PitchEncoderUnit::new(
                    &format!("{name}.unit{i}"),
                    rng,
                    c_in,
                    fusion_dim,
                    stride,
                    n_heads,
                    global_only,
                    output_gamma,
                )
            })
            .collect();
        Self { units }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, mut x: Var) -> Var {
        for unit in &self.units {
            x = unit.forward(tape, ps, x);
        }
        x
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        for unit in &self.units {
            unit.conv.params(out);
            unit.norm.params(out);
            unit.fusion.params(out);
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        for unit in &mut self.units {
            unit.conv.params_mut(out);
            unit.norm.params_mut(out);
            unit.fusion.params_mut(out);
        }
    }
}

/// Fusion of the acoustic path with the encoded pitch path.
#[derive(Debug, Clone)]
pub enum Fuse {
    /// Project acoustic to the fusion width, add pitch, run a fusion block,
    /// project back to the encoder width.
    Pfb { proj_in: Linear, block: Box<PitchFusionBlock>, proj_out: Linear },
    /// Concatenate and apply a single linear layer.
    Linear { lin: Linear },
}

impl Fuse {
    pub fn forward(
        &self,
        tape: &mut Tape,
        ps: &mut ParamBinder,
        acoustic: Var,
        pitch: Var,
    ) -> Var {
        let (t_a, t_p) = (tape.shape(acoustic)[0], tape.shape(pitch)[0]);
        assert_eq!(t_a, t_p, "fuse: length mismatch acoustic {t_a} vs pitch {t_p}");
        match self {
            Fuse::Pfb { proj_in, block, proj_out } => {
                let a = proj_in.forward(tape, ps, acoustic);
                let summed = tape.add(a, pitch);
                let fused = block.forward(tape, ps, summed);
                proj_out.forward(tape, ps, fused)
            }
            Fuse::Linear { lin } => {
                let cat = tape.concat(1, &[acoustic, pitch]);
                lin.forward(tape, ps, cat)
            }
        }
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        match self {
            Fuse::Pfb { proj_in, block, proj_out } => {
                proj_in.params(out);
                block.params(out);
                proj_out.params(out);
            }
            Fuse::Linear { lin } => lin.params(out),
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        match self {
            Fuse::Pfb { proj_in, block, proj_out } => {
                proj_in.params_mut(out);
                block.params_mut(out);
                proj_out.params_mut(out);
            }
            Fuse::Linear { lin } => lin.params_mut(out),
        }
    }
}
