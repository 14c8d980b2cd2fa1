//! Pitch fusion block: a multi-head self-attention branch for global
//! structure in parallel with a residual convolution branch for local
//! contour shape, summed and layer-normalized.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamBinder, Tape, Var};

use super::blocks::{Conv1d, LayerNorm, Linear, ParamMuts, ParamRefs};

/// Multi-head self-attention over the full sequence. No positional encoding
/// is added; position sensitivity comes from the convolutional branch.
#[derive(Debug, Clone)]
pub struct MultiHeadSelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

impl MultiHeadSelfAttention {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize, n_heads: usize) -> Self {
        assert!(dim.is_multiple_of(n_heads), "attention dim {dim} not divisible by {n_heads} heads");
        Self {
            wq: Linear::new(format!("{name}.wq"), rng, dim, dim),
            wk: Linear::new_no_bias(format!("{name}.wk"), rng, dim, dim),
            wv: Linear::new(format!("{name}.wv"), rng, dim, dim),
            wo: Linear::new(format!("{name}.wo"), rng, dim, dim),
            n_heads,
            dim,
        }
    }

    /// Returns the output and the per-head attention weight matrices
    /// (`[t, t]`, rows summing to one).
    pub fn forward_with_attention(
        &self,
        tape: &mut Tape,
        ps: &mut ParamBinder,
        x: Var,
    ) -> (Var, Vec<Var>) {
        let dh = self.dim / self.n_heads;
        let q = self.wq.forward(tape, ps, x);
        let k = self.wk.forward(tape, ps, x);
        let v = self.wv.forward(tape, ps, x);
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice(q, 1, h * dh, dh);
            let kh = tape.slice(k, 1, h * dh, dh);
            let vh = tape.slice(v, 1, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax(scaled, 1);
            weights.push(attn);
            heads.push(tape.matmul(attn, vh));
        }
        let merged = tape.concat(1, &heads);
        (self.wo.forward(tape, ps, merged), weights)
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        self.forward_with_attention(tape, ps, x).0
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        self.wq.params(out);
        self.wk.params(out);
        self.wv.params(out);
        self.wo.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        self.wq.params_mut(out);
        self.wk.params_mut(out);
        self.wv.params_mut(out);
        self.wo.params_mut(out);
    }
}

/// `x + mish(conv(x))` with kernel 3, stride 1, padding 1.
#[derive(Debug, Clone)]
struct ResidualConvUnit {
    conv: Conv1d,
}

impl ResidualConvUnit {
    fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self { conv: Conv1d::new(format!("{name}.conv"), rng, dim, dim, 3, 1, 1) }
    }

    fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let c = self.conv.forward(tape, ps, x);
        let a = tape.mish(c);
        tape.add(x, a)
    }
}

/// Local branch: a stack of residual conv units. The input passes straight
/// through the skip connections, so with all conv parameters zeroed the
/// branch reduces to the identity.
#[derive(Debug, Clone)]
struct LocalBranch {
    unit0: ResidualConvUnit,
    unit1: ResidualConvUnit,
}

impl LocalBranch {
    fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize) -> Self {
        Self {
            unit0: ResidualConvUnit::new(&format!("{name}.unit0"), rng, dim),
            unit1: ResidualConvUnit::new(&format!("{name}.unit1"), rng, dim),
        }
    }

    fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let x = self.unit0.forward(tape, ps, x);
        self.unit1.forward(tape, ps, x)
    }

    fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        self.unit0.conv.params(out);
        self.unit1.conv.params(out);
    }

    fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        self.unit0.conv.params_mut(out);
        self.unit1.conv.params_mut(out);
    }
}

/// Sequence-length preserving fusion block over `[t, dim]`:
/// `layer_norm(global + local)` where the local branch's skip connections
/// carry the input through. The global-only ablation keeps that passthrough
/// (`layer_norm(global + x)`), which is exactly the full block with its
/// convolutions removed.
#[derive(Debug, Clone)]
pub struct PitchFusionBlock {
    attention: MultiHeadSelfAttention,
    local: Option<LocalBranch>,
    norm: LayerNorm,
}

impl PitchFusionBlock {
    pub fn new(name: &str, rng: &mut ChaCha8Rng, dim: usize, n_heads: usize, global_only: bool) -> Self {
        Self::with_output_gamma(name, rng, dim, n_heads, global_only, 1.0)
    }

    /// Fusion block whose output norm scale starts at `gamma`.
    pub fn with_output_gamma(
        name: &str,
        rng: &mut ChaCha8Rng,
        dim: usize,
        n_heads: usize,
        global_only: bool,
        gamma: f64,
    ) -> Self {
        Self {
            attention: MultiHeadSelfAttention::new(&format!("{name}.attn"), rng, dim, n_heads),
            local: if global_only {
                None
            } else {
                Some(LocalBranch::new(&format!("{name}.local"), rng, dim))
            },
            norm: LayerNorm::with_gamma(format!("{name}.norm"), dim, gamma),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let global = self.attention.forward(tape, ps, x);
        let local = match &self.local {
            Some(local) => local.forward(tape, ps, x),
            None => x,
        };
        let summed = tape.add(global, local);
        self.norm.forward(tape, ps, summed)
    }

    pub fn attention(&self) -> &MultiHeadSelfAttention {
        &self.attention
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        self.attention.params(out);
        if let Some(local) = &self.local {
            local.params(out);
        }
        self.norm.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        self.attention.params_mut(out);
        if let Some(local) = &mut self.local {
            local.params_mut(out);
        }
        self.norm.params_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use rand::{Rng, SeedableRng};

    fn random_input(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::from_fn(vec![t, d], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn output_length_equals_input_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pfb = PitchFusionBlock::new("pfb", &mut rng, 8, 2, false);
        for t in [1usize, 7, 26] {
            let x = random_input(&mut rng, t, 8);
            let mut tape = Tape::new();
            let mut ps = ParamBinder::new();
            let xv = tape.leaf(&x);
            let y = pfb.forward(&mut tape, &mut ps, xv);
            assert_eq!(tape.shape(y), &[t, 8]);
        }
    }

    #[test]
    fn attention_weights_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mhsa = MultiHeadSelfAttention::new("attn", &mut rng, 6, 2);
        let x = random_input(&mut rng, 3, 6);
        // Permutation sending row i to position perm[i].
        let perm = [2usize, 0, 1];
        let mut permuted = vec![0.0; 18];
        for i in 0..3 {
            permuted[perm[i] * 6..(perm[i] + 1) * 6].copy_from_slice(&x.data()[i * 6..(i + 1) * 6]);
        }
        let xp = Tensor::new(vec![3, 6], permuted);

        let run = |input: &Tensor| {
            let mut tape = Tape::new();
            let mut ps = ParamBinder::new();
            let xv = tape.leaf(input);
            let (_, weights) = mhsa.forward_with_attention(&mut tape, &mut ps, xv);
            weights
                .into_iter()
                .map(|w| tape.value(w).to_vec())
                .collect::<Vec<_>>()
        };
        let base = run(&x);
        let shuffled = run(&xp);
        for (wb, ws) in base.iter().zip(&shuffled) {
            for i in 0..3 {
                for j in 0..3 {
                    let orig = wb[i * 3 + j];
                    let moved = ws[perm[i] * 3 + perm[j]];
                    assert!(
                        (orig - moved).abs() < 1e-12,
                        "attention weight not equivariant at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn zeroed_local_branch_matches_global_only_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut full = PitchFusionBlock::new("pfb", &mut rng, 8, 2, false);
        let mut rng2 = ChaCha8Rng::seed_from_u64(3);
        let mut global = PitchFusionBlock::new("pfb", &mut rng2, 8, 2, true);

        // Copy the shared (attention + norm) parameters from full to global,
        // and zero the local branch of full.
        let mut frefs: ParamRefs = Vec::new();
        full.params(&mut frefs);
        let shared: std::collections::BTreeMap<String, Vec<f64>> = frefs
            .iter()
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();
        let mut grefs: ParamMuts = Vec::new();
        global.params_mut(&mut grefs);
        for (name, tensor) in grefs {
            tensor.data_mut().copy_from_slice(&shared[&name]);
        }
        let mut frefs: ParamMuts = Vec::new();
        full.params_mut(&mut frefs);
        for (name, tensor) in frefs {
            if name.contains(".local.") {
                tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }

        let x = random_input(&mut rng, 5, 8);
        let run = |pfb: &PitchFusionBlock| {
            let mut tape = Tape::new();
            let mut ps = ParamBinder::new();
            let xv = tape.leaf(&x);
            let y = pfb.forward(&mut tape, &mut ps, xv);
            tape.value(y).to_vec()
        };
        let a = run(&full);
        let b = run(&global);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
