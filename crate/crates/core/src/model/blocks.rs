//! Parameterized building blocks. Each block owns its tensors, knows its
//! checkpoint name, and lifts parameters onto the tape through the binder at
//! forward time.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamBinder, Tape, Tensor, Var};

pub type ParamRefs<'a> = Vec<(String, &'a Tensor)>;
pub type ParamMuts<'a> = Vec<(String, &'a mut Tensor)>;

fn uniform_init(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale)).with_grad()
}

/// `y = x W + b` with `W: [fan_in, fan_out]`; the bias is optional (the
/// attention key projection omits it, where it provably cancels).
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl Linear {
    pub fn new(name: impl Into<String>, rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Self {
            name: name.into(),
            w: uniform_init(rng, vec![fan_in, fan_out], scale),
            b: Some(Tensor::zeros(vec![fan_out]).with_grad()),
        }
    }

    pub fn new_no_bias(
        name: impl Into<String>,
        rng: &mut ChaCha8Rng,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let scale = 1.0 / (fan_in as f64).sqrt();
        Self { name: name.into(), w: uniform_init(rng, vec![fan_in, fan_out], scale), b: None }
    }

    /// Identity (on the shared diagonal) plus small noise; keeps a pathway's
    /// input signal intact at initialization.
    pub fn new_near_identity(
        name: impl Into<String>,
        rng: &mut ChaCha8Rng,
        fan_in: usize,
        fan_out: usize,
    ) -> Self {
        let mut w = uniform_init(rng, vec![fan_in, fan_out], 0.02);
        for i in 0..fan_in.min(fan_out) {
            w.data_mut()[i * fan_out + i] += 1.0;
        }
        Self {
            name: name.into(),
            w,
            b: Some(Tensor::zeros(vec![fan_out]).with_grad()),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let w = ps.bind(tape, &format!("{}.w", self.name), &self.w);
        let y = tape.matmul(x, w);
        match &self.b {
            Some(b) => {
                let b = ps.bind(tape, &format!("{}.b", self.name), b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        out.push((format!("{}.w", self.name), &self.w));
        if let Some(b) = &self.b {
            out.push((format!("{}.b", self.name), b));
        }
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        out.push((format!("{}.w", self.name), &mut self.w));
        if let Some(b) = &mut self.b {
            out.push((format!("{}.b", self.name), b));
        }
    }
}

/// 1-d convolution over `[t, c_in]`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    name: String,
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1d {
    pub fn new(
        name: impl Into<String>,
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let scale = 1.0 / ((c_in * kernel) as f64).sqrt();
        Self {
            name: name.into(),
            w: uniform_init(rng, vec![c_out, c_in, kernel], scale),
            b: Tensor::zeros(vec![c_out]).with_grad(),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let w = ps.bind(tape, &format!("{}.w", self.name), &self.w);
        let b = ps.bind(tape, &format!("{}.b", self.name), &self.b);
        tape.conv1d(x, w, b, self.stride, self.padding)
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        out.push((format!("{}.w", self.name), &self.w));
        out.push((format!("{}.b", self.name), &self.b));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        out.push((format!("{}.w", self.name), &mut self.w));
        out.push((format!("{}.b", self.name), &mut self.b));
    }
}

/// Embedding table `[vocab, dim]`.
#[derive(Debug, Clone)]
pub struct Embedding {
    name: String,
    pub table: Tensor,
}

impl Embedding {
    pub fn new(name: impl Into<String>, rng: &mut ChaCha8Rng, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            table: uniform_init(rng, vec![vocab, dim], 0.1),
        }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, indices: &[usize]) -> Var {
        let table = ps.bind(tape, &format!("{}.table", self.name), &self.table);
        tape.embedding(table, indices)
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        out.push((format!("{}.table", self.name), &self.table));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        out.push((format!("{}.table", self.name), &mut self.table));
    }
}

/// Group normalization affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "groups {groups} must divide channels {channels}");
        Self {
            name: name.into(),
            gamma: Tensor::new(vec![channels], vec![1.0; channels]).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
            groups,
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let gamma = ps.bind(tape, &format!("{}.gamma", self.name), &self.gamma);
        let beta = ps.bind(tape, &format!("{}.beta", self.name), &self.beta);
        tape.group_norm(x, gamma, beta, self.groups)
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        out.push((format!("{}.gamma", self.name), &self.gamma));
        out.push((format!("{}.beta", self.name), &self.beta));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        out.push((format!("{}.gamma", self.name), &mut self.gamma));
        out.push((format!("{}.beta", self.name), &mut self.beta));
    }
}

/// Layer normalization affine parameters.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self::with_gamma(name, channels, 1.0)
    }

    /// Layer norm whose scale starts at `gamma`; a small value lets a branch
    /// fade in during training instead of drowning its siblings at init.
    pub fn with_gamma(name: impl Into<String>, channels: usize, gamma: f64) -> Self {
        Self {
            name: name.into(),
            gamma: Tensor::new(vec![channels], vec![gamma; channels]).with_grad(),
            beta: Tensor::zeros(vec![channels]).with_grad(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, ps: &mut ParamBinder, x: Var) -> Var {
        let gamma = ps.bind(tape, &format!("{}.gamma", self.name), &self.gamma);
        let beta = ps.bind(tape, &format!("{}.beta", self.name), &self.beta);
        tape.layer_norm(x, gamma, beta)
    }

    pub fn params<'a>(&'a self, out: &mut ParamRefs<'a>) {
        out.push((format!("{}.gamma", self.name), &self.gamma));
        out.push((format!("{}.beta", self.name), &self.beta));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut ParamMuts<'a>) {
        out.push((format!("{}.gamma", self.name), &mut self.gamma));
        out.push((format!("{}.beta", self.name), &mut self.beta));
    }
}
