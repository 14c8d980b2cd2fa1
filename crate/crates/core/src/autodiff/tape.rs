//! Reverse-mode tape.
//!
//! Every operation records its output value and enough structure to replay
//! the chain rule in reverse execution order. Shape mismatches are contract
//! violations and panic with the op name and both shapes; recoverable errors
//! belong to the layers above, which validate user input before it reaches
//! the tape.

use super::tensor::Tensor;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Matmul(usize, usize),
    Transpose(usize),
    Concat { axis: usize, inputs: Vec<usize> },
    Slice { input: usize, axis: usize, start: usize },
    Reshape(usize),
    Embedding { table: usize, indices: Vec<usize> },
    Conv1d { input: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    GroupNorm { input: usize, gamma: usize, beta: usize, groups: usize },
    LayerNorm { input: usize, gamma: usize, beta: usize },
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    Tanh(usize),
    Mish(usize),
    Mean(usize),
    Sum(usize),
    OuterRowAdd(usize, usize),
    InjectLoss { input: usize, grad: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Overflow-safe softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * tanh(softplus(x))`.
pub fn mish_scalar(x: f64) -> f64 {
    x * softplus(x).tanh()
}

/// Splits `shape` at `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, op_name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by {op_name}"
        );
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    /// Copies a tensor onto the tape as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push("leaf", t.shape().to_vec(), t.data().to_vec(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        self.push("leaf", shape, data, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("add", shape, value, Op::Add(a.0, b.0))
    }

    /// `[r, c] + [c]`, broadcasting the row vector over every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ash.len() == 2 && bsh.len() == 1 && ash[1] == bsh[0],
            "add_row: shape mismatch {ash:?} vs {bsh:?}"
        );
        let c = ash[1];
        let bval = &self.nodes[b.0].value;
        let value = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .map(|(i, x)| x + bval[i % c])
            .collect();
        self.push("add_row", ash, value, Op::AddRow(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "mul: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("mul", shape, value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("scale", shape, value, Op::Scale(a.0, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[0],
            "matmul: shape mismatch {ash:?} vs {bsh:?}"
        );
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut value = vec![0.0; m * n];
        gemm_rowmajor(
            m, k, n,
            &self.nodes[a.0].value, k as isize, 1,
            &self.nodes[b.0].value, n as isize, 1,
            &mut value, 0.0,
        );
        self.push("matmul", vec![m, n], value, Op::Matmul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(ash.len() == 2, "transpose: expected 2-d shape, got {ash:?}");
        let (r, c) = (ash[0], ash[1]);
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], value, Op::Transpose(a.0))
    }

    pub fn concat(&mut self, axis: usize, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty(), "concat: no inputs");
        let base = self.shape(inputs[0]).to_vec();
        assert!(axis < base.len(), "concat: axis {axis} out of range for {base:?}");
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            assert_eq!(s.len(), base.len(), "concat: rank mismatch {s:?} vs {base:?}");
            for (d, (&x, &y)) in s.iter().zip(&base).enumerate() {
                assert!(
                    d == axis || x == y,
                    "concat: shape mismatch {s:?} vs {base:?} on axis {d}"
                );
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut value = vec![0.0; shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let len_v = self.shape(v)[axis];
            let src = &self.nodes[v.0].value;
            for o in 0..outer {
                for i in 0..len_v {
                    let dst_base = (o * total + offset + i) * inner;
                    let src_base = (o * len_v + i) * inner;
                    value[dst_base..dst_base + inner]
                        .copy_from_slice(&src[src_base..src_base + inner]);
                }
            }
            offset += len_v;
        }
        self.push(
            "concat",
            shape,
            value,
            Op::Concat { axis, inputs: inputs.iter().map(|v| v.0).collect() },
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let ash = self.shape(a).to_vec();
        assert!(
            axis < ash.len() && start + len <= ash[axis],
            "slice: range {start}..{} out of bounds for {ash:?} on axis {axis}",
            start + len
        );
        let (outer, full, inner) = axis_split(&ash, axis);
        let mut shape = ash.clone();
        shape[axis] = len;
        let src = &self.nodes[a.0].value;
        let mut value = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for i in 0..len {
                let dst = (o * len + i) * inner;
                let spos = (o * full + start + i) * inner;
                value[dst..dst + inner].copy_from_slice(&src[spos..spos + inner]);
            }
        }
        self.push("slice", shape, value, Op::Slice { input: a.0, axis, start })
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.len(),
            "reshape: {:?} -> {shape:?} changes element count",
            self.shape(a)
        );
        let value = self.nodes[a.0].value.clone();
        self.push("reshape", shape, value, Op::Reshape(a.0))
    }

    /// Row lookup: `table[v, d]` gathered at `indices` -> `[n, d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Var {
        let tsh = self.shape(table).to_vec();
        assert!(tsh.len() == 2, "embedding: table must be 2-d, got {tsh:?}");
        let (v, d) = (tsh[0], tsh[1]);
        for &i in indices {
            assert!(i < v, "embedding: index {i} out of range for table {tsh:?}");
        }
        let src = &self.nodes[table.0].value;
        let mut value = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            value.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        self.push(
            "embedding",
            vec![indices.len(), d],
            value,
            Op::Embedding { table: table.0, indices: indices.to_vec() },
        )
    }

    /// 1-d convolution over `[t, c_in]` with weight `[c_out, c_in, k]` and
    /// bias `[c_out]`; zero padding.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Var {
        let (xsh, wsh, bsh) = (
            self.shape(input).to_vec(),
            self.shape(weight).to_vec(),
            self.shape(bias).to_vec(),
        );
        assert!(
            xsh.len() == 2 && wsh.len() == 3 && bsh.len() == 1 && xsh[1] == wsh[1] && wsh[0] == bsh[0],
            "conv1d: shape mismatch input {xsh:?}, weight {wsh:?}, bias {bsh:?}"
        );
        assert!(stride >= 1, "conv1d: stride must be >= 1");
        let (t_in, c_in) = (xsh[0], xsh[1]);
        let (c_out, _, k) = (wsh[0], wsh[1], wsh[2]);
        assert!(
            t_in + 2 * padding >= k,
            "conv1d: kernel {k} longer than padded input {}",
            t_in + 2 * padding
        );
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let b = &self.nodes[bias.0].value;
        let mut value = vec![0.0; t_out * c_out];
        for to in 0..t_out {
            for co in 0..c_out {
                let mut acc = b[co];
                for kk in 0..k {
                    let ti = (to * stride + kk) as isize - padding as isize;
                    if ti < 0 || ti >= t_in as isize {
                        continue;
                    }
                    let xrow = &x[ti as usize * c_in..(ti as usize + 1) * c_in];
                    let wrow = &w[(co * c_in) * k + kk..];
                    // weight layout [c_out, c_in, k]: w[co, ci, kk]
                    for ci in 0..c_in {
                        acc += xrow[ci] * wrow[ci * k];
                    }
                }
                value[to * c_out + co] = acc;
            }
        }
        self.push(
            "conv1d",
            vec![t_out, c_out],
            value,
            Op::Conv1d { input: input.0, weight: weight.0, bias: bias.0, stride, padding },
        )
    }

    /// Group normalization over `[t, c]` with `groups` channel groups;
    /// statistics pool over time and the channels of each group.
    pub fn group_norm(&mut self, input: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xsh = self.shape(input).to_vec();
        assert!(xsh.len() == 2, "group_norm: expected 2-d input, got {xsh:?}");
        let (t, c) = (xsh[0], xsh[1]);
        assert!(
            groups >= 1 && c % groups == 0,
            "group_norm: groups {groups} does not divide channels {c}"
        );
        assert_eq!(self.shape(gamma), &[c], "group_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "group_norm: beta shape");
        let (gm, bt) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let x = &self.nodes[input.0].value;
        let cg = c / groups;
        let mut value = vec![0.0; t * c];
        for g in 0..groups {
            let (mean, inv_std) = group_stats(x, t, c, g, cg);
            for ti in 0..t {
                for ci in g * cg..(g + 1) * cg {
                    let xhat = (x[ti * c + ci] - mean) * inv_std;
                    value[ti * c + ci] = gm[ci] * xhat + bt[ci];
                }
            }
        }
        self.push(
            "group_norm",
            xsh,
            value,
            Op::GroupNorm { input: input.0, gamma: gamma.0, beta: beta.0, groups },
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, input: Var, gamma: Var, beta: Var) -> Var {
        let xsh = self.shape(input).to_vec();
        let c = *xsh.last().expect("layer_norm: scalar input");
        assert_eq!(self.shape(gamma), &[c], "layer_norm: gamma shape");
        assert_eq!(self.shape(beta), &[c], "layer_norm: beta shape");
        let rows = self.nodes[input.0].value.len() / c;
        let (gm, bt) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let x = &self.nodes[input.0].value;
        let mut value = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let (mean, inv_std) = row_stats(row);
            for ci in 0..c {
                value[r * c + ci] = gm[ci] * (row[ci] - mean) * inv_std + bt[ci];
            }
        }
        self.push(
            "layer_norm",
            xsh,
            value,
            Op::LayerNorm { input: input.0, gamma: gamma.0, beta: beta.0 },
        )
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "softmax: axis {axis} out of range for {shape:?}");
        let value = softmax_values(&self.nodes[a.0].value, &shape, axis, false);
        self.push("softmax", shape, value, Op::Softmax { input: a.0, axis })
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(axis < shape.len(), "log_softmax: axis {axis} out of range for {shape:?}");
        let value = softmax_values(&self.nodes[a.0].value, &shape, axis, true);
        self.push("log_softmax", shape, value, Op::LogSoftmax { input: a.0, axis })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("tanh", shape, value, Op::Tanh(a.0))
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| mish_scalar(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("mish", shape, value, Op::Mish(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let value = vec![self.nodes[a.0].value.iter().sum::<f64>() / n as f64];
        self.push("mean", vec![1], value, Op::Mean(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = vec![self.nodes[a.0].value.iter().sum::<f64>()];
        self.push("sum", vec![1], value, Op::Sum(a.0))
    }

    /// `[m, d]` and `[n, d]` -> `[m, n, d]` with `out[i, j] = a[i] + b[j]`.
    pub fn outer_row_add(&mut self, a: Var, b: Var) -> Var {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            ash.len() == 2 && bsh.len() == 2 && ash[1] == bsh[1],
            "outer_row_add: shape mismatch {ash:?} vs {bsh:?}"
        );
        let (m, d, n) = (ash[0], ash[1], bsh[0]);
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut value = vec![0.0; m * n * d];
        for i in 0..m {
            for j in 0..n {
                let base = (i * n + j) * d;
                for k in 0..d {
                    value[base + k] = av[i * d + k] + bv[j * d + k];
                }
            }
        }
        self.push("outer_row_add", vec![m, n, d], value, Op::OuterRowAdd(a.0, b.0))
    }

    /// Records an externally computed scalar loss whose gradient with respect
    /// to `input` is already known.
    pub fn inject_loss(&mut self, input: Var, loss: f64, grad: Vec<f64>) -> Var {
        assert_eq!(
            grad.len(),
            self.nodes[input.0].value.len(),
            "inject_loss: gradient length {} does not match input {:?}",
            grad.len(),
            self.shape(input)
        );
        self.push("inject_loss", vec![1], vec![loss], Op::InjectLoss { input: input.0, grad })
    }

    /// Backpropagates from a scalar node, returning per-node gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward: loss must be scalar, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g_out) = grads[id].take() else { continue };
            self.backward_step(id, &g_out, &mut grads);
            grads[id] = Some(g_out);
        }
        Gradients { grads }
    }

    fn backward_step(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let acc = |grads: &mut [Option<Vec<f64>>], target: usize, contrib: &dyn Fn(&mut [f64])| {
            let buf = grads[target]
                .get_or_insert_with(|| vec![0.0; self.nodes[target].value.len()]);
            contrib(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(grads, *b, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::AddRow(a, b) => {
                let c = self.nodes[*b].value.len();
                acc(grads, *a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(grads, *b, &|buf| {
                    for (i, y) in g.iter().enumerate() {
                        buf[i % c] += y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                acc(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(grads, *b, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * c;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                // dA += dC * B^T
                acc(grads, *a, &|buf| {
                    gemm_rowmajor(m, n, k, g, n as isize, 1, bv, 1, n as isize, buf, 1.0);
                });
                // dB += A^T * dC
                acc(grads, *b, &|buf| {
                    gemm_rowmajor(k, m, n, av, 1, k as isize, g, n as isize, 1, buf, 1.0);
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                acc(grads, *a, &|buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Concat { axis, inputs } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &src in inputs {
                    let len_v = self.nodes[src].shape[*axis];
                    let off = offset;
                    acc(grads, src, &|buf| {
                        for o in 0..outer {
                            for i in 0..len_v {
                                let gpos = (o * total + off + i) * inner;
                                let bpos = (o * len_v + i) * inner;
                                for x in 0..inner {
                                    buf[bpos + x] += g[gpos + x];
                                }
                            }
                        }
                    });
                    offset += len_v;
                }
            }
            Op::Slice { input, axis, start } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let full = self.nodes[*input].shape[*axis];
                acc(grads, *input, &|buf| {
                    for o in 0..outer {
                        for i in 0..len {
                            let gpos = (o * len + i) * inner;
                            let bpos = (o * full + start + i) * inner;
                            for x in 0..inner {
                                buf[bpos + x] += g[gpos + x];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                acc(grads, *a, &|buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Embedding { table, indices } => {
                let d = self.nodes[*table].shape[1];
                acc(grads, *table, &|buf| {
                    for (row, &idx) in indices.iter().enumerate() {
                        for k in 0..d {
                            buf[idx * d + k] += g[row * d + k];
                        }
                    }
                });
            }
            Op::Conv1d { input, weight, bias, stride, padding } => {
                let (t_in, c_in) = (self.nodes[*input].shape[0], self.nodes[*input].shape[1]);
                let (c_out, k) = (self.nodes[*weight].shape[0], self.nodes[*weight].shape[2]);
                let t_out = node.shape[0];
                let x = &self.nodes[*input].value;
                let w = &self.nodes[*weight].value;
                acc(grads, *bias, &|buf| {
                    for to in 0..t_out {
                        for co in 0..c_out {
                            buf[co] += g[to * c_out + co];
                        }
                    }
                });
                acc(grads, *weight, &|buf| {
                    for to in 0..t_out {
                        for kk in 0..k {
                            let ti = (to * stride + kk) as isize - *padding as isize;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let xrow = &x[ti as usize * c_in..(ti as usize + 1) * c_in];
                            for co in 0..c_out {
                                let go = g[to * c_out + co];
                                for ci in 0..c_in {
                                    buf[(co * c_in + ci) * k + kk] += go * xrow[ci];
                                }
                            }
                        }
                    }
                });
                acc(grads, *input, &|buf| {
                    for to in 0..t_out {
                        for kk in 0..k {
                            let ti = (to * stride + kk) as isize - *padding as isize;
                            if ti < 0 || ti >= t_in as isize {
                                continue;
                            }
                            let brow = &mut buf[ti as usize * c_in..(ti as usize + 1) * c_in];
                            for co in 0..c_out {
                                let go = g[to * c_out + co];
                                for ci in 0..c_in {
                                    brow[ci] += go * w[(co * c_in + ci) * k + kk];
                                }
                            }
                        }
                    }
                });
            }
            Op::GroupNorm { input, gamma, beta, groups } => {
                let (t, c) = (node.shape[0], node.shape[1]);
                let cg = c / groups;
                let x = &self.nodes[*input].value;
                let gm = &self.nodes[*gamma].value;
                acc(grads, *beta, &|buf| {
                    for ti in 0..t {
                        for ci in 0..c {
                            buf[ci] += g[ti * c + ci];
                        }
                    }
                });
                for grp in 0..*groups {
                    let (mean, inv_std) = group_stats(x, t, c, grp, cg);
                    acc(grads, *gamma, &|buf| {
                        for ti in 0..t {
                            for ci in grp * cg..(grp + 1) * cg {
                                let xhat = (x[ti * c + ci] - mean) * inv_std;
                                buf[ci] += g[ti * c + ci] * xhat;
                            }
                        }
                    });
                    // dL/dxhat = g * gamma; then the standard normalization
                    // backward over the n = t*cg pooled elements.
                    let n = (t * cg) as f64;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for ti in 0..t {
                        for ci in grp * cg..(grp + 1) * cg {
                            let dxhat = g[ti * c + ci] * gm[ci];
                            let xhat = (x[ti * c + ci] - mean) * inv_std;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                    }
                    acc(grads, *input, &|buf| {
                        for ti in 0..t {
                            for ci in grp * cg..(grp + 1) * cg {
                                let dxhat = g[ti * c + ci] * gm[ci];
                                let xhat = (x[ti * c + ci] - mean) * inv_std;
                                buf[ti * c + ci] += inv_std
                                    * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { input, gamma, beta } => {
                let c = *node.shape.last().unwrap();
                let rows = node.value.len() / c;
                let x = &self.nodes[*input].value;
                let gm = &self.nodes[*gamma].value;
                acc(grads, *beta, &|buf| {
                    for r in 0..rows {
                        for ci in 0..c {
                            buf[ci] += g[r * c + ci];
                        }
                    }
                });
                acc(grads, *gamma, &|buf| {
                    for r in 0..rows {
                        let row = &x[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_stats(row);
                        for ci in 0..c {
                            buf[ci] += g[r * c + ci] * (row[ci] - mean) * inv_std;
                        }
                    }
                });
                acc(grads, *input, &|buf| {
                    for r in 0..rows {
                        let row = &x[r * c..(r + 1) * c];
                        let (mean, inv_std) = row_stats(row);
                        let n = c as f64;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for ci in 0..c {
                            let dxhat = g[r * c + ci] * gm[ci];
                            let xhat = (row[ci] - mean) * inv_std;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for ci in 0..c {
                            let dxhat = g[r * c + ci] * gm[ci];
                            let xhat = (row[ci] - mean) * inv_std;
                            buf[r * c + ci] +=
                                inv_std * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(grads, *input, &|buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut dot = 0.0;
                            for i in 0..len {
                                let p = (o * len + i) * inner + j;
                                dot += g[p] * y[p];
                            }
                            for i in 0..len {
                                let p = (o * len + i) * inner + j;
                                buf[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.value;
                acc(grads, *input, &|buf| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let mut gsum = 0.0;
                            for i in 0..len {
                                gsum += g[(o * len + i) * inner + j];
                            }
                            for i in 0..len {
                                let p = (o * len + i) * inner + j;
                                buf[p] += g[p] - y[p].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Mish(a) => {
                let x = &self.nodes[*a].value;
                acc(grads, *a, &|buf| {
                    for i in 0..buf.len() {
                        let sp = softplus(x[i]);
                        let th = sp.tanh();
                        let d = th + x[i] * (1.0 - th * th) * sigmoid(x[i]);
                        buf[i] += g[i] * d;
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len() as f64;
                acc(grads, *a, &|buf| {
                    for v in buf.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::Sum(a) => {
                acc(grads, *a, &|buf| {
                    for v in buf.iter_mut() {
                        *v += g[0];
                    }
                });
            }
            Op::OuterRowAdd(a, b) => {
                let (m, d) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[0];
                acc(grads, *a, &|buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let base = (i * n + j) * d;
                            for k in 0..d {
                                buf[i * d + k] += g[base + k];
                            }
                        }
                    }
                });
                acc(grads, *b, &|buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let base = (i * n + j) * d;
                            for k in 0..d {
                                buf[j * d + k] += g[base + k];
                            }
                        }
                    }
                });
            }
            Op::InjectLoss { input, grad } => {
                acc(grads, *input, &|buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[0] * grad[i];
                    }
                });
            }
        }
    }
}

/// Row-major gemm with explicit strides: `c += a*b` scaled by `beta` on `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(),
            n as isize, 1,
        );
    }
}

fn group_stats(x: &[f64], t: usize, c: usize, group: usize, cg: usize) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = (t * cg) as f64;
    let mut mean = 0.0;
    for ti in 0..t {
        for ci in group * cg..(group + 1) * cg {
            mean += x[ti * c + ci];
        }
    }
    mean /= n;
    let mut var = 0.0;
    for ti in 0..t {
        for ci in group * cg..(group + 1) * cg {
            let d = x[ti * c + ci] - mean;
            var += d * d;
        }
    }
    var /= n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    const EPS: f64 = 1e-5;
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn softmax_values(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for j in 0..inner {
            let mut maxv = f64::NEG_INFINITY;
            for i in 0..len {
                maxv = maxv.max(x[(o * len + i) * inner + j]);
            }
            let mut z = 0.0;
            for i in 0..len {
                z += (x[(o * len + i) * inner + j] - maxv).exp();
            }
            let logz = maxv + z.ln();
            for i in 0..len {
                let p = (o * len + i) * inner + j;
                out[p] = if log { x[p] - logz } else { (x[p] - logz).exp() };
            }
        }
    }
    out
}
