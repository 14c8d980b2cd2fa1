//! Minimal reverse-mode automatic differentiation over dense `f64` tensors,
//! with a finite-difference checker, an Adam optimizer and a bit-exact
//! checkpoint container.
//!
//! A [`Tape`] and its nodes are confined to one worker; parameters live
//! outside the tape as [`Tensor`]s and get lifted onto each forward pass
//! through a [`ParamBinder`], which deduplicates repeated binds so gradients
//! of shared parameters accumulate on a single leaf.

pub mod checkpoint;
mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{adam_step, Adam, AdamParams, AdamState, OptimError};
pub use tape::{mish_scalar, softplus, Gradients, Tape, Var};
pub use tensor::Tensor;

use std::collections::BTreeMap;

/// Name-keyed registry of parameters lifted onto a tape.
///
/// Binding the same name twice returns the original leaf, so a block invoked
/// several times in one forward pass contributes a single gradient buffer.
#[derive(Default)]
pub struct ParamBinder {
    bound: BTreeMap<String, Var>,
}

impl ParamBinder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str, tensor: &Tensor) -> Var {
        if let Some(&var) = self.bound.get(name) {
            assert_eq!(
                tape.shape(var),
                tensor.shape(),
                "parameter {name} rebound with a different shape"
            );
            return var;
        }
        let var = tape.leaf(tensor);
        self.bound.insert(name.to_string(), var);
        var
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Visits `(name, gradient)` for every bound parameter that received one.
    pub fn for_each_grad(&self, grads: &Gradients, mut f: impl FnMut(&str, &[f64])) {
        for (name, &var) in &self.bound {
            if let Some(g) = grads.get(var) {
                f(name, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Wraps any tape expression into a pseudo-random scalar so that every
    /// output element influences the loss with a distinct weight.
    fn weighted_sum(tape: &mut Tape, v: Var) -> Var {
        let n = tape.value(v).len();
        let weights: Vec<f64> = (0..n).map(|i| ((i * 2654435761) % 97) as f64 / 48.5 - 1.0).collect();
        let shape = tape.shape(v).to_vec();
        let w = tape.leaf_from(shape, weights);
        let prod = tape.mul(v, w);
        tape.sum(prod)
    }

    #[test]
    fn mish_at_zero_is_zero() {
        assert_eq!(mish_scalar(0.0), 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1], vec![0.0]);
        let y = tape.mish(x);
        assert_eq!(tape.value(y)[0], 0.0);
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!(tape::softplus(800.0).is_finite());
        assert!(tape::softplus(-800.0) >= 0.0);
        assert!((tape::softplus(0.0) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn group_norm_on_constant_input_is_zero_before_affine() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![3, 4], vec![2.5; 12]);
        let gamma = tape.leaf_from(vec![4], vec![1.0; 4]);
        let beta = tape.leaf_from(vec![4], vec![0.0; 4]);
        let y = tape.group_norm(x, gamma, beta, 2);
        assert!(tape.value(y).iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn conv1d_length_law() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![26, 2], vec![0.1; 52]);
        let w = tape.leaf_from(vec![3, 2, 3], vec![0.1; 18]);
        let b = tape.leaf_from(vec![3], vec![0.0; 3]);
        let y = tape.conv1d(x, w, b, 1, 1);
        assert_eq!(tape.shape(y), &[26, 3]);
        let y2 = tape.conv1d(x, w, b, 2, 1);
        // floor((26 + 2 - 3) / 2) + 1 = 13
        assert_eq!(tape.shape(y2), &[13, 3]);
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let x = tape.leaf(&randn(&mut rng, vec![5, 7]));
        let sm = tape.softmax(x, 1);
        for row in tape.value(sm).chunks(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "row sum {s}");
        }
        let lsm = tape.log_softmax(x, 1);
        for (l, p) in tape.value(lsm).iter().zip(tape.value(sm)) {
            assert!((l - p.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_backward_splits_upstream_gradient_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = randn(&mut rng, vec![3, 2]);
        let b = randn(&mut rng, vec![5, 2]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
        let cat = tape.concat(0, &[va, vb]);
        let loss = weighted_sum(&mut tape, cat);
        let grads = tape.backward(loss);
        let ga = grads.get(va).unwrap();
        let gb = grads.get(vb).unwrap();
        let gcat = grads.get(cat).unwrap();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        assert!((norm(ga) + norm(gb) - norm(gcat)).abs() < 1e-12);
        assert_eq!(&gcat[..6], ga);
        assert_eq!(&gcat[6..], gb);
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_forward_values() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = randn(&mut rng, vec![4, 6]);
            let w = randn(&mut rng, vec![6, 3]);
            let mut tape = Tape::new();
            let (vx, vw) = (tape.leaf(&x), tape.leaf(&w));
            let y = tape.matmul(vx, vw);
            let t = tape.tanh(y);
            let m = tape.mish(t);
            tape.value(m).to_vec()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    #[should_panic(expected = "matmul: shape mismatch")]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2, 3], vec![0.0; 6]);
        let b = tape.leaf_from(vec![2, 3], vec![0.0; 6]);
        let _ = tape.matmul(a, b);
    }

    #[test]
    fn binder_dedupes_by_name() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let mut binder = ParamBinder::new();
        let v1 = binder.bind(&mut tape, "w", &t);
        let v2 = binder.bind(&mut tape, "w", &t);
        assert_eq!(v1, v2);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn embedding_grad_flows_only_to_looked_up_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = randn(&mut rng, vec![6, 3]);
        let mut tape = Tape::new();
        let vt = tape.leaf(&table);
        let emb = tape.embedding(vt, &[1, 4, 1]);
        let loss = weighted_sum(&mut tape, emb);
        let grads = tape.backward(loss);
        let g = grads.get(vt).unwrap();
        for row in 0..6 {
            let touched = row == 1 || row == 4;
            let nz = g[row * 3..(row + 1) * 3].iter().any(|&v| v != 0.0);
            assert_eq!(nz, touched, "row {row}");
        }
    }

    /// Finite-difference pass over every primitive, several shapes each.
    #[test]
    fn primitives_pass_finite_difference_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tol = 1e-4;
        let eps = 1e-4;

        for (r, c) in [(1usize, 3usize), (4, 2), (3, 5)] {
            let x = randn(&mut rng, vec![r, c]);
            let y = randn(&mut rng, vec![r, c]);
            grad_check(
                |t, v| {
                    let s = t.add(v[0], v[1]);
                    weighted_sum(t, s)
                },
                &[x.clone(), y.clone()],
                eps,
                tol,
            )
            .assert_pass("add");
            grad_check(
                |t, v| {
                    let s = t.mul(v[0], v[1]);
                    weighted_sum(t, s)
                },
                &[x.clone(), y.clone()],
                eps,
                tol,
            )
            .assert_pass("mul");
            grad_check(
                |t, v| {
                    let s = t.tanh(v[0]);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("tanh");
            grad_check(
                |t, v| {
                    let s = t.mish(v[0]);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("mish");
            grad_check(
                |t, v| {
                    let s = t.softmax(v[0], 1);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("softmax");
            grad_check(
                |t, v| {
                    let s = t.log_softmax(v[0], 1);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("log_softmax");
            grad_check(|t, v| t.mean(v[0]), std::slice::from_ref(&x), eps, tol).assert_pass("mean");
            grad_check(|t, v| t.sum(v[0]), std::slice::from_ref(&x), eps, tol).assert_pass("sum");
            grad_check(
                |t, v| {
                    let s = t.transpose(v[0]);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("transpose");
            grad_check(
                |t, v| {
                    let s = t.scale(v[0], -1.7);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&x),
                eps,
                tol,
            )
            .assert_pass("scale");
        }

        for (m, k, n) in [(1usize, 2usize, 3usize), (3, 4, 2), (2, 5, 5)] {
            let a = randn(&mut rng, vec![m, k]);
            let b = randn(&mut rng, vec![k, n]);
            grad_check(
                |t, v| {
                    let s = t.matmul(v[0], v[1]);
                    weighted_sum(t, s)
                },
                &[a, b],
                eps,
                tol,
            )
            .assert_pass("matmul");
        }

        // concat + slice on both axes
        for axis in [0usize, 1] {
            let a = randn(&mut rng, vec![3, 4]);
            let b = randn(&mut rng, vec![3, 4]);
            grad_check(
                |t, v| {
                    let s = t.concat(axis, &[v[0], v[1]]);
                    weighted_sum(t, s)
                },
                &[a.clone(), b.clone()],
                eps,
                tol,
            )
            .assert_pass("concat");
            grad_check(
                |t, v| {
                    let s = t.slice(v[0], axis, 1, 2);
                    weighted_sum(t, s)
                },
                std::slice::from_ref(&a),
                eps,
                tol,
            )
            .assert_pass("slice");
        }

        // add_row
        let a = randn(&mut rng, vec![4, 3]);
        let b = randn(&mut rng, vec![3]);
        grad_check(
            |t, v| {
                let s = t.add_row(v[0], v[1]);
                weighted_sum(t, s)
            },
            &[a, b],
            eps,
            tol,
        )
        .assert_pass("add_row");

        // embedding
        let table = randn(&mut rng, vec![7, 4]);
        grad_check(
            |t, v| {
                let s = t.embedding(v[0], &[0, 3, 3, 6]);
                weighted_sum(t, s)
            },
            &[table],
            eps,
            tol,
        )
        .assert_pass("embedding");

        // conv1d over stride/padding combos
        for (stride, padding) in [(1usize, 0usize), (1, 1), (2, 1)] {
            let x = randn(&mut rng, vec![7, 3]);
            let w = randn(&mut rng, vec![4, 3, 3]);
            let b = randn(&mut rng, vec![4]);
            grad_check(
                |t, v| {
                    let s = t.conv1d(v[0], v[1], v[2], stride, padding);
                    weighted_sum(t, s)
                },
                &[x, w, b],
                eps,
                tol,
            )
            .assert_pass("conv1d");
        }

        // group_norm / layer_norm
        for groups in [1usize, 2, 4] {
            let x = randn(&mut rng, vec![5, 4]);
            let gamma = randn(&mut rng, vec![4]);
            let beta = randn(&mut rng, vec![4]);
            grad_check(
                |t, v| {
                    let s = t.group_norm(v[0], v[1], v[2], groups);
                    weighted_sum(t, s)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                eps,
                tol,
            )
            .assert_pass("group_norm");
            grad_check(
                |t, v| {
                    let s = t.layer_norm(v[0], v[1], v[2]);
                    weighted_sum(t, s)
                },
                &[x, gamma, beta],
                eps,
                tol,
            )
            .assert_pass("layer_norm");
        }

        // reshape + outer_row_add
        let a = randn(&mut rng, vec![3, 4]);
        grad_check(
            |t, v| {
                let s = t.reshape(v[0], vec![2, 6]);
                weighted_sum(t, s)
            },
            &[a],
            eps,
            tol,
        )
        .assert_pass("reshape");
        let a = randn(&mut rng, vec![3, 4]);
        let b = randn(&mut rng, vec![2, 4]);
        grad_check(
            |t, v| {
                let s = t.outer_row_add(v[0], v[1]);
                weighted_sum(t, s)
            },
            &[a, b],
            eps,
            tol,
        )
        .assert_pass("outer_row_add");
    }
}
