//! Dense row-major `f64` tensor holding values and, for parameters, an
//! accumulated gradient buffer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match buffer length {}",
            data.len()
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite tensor data");
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Self {
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(f).collect())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(
            g.len(),
            self.data.len(),
            "gradient length {} does not match tensor length {}",
            g.len(),
            self.data.len()
        );
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_data() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match buffer length")]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 3], vec![0.0; 5]);
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::zeros(vec![3]).with_grad();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[0.5, 0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5, 3.5][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }
}
