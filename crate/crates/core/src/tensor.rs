//! Dense row-major `f64` tensors.
//!
//! Feature maps use the `(batch, channels, height, width)` layout; a map with
//! spatial size `h × w` is read as `N = h·w` tokens of `C` features each.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// A 4-axis `(B, C, h, w)` tensor flowing through the networks.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(B, C, h, w)` of a 4-axis tensor. Panics on other ranks.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape.len(),
            4,
            "expected a 4-axis tensor, got {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// Number of spatial tokens `N = h·w` of a feature map.
    pub fn tokens(&self) -> usize {
        let (_, _, h, w) = self.dims4();
        h * w
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Adds `other` element-wise in place.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Largest absolute element-wise difference. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Batch item `b` of a 4-axis tensor as a `(1, C, h, w)` tensor.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let (_, c, h, w) = self.dims4();
        let n = c * h * w;
        Tensor {
            shape: vec![1, c, h, w],
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    /// Stacks `(1, C, h, w)` (or `(C, h, w)`-sized) items along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Empty("cannot stack zero tensors".into()))?;
        let (_, c, h, w) = first.dims4();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        for t in items {
            if t.dims4() != (1, c, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "stack expects (1, {c}, {h}, {w}), got {:?}",
                    t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor {
            shape: vec![items.len(), c, h, w],
            data,
        })
    }
}

/// Row-major matrix product `C = alpha·op(A)·op(B) + beta·C` on slices.
///
/// `a` is `m × k` (or `k × m` when `trans_a`), `b` is `k × n` (or `n × k`
/// when `trans_b`), `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above describe exactly the slices asserted to be
    // large enough, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
