use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Every constructor rejects non-finite entries and shapes whose product does
/// not match the data length, so a `Tensor` in hand is always well formed.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::param(format!(
                "tensor shape must be a nonempty list of positive integers, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor entry {pos} is not finite ({})",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor from values that are already known to be finite and
    /// consistent with `shape`.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "invalid shape {shape:?}"
        );
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Self::new(vec![1], vec![value])
    }

    /// Stacks equal-length rows into a `[rows × cols]` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Dimension {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::usage(format!("item() on a tensor of shape {:?}", self.shape)))
        }
    }

    /// Views the tensor as a matrix: 1-D tensors are a single row.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::usage(format!(
                "expected a 1-D or 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || numel != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.matrix_dims().expect("row() needs a matrix");
        &self.data[r * c..(r + 1) * c]
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Tensor> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{op} produced a non-finite value at index {pos}"
            )));
        }
        Ok(self)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.data.len(), other.data.len());
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        )
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// `y = x W + b` with `x: [n × k]`, `w: [k × m]`, `b: [m]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let xw = matmul(x, w)?;
    add_row(&xw, b)
}

/// Plain matrix product `a b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.matrix_dims()?;
    let (k2, m) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; n * m];
    // Row-major strides: a is [n × k], b is [k × m].
    gemm(n, k, m, a.data(), (k, 1), b.data(), (m, 1), &mut out);
    Tensor::from_parts(vec![n, m], out).check_finite("matmul")
}

/// `aᵀ b` for `a: [n × k]`, `b: [n × m]`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = a.matrix_dims().expect("matrix");
    let (_, m) = b.matrix_dims().expect("matrix");
    let mut out = vec![0.0; k * m];
    gemm(k, n, m, a.data(), (1, k), b.data(), (m, 1), &mut out);
    Tensor::from_parts(vec![k, m], out)
}

/// `a bᵀ` for `a: [n × m]`, `b: [k × m]`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, m) = a.matrix_dims().expect("matrix");
    let (k, _) = b.matrix_dims().expect("matrix");
    let mut out = vec![0.0; n * k];
    gemm(n, m, k, a.data(), (m, 1), b.data(), (1, m), &mut out);
    Tensor::from_parts(vec![n, k], out)
}

/// `out = lhs · rhs` for an `[r × inner]` by `[inner × c]` product given as
/// (row, column) element strides; `out` is row-major `[r × c]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    r: usize,
    inner: usize,
    c: usize,
    lhs: &[f64],
    ls: (usize, usize),
    rhs: &[f64],
    rs: (usize, usize),
    out: &mut [f64],
) {
    debug_assert!(lhs.len() >= r * inner && rhs.len() >= inner * c && out.len() == r * c);
    if r == 0 || c == 0 {
        return;
    }
    // SAFETY: the slices cover every index reached by the given dimensions
    // and strides, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            r,
            inner,
            c,
            1.0,
            lhs.as_ptr(),
            ls.0 as isize,
            ls.1 as isize,
            rhs.as_ptr(),
            rs.0 as isize,
            rs.1 as isize,
            0.0,
            out.as_mut_ptr(),
            c as isize,
            1,
        );
    }
}

/// Adds the vector `b` to every row of `x`.
pub fn add_row(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, m) = x.matrix_dims()?;
    if b.numel() != m {
        return Err(Error::Dimension {
            op: "add_row",
            left: x.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = x.data().to_vec();
    for r in 0..n {
        for (o, &bv) in out[r * m..(r + 1) * m].iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::from_parts(vec![n, m], out).check_finite("add_row")
}

/// Largest `f64` strictly below one.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function, kept strictly inside `(0, 1)`.
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

/// Elementwise logistic function.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}
