//! The convolutional slice generator.
//!
//! One matrix `A` with `ŝ1·ŝ2·ŝ3·ŝ4` rows and `n_c` columns maps every code
//! vector of a network to a vectorized slice: `vec(slice_i) = A c_i`. The map
//! is strictly linear; there is no bias.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::slicer::{partition, reassemble, SliceGrid, SliceShape};
use crate::tensor::{check_finite, Matrix, Tensor4};

/// Encoders refuse generators whose condition number exceeds this.
pub const MAX_CONDITION: f64 = 1e12;

/// Latent representation of one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVector(Vec<f64>);

impl CodeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("code vector needs n_c >= 1".into()));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn zeros(n_c: usize) -> Self {
        Self(vec![0.0; n_c.max(1)])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// Code banks are stored as rank-5 stacks of `(n_c, 1, 1, 1)` tensors.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new([self.len(), 1, 1, 1], self.0.clone()).expect("finite by construction")
    }

    pub fn from_tensor(t: &Tensor4) -> Result<Self> {
        let [n, a, b, c] = t.shape();
        if (a, b, c) != (1, 1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "code tensor must be (n_c,1,1,1), got {:?}",
                t.shape()
            )));
        }
        debug_assert_eq!(n, t.len());
        Self::new(t.vectorize())
    }
}

/// Generator weights `A` tied to a slice shape.
#[derive(Debug, Clone, PartialEq)]
pub struct CsgMatrix {
    a: Matrix,
    slice_shape: SliceShape,
}

impl CsgMatrix {
    pub fn new(a: Matrix, slice_shape: SliceShape) -> Result<Self> {
        if a.rows() != slice_shape.element_count() {
            return Err(Error::ShapeMismatch(format!(
                "generator has {} rows but slice {slice_shape} has {} elements",
                a.rows(),
                slice_shape.element_count()
            )));
        }
        Ok(Self { a, slice_shape })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    pub fn slice_shape(&self) -> SliceShape {
        self.slice_shape
    }

    pub fn code_len(&self) -> usize {
        self.a.cols()
    }

    /// `|Ĝ|`.
    pub fn param_count(&self) -> usize {
        self.a.rows() * self.a.cols()
    }

    /// Stored as a rank-4 tensor of shape `(rows, n_c, 1, 1)`.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new([self.a.rows(), self.a.cols(), 1, 1], self.a.as_slice().to_vec())
            .expect("finite by construction")
    }

    pub fn from_tensor(t: &Tensor4, slice_shape: SliceShape) -> Result<Self> {
        let [rows, cols, a, b] = t.shape();
        if (a, b) != (1, 1) {
            return Err(Error::ShapeMismatch(format!(
                "generator tensor must be (rows,n_c,1,1), got {:?}",
                t.shape()
            )));
        }
        Self::new(Matrix::new(rows, cols, t.vectorize())?, slice_shape)
    }

    fn check_code(&self, c: &CodeVector) -> Result<()> {
        if c.len() != self.code_len() {
            return Err(Error::ShapeMismatch(format!(
                "code of length {} for a generator with n_c = {}",
                c.len(),
                self.code_len()
            )));
        }
        Ok(())
    }
}

/// Uniform on `(-b, b)` with `b = sqrt(6 / (rows + n_c))`.
pub fn init_csg(slice_shape: SliceShape, n_c: usize, seed: u64) -> Result<CsgMatrix> {
    if n_c == 0 {
        return Err(Error::InvalidConfig("n_c must be at least 1".into()));
    }
    let rows = slice_shape.element_count();
    let bound = (6.0 / (rows + n_c) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * n_c).map(|_| rng.random_range(-bound..bound)).collect();
    CsgMatrix::new(Matrix::new(rows, n_c, data)?, slice_shape)
}

/// `count` codes drawn i.i.d. from `N(0, 1/n_c)`.
pub fn init_codes(n_c: usize, count: usize, seed: u64) -> Result<Vec<CodeVector>> {
    if n_c == 0 {
        return Err(Error::InvalidConfig("n_c must be at least 1".into()));
    }
    let normal = Normal::new(0.0, 1.0 / (n_c as f64).sqrt()).expect("positive deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| CodeVector::new((0..n_c).map(|_| normal.sample(&mut rng)).collect()))
        .collect()
}

/// `vec(slice) = A c`.
pub fn generate_slice(g: &CsgMatrix, c: &CodeVector) -> Result<Tensor4> {
    g.check_code(c)?;
    Tensor4::devectorize(g.slice_shape.dims(), g.a.matvec(c.as_slice())?)
}

/// Generates every slice of `grid` and reassembles them into a filter set.
pub fn generate_filterset(g: &CsgMatrix, codes: &[CodeVector], grid: &SliceGrid) -> Result<Tensor4> {
    if grid.slice_shape() != g.slice_shape {
        return Err(Error::ShapeMismatch(format!(
            "grid slices {} but generator emits {}",
            grid.slice_shape(),
            g.slice_shape
        )));
    }
    if codes.len() != grid.slice_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} slices but {} codes were given",
            grid.slice_count(),
            codes.len()
        )));
    }
    let slices = codes.iter().map(|c| generate_slice(g, c)).collect::<Result<Vec<_>>>()?;
    reassemble(grid, &slices)
}

/// Gradients of a loss through one generated slice.
///
/// Given `upstream = ∂L/∂slice`, returns `(∂L/∂A, ∂L/∂c)` where
/// `∂L/∂A = vec(upstream) cᵀ` and `∂L/∂c = Aᵀ vec(upstream)`.
pub fn csg_backward(g: &CsgMatrix, c: &CodeVector, upstream: &Tensor4) -> Result<(Matrix, Vec<f64>)> {
    let mut grad_a = Matrix::zeros(g.a.rows(), g.a.cols());
    let grad_c = accumulate_slice_backward(g, c, upstream, &mut grad_a)?;
    Ok((grad_a, grad_c))
}

fn accumulate_slice_backward(
    g: &CsgMatrix,
    c: &CodeVector,
    upstream: &Tensor4,
    grad_a: &mut Matrix,
) -> Result<Vec<f64>> {
    g.check_code(c)?;
    if upstream.shape() != g.slice_shape.dims() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} for slice {}",
            upstream.shape(),
            g.slice_shape
        )));
    }
    let u = upstream.as_slice();
    grad_a.add_outer(1.0, u, c.as_slice());
    g.a.matvec_transposed(u)
}

/// Backpropagates a filter-set gradient into the generator and every code.
///
/// Contributions to `∂L/∂A` are summed in slice order.
pub fn filterset_backward(
    g: &CsgMatrix,
    codes: &[CodeVector],
    grid: &SliceGrid,
    upstream: &Tensor4,
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    if upstream.shape() != grid.filter_shape() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} for filters {:?}",
            upstream.shape(),
            grid.filter_shape()
        )));
    }
    if codes.len() != grid.slice_count() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} slices but {} codes were given",
            grid.slice_count(),
            codes.len()
        )));
    }
    // zero-filling partition is the adjoint of extent-masked reassembly
    let (_, slice_grads) = partition(upstream, grid.slice_shape())?;
    let mut grad_a = Matrix::zeros(g.a.rows(), g.a.cols());
    let grad_codes = codes
        .iter()
        .zip(&slice_grads)
        .map(|(c, u)| accumulate_slice_backward(g, c, u, &mut grad_a))
        .collect::<Result<Vec<_>>>()?;
    Ok((grad_a, grad_codes))
}

/// Least-squares encoder `c* = argmin ‖A c − vec(slice)‖₂`.
///
/// Factorizes `A = QR` once; each encode then solves `R c = Qᵀ s`.
#[derive(Debug, Clone)]
pub struct CsgEncoder {
    slice_shape: SliceShape,
    // R⁻¹ Qᵀ, n_c × rows
    pinv: Matrix,
    condition: f64,
}

impl CsgEncoder {
    pub fn new(g: &CsgMatrix) -> Result<Self> {
        let (rows, cols) = (g.a.rows(), g.a.cols());
        if cols > rows {
            return Err(Error::RankDeficient { condition: f64::INFINITY });
        }
        let a = DMatrix::from_row_slice(rows, cols, g.a.as_slice());
        let qr = a.qr();
        let r = qr.r();
        let sv = r.clone().singular_values();
        let (smax, smin) = sv.iter().fold((0.0f64, f64::INFINITY), |(hi, lo), &s| (hi.max(s), lo.min(s)));
        let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::RankDeficient { condition });
        }
        let qt = qr.q().transpose();
        let pinv = r
            .solve_upper_triangular(&qt)
            .ok_or(Error::RankDeficient { condition })?;
        let mut data = Vec::with_capacity(cols * rows);
        for i in 0..cols {
            data.extend(pinv.row(i).iter());
        }
        Ok(Self { slice_shape: g.slice_shape, pinv: Matrix::new(cols, rows, data)?, condition })
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn encode(&self, slice: &Tensor4) -> Result<CodeVector> {
        if slice.shape() != self.slice_shape.dims() {
            return Err(Error::ShapeMismatch(format!(
                "slice {:?} for an encoder of {}",
                slice.shape(),
                self.slice_shape
            )));
        }
        CodeVector::new(self.pinv.matvec(slice.as_slice())?)
    }
}

/// One-shot form of [`CsgEncoder::encode`].
pub fn encode_slice(g: &CsgMatrix, slice: &Tensor4) -> Result<CodeVector> {
    CsgEncoder::new(g)?.encode(slice)
}

/// Partitions `filters` and encodes every slice.
pub fn encode_filterset(g: &CsgMatrix, filters: &Tensor4) -> Result<(SliceGrid, Vec<CodeVector>)> {
    let enc = CsgEncoder::new(g)?;
    let (grid, slices) = partition(filters, g.slice_shape)?;
    let codes = slices.iter().map(|s| enc.encode(s)).collect::<Result<_>>()?;
    Ok((grid, codes))
}
