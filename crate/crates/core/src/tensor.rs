//! Dense row-major tensors and the raw kernels shared by the autodiff tape
//! and the tape-free inference path.

use rand::Rng;

/// Engine scalar. 64-bit unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<Real>) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in shape {shape:?}");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<Real>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<Real> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: Real, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    /// Approximately normal via Box-Muller, mean 0.
    pub fn normal(shape: &[usize], std: Real, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push((r * theta.cos()) as Real * std);
            if data.len() < n {
                data.push((r * theta.sin()) as Real * std);
            }
        }
        Tensor::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows and columns when viewed as a matrix over the last dimension.
    pub fn as_matrix(&self) -> (usize, usize) {
        let cols = *self.shape.last().expect("tensor has no dimensions");
        (self.data.len() / cols, cols)
    }

    pub fn row(&self, r: usize) -> &[Real] {
        let (_, cols) = self.as_matrix();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    pub fn item(&self) -> Real {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

// ---------------------------------------------------------------------------
// kernels

/// `out[n,m] = a[n,k] · b[k,m]`
pub fn matmul(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    out.fill(0.0);
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,m] = a[n,k] · b[m,k]ᵀ`
pub fn matmul_nt(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            out[i * m + j] = dot(arow, brow);
        }
    }
}

/// `out[k,m] += a[n,k]ᵀ · b[n,m]`
pub fn matmul_tn_acc(a: &[Real], b: &[Real], n: usize, k: usize, m: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-wise `x · w + bias` for `x[n, k]`, `w[k, m]`.
pub fn linear(x: &[Real], n: usize, w: &Tensor, bias: &Tensor) -> Vec<Real> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; n * m];
    matmul(x, w.data(), n, k, m, &mut out);
    for row in out.chunks_mut(m) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    out
}

/// In-place max-stabilised softmax of one row.
pub fn softmax_in_place(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise layer normalisation; returns per-row `(mean, 1/std)`.
pub fn layer_norm_rows(
    x: &[Real],
    cols: usize,
    gamma: &[Real],
    beta: &[Real],
    eps: Real,
    out: &mut [Real],
) -> Vec<(Real, Real)> {
    let mut stats = Vec::with_capacity(x.len() / cols);
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let mean = xr.iter().sum::<Real>() / cols as Real;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / cols as Real;
        let rstd = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            or[c] = (xr[c] - mean) * rstd * gamma[c] + beta[c];
        }
        stats.push((mean, rstd));
    }
    stats
}

/// Sinusoidal position encodings `[len, d]`: even dims sin, odd dims cos.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for (pos, row) in data.chunks_mut(d.max(1)).enumerate().take(len) {
        sinusoidal_row(pos, row);
    }
    Tensor::new(vec![len, d], data)
}

/// Writes the encoding of one position into `row`.
pub fn sinusoidal_row(pos: usize, row: &mut [Real]) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = (10000.0 as Real).powf(-((2 * i) as Real) / d as Real);
        let angle = pos as Real * freq;
        row[2 * i] = angle.sin();
        row[2 * i + 1] = angle.cos();
    }
}
