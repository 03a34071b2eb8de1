//! Rotationally invariant design matrices and synthetic multi-layer
//! instances.
//!
//! A design is `A = O^T Λ Q` with Haar-distributed orthogonal `O`, `Q` and a
//! configurable singular-value profile `Λ`. Matrix-vector products run
//! through the factors, so the dense matrix is never materialized except on
//! demand for small tests. The iid Gaussian ensemble is sampled directly as
//! a dense Gaussian matrix: it is rotationally invariant by itself and this
//! avoids an SVD in the hot path.

use faer::Mat;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Result};

/// Dense row-major matrix with the two matvec orientations used everywhere.
#[derive(Debug, Clone)]
pub struct RowMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RowMat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self * v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// `self^T * u`, accumulated row by row so access stays sequential.
    pub fn rmatvec(&self, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                for (o, &m) in out.iter_mut().zip(self.row(i)) {
                    *o += ui * m;
                }
            }
        }
        out
    }

    /// Max |self self^T - I|; zero for a matrix with orthonormal rows.
    pub fn row_gram_deviation(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.rows {
                let g = dot(self.row(i), self.row(j));
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((g - target).abs());
            }
        }
        dev
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // accumulate in four lanes so LLVM can vectorize
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Singular-value profile of one layer's design.
#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumSpec {
    /// iid Gaussian entries with variance `1 / max(n_in, n_out)`, so the
    /// limiting singular-value law has unit second moment.
    IidGaussian,
    /// Singular values drawn iid from `sqrt(6) * Beta(1, 2)`; the scale makes
    /// the second moment one.
    ScaledBeta,
    /// Explicit list of singular values, length `min(n_out, n_in)`.
    Explicit(Vec<f64>),
}

/// Prior of the input signal `x^1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prior {
    /// Standard normal entries.
    GaussianUnit,
    /// Uniform on {-1, +1}.
    Rademacher,
}

impl Prior {
    pub fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Prior::GaussianUnit => (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            Prior::Rademacher => (0..n)
                .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
        }
    }

    /// Second moment of the prior; one for both built-ins.
    pub fn second_moment(&self) -> f64 {
        1.0
    }
}

/// Componentwise middle-layer activation. Only ReLU ships; the signature
/// keeps a noise slot so noisy channels can be added without reshaping the
/// engine.
#[inline]
pub fn relu(g: f64) -> f64 {
    g.max(0.0)
}

/// Full description of the synthetic L-layer model: dimensions
/// `n_1..n_{L+1}`, one spectrum per design, the signal prior, and the
/// additive Gaussian noise level of the (linear) last layer. Middle layers
/// apply a noiseless ReLU.
#[derive(Debug, Clone)]
pub struct NetworkSpec {
    dims: Vec<usize>,
    spectra: Vec<SpectrumSpec>,
    prior: Prior,
    sigma: f64,
    deltas: Vec<f64>,
}

impl NetworkSpec {
    pub fn new(
        dims: Vec<usize>,
        spectra: Vec<SpectrumSpec>,
        prior: Prior,
        sigma: f64,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidDimension(
                "dims must list n_1..n_{L+1} (length >= 2)".into(),
            ));
        }
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::InvalidDimension("all dims must be positive".into()));
        }
        let layers = dims.len() - 1;
        if spectra.len() != layers {
            return Err(Error::SpecMismatch(format!(
                "expected {} spectra for {} layers, got {}",
                layers,
                layers,
                spectra.len()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidParameter("sigma must be >= 0".into()));
        }
        let deltas = (0..layers)
            .map(|l| dims[l + 1] as f64 / dims[l] as f64)
            .collect();
        Ok(NetworkSpec {
            dims,
            spectra,
            prior,
            sigma,
            deltas,
        })
    }

    pub fn layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `n_l` for `l` in `1..=L+1` (one-based, as in the model statement).
    pub fn dim(&self, l: usize) -> usize {
        self.dims[l - 1]
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Aspect ratio `delta_l = n_{l+1} / n_l` for layer `l` in `1..=L`.
    pub fn delta(&self, l: usize) -> f64 {
        self.deltas[l - 1]
    }

    pub fn spectrum(&self, l: usize) -> &SpectrumSpec {
        &self.spectra[l - 1]
    }

    pub fn prior(&self) -> Prior {
        self.prior
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// One layer's design matrix.
///
/// Orthogonal factors are kept as frames: `left` holds the first
/// `min(n_out, n_in)` rows of the Haar matrix `O`, `right` those of `Q`.
/// Rows beyond the frame never touch a matvec because `Λ` has at most
/// `min(n_out, n_in)` nonzero entries.
#[derive(Debug, Clone)]
pub enum DesignMatrix {
    Factored {
        n_out: usize,
        n_in: usize,
        left: RowMat,
        right: RowMat,
        lambda: Vec<f64>,
    },
    Dense {
        mat: RowMat,
    },
}

impl DesignMatrix {
    pub fn n_out(&self) -> usize {
        match self {
            DesignMatrix::Factored { n_out, .. } => *n_out,
            DesignMatrix::Dense { mat } => mat.rows,
        }
    }

    pub fn n_in(&self) -> usize {
        match self {
            DesignMatrix::Factored { n_in, .. } => *n_in,
            DesignMatrix::Dense { mat } => mat.cols,
        }
    }

    /// `A v` through the factors: `Q v`, scale by `Λ`, lift by `O^T`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        match self {
            DesignMatrix::Dense { mat } => mat.matvec(v),
            DesignMatrix::Factored {
                left,
                right,
                lambda,
                ..
            } => {
                let mut mid = right.matvec(v);
                for (m, l) in mid.iter_mut().zip(lambda) {
                    *m *= l;
                }
                left.rmatvec(&mid)
            }
        }
    }

    /// `A^T u` through the factors.
    pub fn rmatvec(&self, u: &[f64]) -> Vec<f64> {
        match self {
            DesignMatrix::Dense { mat } => mat.rmatvec(u),
            DesignMatrix::Factored {
                left,
                right,
                lambda,
                ..
            } => {
                let mut mid = left.matvec(u);
                for (m, l) in mid.iter_mut().zip(lambda) {
                    *m *= l;
                }
                right.rmatvec(&mid)
            }
        }
    }

    /// Singular values: stored for factored designs, computed by a dense SVD
    /// for Gaussian ones (only tests ask for these at any size that matters).
    pub fn singular_values(&self) -> Vec<f64> {
        match self {
            DesignMatrix::Factored { lambda, .. } => lambda.clone(),
            DesignMatrix::Dense { mat } => {
                let a = Mat::<f64>::from_fn(mat.rows, mat.cols, |i, j| mat.at(i, j));
                let svd = a.thin_svd().expect("svd of a finite matrix");
                let s = svd.S().column_vector();
                let mut vals: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
                vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                vals
            }
        }
    }

    /// Materialize the dense matrix; intended for small cases in tests.
    pub fn to_dense(&self) -> RowMat {
        match self {
            DesignMatrix::Dense { mat } => mat.clone(),
            DesignMatrix::Factored {
                n_out,
                n_in,
                left,
                right,
                lambda,
            } => {
                let k = lambda.len();
                let mut out = RowMat::zeros(*n_out, *n_in);
                // A = sum_k lambda_k * left_row_k^T right_row_k
                for r in 0..k {
                    let lam = lambda[r];
                    for i in 0..*n_out {
                        let li = left.at(r, i) * lam;
                        if li != 0.0 {
                            let row = &mut out.data[i * n_in..(i + 1) * n_in];
                            for (o, &q) in row.iter_mut().zip(right.row(r)) {
                                *o += li * q;
                            }
                        }
                    }
                }
                out
            }
        }
    }
}

fn gaussian_mat(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<f64> {
    // column-major fill order fixed for reproducibility
    let mut m = Mat::<f64>::zeros(rows, cols);
    for j in 0..cols {
        for i in 0..rows {
            let z: f64 = StandardNormal.sample(rng);
            m[(i, j)] = std * z;
        }
    }
    m
}

/// First `k` rows of an `n x n` Haar orthogonal matrix, as a `k x n` frame
/// with orthonormal rows. QR of an `n x k` Gaussian block with the R-diagonal
/// sign fixed gives exactly this law.
pub fn sample_haar_frame(k: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<RowMat> {
    if n == 0 || k == 0 || k > n {
        return Err(Error::InvalidDimension(format!(
            "haar frame needs 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let g = gaussian_mat(n, k, 1.0, rng);
    let qr = g.qr();
    let q = qr.compute_thin_Q();
    let r = qr.R();
    let mut frame = RowMat::zeros(k, n);
    for j in 0..k {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        let row = &mut frame.data[j * n..(j + 1) * n];
        for (i, slot) in row.iter_mut().enumerate() {
            *slot = s * q[(i, j)];
        }
    }
    Ok(frame)
}

/// Haar-distributed `n x n` orthogonal matrix (sign-fixed QR of an iid
/// Gaussian matrix, so the law is exactly Haar, not merely orthogonal).
pub fn sample_haar_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Result<RowMat> {
    sample_haar_frame(n, n, rng)
}

/// Draw the singular values dictated by `spec` for an `n_out x n_in` design.
pub fn sample_singular_values(
    spec: &SpectrumSpec,
    n_out: usize,
    n_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if n_out == 0 || n_in == 0 {
        return Err(Error::InvalidDimension(
            "design dimensions must be positive".into(),
        ));
    }
    let k = n_out.min(n_in);
    match spec {
        SpectrumSpec::Explicit(vals) => {
            if vals.len() != k {
                return Err(Error::SpecMismatch(format!(
                    "explicit spectrum has {} values, expected min(n_out, n_in) = {}",
                    vals.len(),
                    k
                )));
            }
            if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::SpecMismatch(
                    "explicit singular values must be finite and >= 0".into(),
                ));
            }
            Ok(vals.clone())
        }
        SpectrumSpec::ScaledBeta => Ok((0..k).map(|_| scaled_beta_draw(rng)).collect()),
        SpectrumSpec::IidGaussian => {
            let std = (1.0 / n_out.max(n_in) as f64).sqrt();
            let g = gaussian_mat(n_out, n_in, std, rng);
            let svd = g.thin_svd().map_err(|_| {
                Error::NumericalDegeneracy("svd of sampled Gaussian matrix failed".into())
            })?;
            let s = svd.S().column_vector();
            let mut vals: Vec<f64> = (0..k).map(|i| s[i]).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            Ok(vals)
        }
    }
}

/// One draw of `sqrt(6) * Beta(1, 2)` by inverse CDF.
#[inline]
pub fn scaled_beta_draw(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.gen();
    6.0f64.sqrt() * (1.0 - (1.0 - u).sqrt())
}

/// Sample a design matrix for one layer.
///
/// Gaussian spectra give a dense iid matrix directly; everything else goes
/// through Haar frames and the requested singular values.
pub fn build_design(
    spec: &SpectrumSpec,
    n_out: usize,
    n_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<DesignMatrix> {
    if n_out == 0 || n_in == 0 {
        return Err(Error::InvalidDimension(
            "design dimensions must be positive".into(),
        ));
    }
    match spec {
        SpectrumSpec::IidGaussian => {
            let std = (1.0 / n_out.max(n_in) as f64).sqrt();
            let mut mat = RowMat::zeros(n_out, n_in);
            // row-major fill order fixed for reproducibility
            for i in 0..n_out {
                for j in 0..n_in {
                    let z: f64 = StandardNormal.sample(rng);
                    mat.data[i * n_in + j] = std * z;
                }
            }
            Ok(DesignMatrix::Dense { mat })
        }
        _ => {
            let k = n_out.min(n_in);
            let lambda = sample_singular_values(spec, n_out, n_in, rng)?;
            let left = sample_haar_frame(k, n_out, rng)?;
            let right = sample_haar_frame(k, n_in, rng)?;
            Ok(DesignMatrix::Factored {
                n_out,
                n_in,
                left,
                right,
                lambda,
            })
        }
    }
}

/// Build all `L` designs for a network, one independent stream per layer.
pub fn build_designs(
    net: &NetworkSpec,
    streams: &crate::rng::Streams,
    trial: u64,
) -> Result<Vec<DesignMatrix>> {
    (1..=net.layers())
        .map(|l| {
            let mut rng = streams.stream(crate::rng::Purpose::Design, trial, l as u64);
            build_design(net.spectrum(l), net.dim(l + 1), net.dim(l), &mut rng)
        })
        .collect()
}

/// A realized problem: signal, hidden features, pre-activations, output.
#[derive(Debug, Clone)]
pub struct Instance {
    /// `x^1..x^L`, indexed from zero.
    pub x: Vec<Vec<f64>>,
    /// `g^1..g^L`.
    pub g: Vec<Vec<f64>>,
    /// Observation `y = g^L + eps`.
    pub y: Vec<f64>,
    /// Last-layer noise realization.
    pub eps: Vec<f64>,
}

/// Push a fresh signal through the network: `g^l = A_l x^l`,
/// `x^{l+1} = relu(g^l)` for middle layers, `y = g^L + eps` with
/// `eps ~ N(0, sigma^2)`.
pub fn generate_instance(
    net: &NetworkSpec,
    designs: &[DesignMatrix],
    rng: &mut ChaCha8Rng,
) -> Result<Instance> {
    let layers = net.layers();
    if designs.len() != layers {
        return Err(Error::InvalidDimension(format!(
            "expected {} designs, got {}",
            layers,
            designs.len()
        )));
    }
    for l in 1..=layers {
        let d = &designs[l - 1];
        if d.n_out() != net.dim(l + 1) || d.n_in() != net.dim(l) {
            return Err(Error::InvalidDimension(format!(
                "design {} is {}x{}, network wants {}x{}",
                l,
                d.n_out(),
                d.n_in(),
                net.dim(l + 1),
                net.dim(l)
            )));
        }
    }

    let mut x = Vec::with_capacity(layers);
    let mut g = Vec::with_capacity(layers);
    x.push(net.prior().sample(net.dim(1), rng));
    for l in 1..=layers {
        let gl = designs[l - 1].matvec(&x[l - 1]);
        if l < layers {
            x.push(gl.iter().map(|&v| relu(v)).collect());
        }
        g.push(gl);
    }
    let sigma = net.sigma();
    let eps: Vec<f64> = (0..net.dim(layers + 1))
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        })
        .collect();
    let y: Vec<f64> = g[layers - 1].iter().zip(&eps).map(|(a, b)| a + b).collect();
    Ok(Instance { x, g, y, eps })
}
