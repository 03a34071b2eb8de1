//! Bayes-optimal scalar denoisers and their closed-form derivatives.
//!
//! The algorithm sees each unknown through Gaussian channels whose gains and
//! noise levels come from state evolution:
//!
//! - the x-channel `X_i = mu_i X + W_i`, `W ~ N(0, Omega)`, collapses to a
//!   single pseudo-observation `x_tilde ~ N(X, rho_tilde)`;
//! - the r-channel `(G, R_1..R_t)` jointly Gaussian collapses to
//!   `G | R ~ N(r_tilde, sigma_tilde)`.
//!
//! For middle layers the pair `(G, X = relu(G))` is then scored under the
//! two-branch joint posterior `p(z0, z1)`: a Gaussian truncated to `z0 > 0`
//! on the positive branch and `(z0 <= 0, z1 = 0)` on the negative one. All
//! weights and truncated moments are evaluated in log space with scaled
//! complementary error functions, so nothing overflows or cancels for deep
//! truncations.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::Prior;
use crate::smallmat::sym_truncated_solve;
use crate::{Error, Result};

/// Floor applied to the conditional variances `rho_tilde`, `sigma_tilde`.
pub const VAR_FLOOR: f64 = 1e-12;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Scaled complementary error function `exp(x^2) erfc(x)` for `x >= 0`.
fn erfcx_nonneg(x: f64) -> f64 {
    debug_assert!(x >= 0.0);
    if x <= 20.0 {
        (x * x).exp() * libm::erfc(x)
    } else {
        // asymptotic series 1/(x sqrt(pi)) * sum (-1)^k (2k-1)!! / (2x^2)^k
        let inv2x2 = 1.0 / (2.0 * x * x);
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..=8u32 {
            term *= -((2 * k - 1) as f64) * inv2x2;
            sum += term;
        }
        sum / (x * std::f64::consts::PI.sqrt())
    }
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `log(Phi(x))`, stable for very negative arguments.
pub fn log_normal_cdf(x: f64) -> f64 {
    if x >= -1.0 {
        normal_cdf(x).ln()
    } else {
        // Phi(x) = erfcx(-x/sqrt2) * exp(-x^2/2) / 2
        (0.5 * erfcx_nonneg(-x / SQRT_2)).ln() - 0.5 * x * x
    }
}

/// Hazard (inverse Mills ratio) `phi(a) / Phi(-a)` of the standard normal.
fn hazard(a: f64) -> f64 {
    if a >= 0.0 {
        // phi(a)/Phi(-a) = sqrt(2/pi) / erfcx(a/sqrt2)
        (2.0 / std::f64::consts::PI).sqrt() / erfcx_nonneg(a / SQRT_2)
    } else {
        normal_pdf(a) / normal_cdf(-a)
    }
}

/// Mean and variance of `Z ~ N(mu, var)` conditioned on `Z > 0`.
fn truncated_lower_moments(mu: f64, var: f64) -> (f64, f64) {
    let sd = var.sqrt();
    let a = -mu / sd;
    let lam = hazard(a);
    let mean = mu + sd * lam;
    let factor = (1.0 - lam * (lam - a)).max(0.0);
    (mean, var * factor)
}

/// Mean and variance of `Z ~ N(mu, var)` conditioned on `Z <= 0`.
fn truncated_upper_moments(mu: f64, var: f64) -> (f64, f64) {
    let (m, v) = truncated_lower_moments(-mu, var);
    (-m, v)
}

/// Posterior moments of `(z0, z1)` under the ReLU joint posterior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointPosteriorMoments {
    pub mean_z0: f64,
    pub var_z0: f64,
    pub mean_z1: f64,
    pub var_z1: f64,
}

/// Joint posterior of a pre-activation `z0` and its ReLU output `z1` under
/// independent Gaussian observations `r0 ~ N(z0, sigma0_sq)` and
/// `r1 ~ N(z1, sigma1_sq)`.
///
/// The posterior splits into a positive branch (`z1 = z0 > 0`, Gaussian
/// `N(r_p, sigma_p^2)` truncated to the positive axis) and a negative branch
/// (`z0 <= 0` truncated Gaussian, `z1 = 0`). Weights are combined in log
/// space; the result is finite for any finite inputs.
pub fn relu_joint_posterior(
    r0: f64,
    sigma0_sq: f64,
    r1: f64,
    sigma1_sq: f64,
) -> Result<JointPosteriorMoments> {
    if !(sigma0_sq > 0.0) || !(sigma1_sq > 0.0) {
        return Err(Error::InvalidParameter(
            "relu joint posterior needs positive variances".into(),
        ));
    }
    let s_sum = sigma0_sq + sigma1_sq;
    let r_p = (r0 * sigma1_sq + r1 * sigma0_sq) / s_sum;
    let sigma_p_sq = sigma0_sq * sigma1_sq / s_sum;
    let sigma_p = sigma_p_sq.sqrt();
    let sigma0 = sigma0_sq.sqrt();

    // log C_P + log(sigma_p * Phi(r_p / sigma_p)); the common sqrt(2 pi)
    // cancels between branches
    let log_c_p = -0.5 * r0 * r0 / sigma0_sq - 0.5 * r1 * r1 / sigma1_sq
        + 0.5 * r_p * r_p / sigma_p_sq;
    let log_w_p = log_c_p + sigma_p.ln() + log_normal_cdf(r_p / sigma_p);
    let log_w_n =
        -0.5 * r1 * r1 / sigma1_sq + sigma0.ln() + log_normal_cdf(-r0 / sigma0);

    // pi = 1 / (1 + exp(log_w_n - log_w_p)), clamped-free by construction
    let d = log_w_n - log_w_p;
    let pi_p = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };

    let (m_p, v_p) = truncated_lower_moments(r_p, sigma_p_sq);
    let (m_n, v_n) = truncated_upper_moments(r0, sigma0_sq);

    let mean_z0 = pi_p * m_p + (1.0 - pi_p) * m_n;
    let var_z0 =
        pi_p * v_p + (1.0 - pi_p) * v_n + pi_p * (1.0 - pi_p) * (m_p - m_n) * (m_p - m_n);
    let mean_z1 = pi_p * m_p;
    let var_z1 = pi_p * (v_p + (1.0 - pi_p) * m_p * m_p);
    Ok(JointPosteriorMoments {
        mean_z0,
        var_z0,
        mean_z1,
        var_z1,
    })
}

/// Collapsed x-channel: `x_tilde = a_x . x` estimates `X` with variance
/// `rho_tilde`.
#[derive(Debug, Clone)]
pub struct XChannel {
    pub a_x: Vec<f64>,
    pub rho: f64,
}

impl XChannel {
    /// Build from the mean vector and covariance of `X_i = mu_i X + W_i`.
    pub fn new(mu_bar: &[f64], omega: &DMatrix<f64>) -> Result<Self> {
        let t = mu_bar.len();
        if t == 0 || omega.nrows() != t || omega.ncols() != t {
            return Err(Error::InvalidDimension(format!(
                "x-channel wants square Omega of side {} to match mu", t
            )));
        }
        let mu = DVector::from_column_slice(mu_bar);
        let sol = sym_truncated_solve(omega, &mu)?;
        let denom = mu.dot(&sol);
        if !(denom > 0.0) || !denom.is_finite() {
            return Err(Error::NumericalDegeneracy(format!(
                "x-channel precision mu' Omega^-1 mu = {denom} is not positive"
            )));
        }
        let a_x = sol.iter().map(|v| v / denom).collect();
        Ok(XChannel {
            a_x,
            rho: (1.0 / denom).max(VAR_FLOOR),
        })
    }

    #[inline]
    pub fn x_tilde(&self, x: &[f64]) -> f64 {
        dot(&self.a_x, x)
    }
}

/// Collapsed r-channel: `G | (R_1..R_t) ~ N(a_r . r, sigma)`. With no
/// observations (`t = 0`) this is the marginal `N(0, var(G))`.
#[derive(Debug, Clone)]
pub struct RChannel {
    pub a_r: Vec<f64>,
    pub sigma: f64,
    pub g_var: f64,
}

impl RChannel {
    /// Build from the `(t+1) x (t+1)` covariance of `(G, R_1..R_t)`.
    pub fn new(sigma_bar: &DMatrix<f64>) -> Result<Self> {
        let n = sigma_bar.nrows();
        if n == 0 || sigma_bar.ncols() != n {
            return Err(Error::InvalidDimension(
                "r-channel wants a square covariance".into(),
            ));
        }
        let g_var = sigma_bar[(0, 0)];
        let t = n - 1;
        if t == 0 {
            return Ok(RChannel {
                a_r: Vec::new(),
                sigma: g_var.max(VAR_FLOOR),
                g_var,
            });
        }
        let srr = sigma_bar.view((1, 1), (t, t)).into_owned();
        let c = DVector::from_iterator(t, (1..n).map(|i| sigma_bar[(i, 0)]));
        let a = sym_truncated_solve(&srr, &c)?;
        let sigma = (g_var - c.dot(&a)).max(VAR_FLOOR);
        Ok(RChannel {
            a_r: a.iter().copied().collect(),
            sigma,
            g_var,
        })
    }

    #[inline]
    pub fn r_tilde(&self, r: &[f64]) -> f64 {
        dot(&self.a_r, r)
    }
}

/// Output channel of the last layer: `G` conditioned on `(R_1..R_t, Y)`,
/// with `Y = G + noise`, minus the `R`-only conditional mean.
#[derive(Debug, Clone)]
pub struct YChannel {
    /// Weights on `(r_1..r_t, y)` for `E[G | R, Y]`.
    pub w: Vec<f64>,
    /// Weights on `r` for `E[G | R]`.
    pub a_r: Vec<f64>,
    /// Conditional variance of `G` given `R` only (the Stein denominator).
    pub sigma: f64,
}

impl YChannel {
    /// Build from the covariance of `(G, R_1..R_t)` and `E[Y^2]`. The
    /// bordered covariance gets `cov(Y, R_i) = cov(G, R_i)` and
    /// `cov(Y, G) = var(G)` because the output noise is independent.
    pub fn new(sigma_bar: &DMatrix<f64>, e_y2: f64) -> Result<Self> {
        let n = sigma_bar.nrows();
        if n == 0 || sigma_bar.ncols() != n {
            return Err(Error::InvalidDimension(
                "y-channel wants a square covariance".into(),
            ));
        }
        let t = n - 1;
        let g_var = sigma_bar[(0, 0)];
        let rch = RChannel::new(sigma_bar)?;

        // covariance of the observation vector (R_1..R_t, Y)
        let mut obs = DMatrix::<f64>::zeros(t + 1, t + 1);
        for i in 0..t {
            for j in 0..t {
                obs[(i, j)] = sigma_bar[(i + 1, j + 1)];
            }
        }
        for i in 0..t {
            obs[(i, t)] = sigma_bar[(i + 1, 0)];
            obs[(t, i)] = sigma_bar[(0, i + 1)];
        }
        obs[(t, t)] = e_y2;
        let mut b = DVector::<f64>::zeros(t + 1);
        for i in 0..t {
            b[i] = sigma_bar[(0, i + 1)];
        }
        b[t] = g_var;
        let w = sym_truncated_solve(&obs, &b)?;
        Ok(YChannel {
            w: w.iter().copied().collect(),
            a_r: rch.a_r,
            sigma: rch.sigma,
        })
    }
}

/// Conditional-Gaussian reduction of both channels at once, exposed for
/// direct inspection.
#[derive(Debug, Clone)]
pub struct ChannelParams {
    pub x_tilde: f64,
    pub rho_tilde: f64,
    pub r_tilde: f64,
    pub sigma_tilde: f64,
    pub a_x: Vec<f64>,
    pub a_r: Vec<f64>,
}

/// Reduce `(mu, Omega)` and the `(t+1)`-dimensional `Sigma` to the scalar
/// channel parameters at the point `(x, r)`.
pub fn conditional_params(
    mu_bar: &[f64],
    omega: &DMatrix<f64>,
    sigma_bar: &DMatrix<f64>,
    x: &[f64],
    r: &[f64],
) -> Result<ChannelParams> {
    let xch = XChannel::new(mu_bar, omega)?;
    let rch = RChannel::new(sigma_bar)?;
    if x.len() != xch.a_x.len() || r.len() != rch.a_r.len() {
        return Err(Error::InvalidDimension(
            "conditional_params: x or r length mismatch".into(),
        ));
    }
    Ok(ChannelParams {
        x_tilde: xch.x_tilde(x),
        rho_tilde: xch.rho,
        r_tilde: rch.r_tilde(r),
        sigma_tilde: rch.sigma,
        a_x: xch.a_x,
        a_r: rch.a_r,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Posterior mean of the signal under its prior, given the x-channel only.
/// Returns the value and the posterior variance; the partial with respect to
/// `x_k` is `post_var / rho * a_x[k]`.
pub fn prior_posterior(prior: Prior, xch: &XChannel, x: &[f64]) -> (f64, f64) {
    let xt = xch.x_tilde(x);
    match prior {
        Prior::GaussianUnit => {
            let value = xt / (1.0 + xch.rho);
            let post_var = xch.rho / (1.0 + xch.rho);
            (value, post_var)
        }
        Prior::Rademacher => {
            // E[X | x_tilde] = tanh(x_tilde / rho) for X uniform on {-1, +1};
            // the derivative of tanh gives post var 1 - tanh^2
            let value = (xt / xch.rho).tanh();
            (value, 1.0 - value * value)
        }
    }
}

/// First-layer denoiser `f_t^1`: posterior mean under the prior, with its
/// partial derivatives in `x_1..x_t`.
pub fn prior_f1(prior: Prior, xch: &XChannel, x: &[f64]) -> (f64, Vec<f64>) {
    let (value, post_var) = prior_posterior(prior, xch, x);
    let scale = post_var / xch.rho;
    (value, xch.a_x.iter().map(|a| scale * a).collect())
}

/// Middle-layer denoiser value and posterior variance: `E[z1 | channels]`
/// where `z1 = relu(z0)`, `z0` seen through the previous layer's r-channel
/// and `z1` through this layer's x-channel.
pub fn middle_f_moments(
    xch: &XChannel,
    rch_prev: &RChannel,
    x: &[f64],
    r_prev: &[f64],
) -> Result<(f64, f64)> {
    let joint = relu_joint_posterior(
        rch_prev.r_tilde(r_prev),
        rch_prev.sigma,
        xch.x_tilde(x),
        xch.rho,
    )?;
    Ok((joint.mean_z1, joint.var_z1))
}

/// Middle-layer denoiser `f_t^l` with partials in `x_1..x_t`.
pub fn middle_f(
    xch: &XChannel,
    rch_prev: &RChannel,
    x: &[f64],
    r_prev: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (value, var_z1) = middle_f_moments(xch, rch_prev, x, r_prev)?;
    let scale = var_z1 / xch.rho;
    Ok((value, xch.a_x.iter().map(|a| scale * a).collect()))
}

/// Hidden-layer correction denoiser value and posterior variance:
/// `E[z0 | channels] - r_tilde` with `z0 = G` of this layer, `z1 = relu(z0)`
/// the next layer's feature.
pub fn hidden_h_moments(
    rch: &RChannel,
    xch_next: &XChannel,
    r: &[f64],
    x_next: &[f64],
) -> Result<(f64, f64)> {
    let rt = rch.r_tilde(r);
    let joint = relu_joint_posterior(rt, rch.sigma, xch_next.x_tilde(x_next), xch_next.rho)?;
    Ok((joint.mean_z0 - rt, joint.var_z0))
}

/// Hidden-layer denoiser `h_{t+1}^l` with partials in `r_1..r_t`.
pub fn hidden_h(
    rch: &RChannel,
    xch_next: &XChannel,
    r: &[f64],
    x_next: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let (value, var_z0) = hidden_h_moments(rch, xch_next, r, x_next)?;
    let scale = var_z0 / rch.sigma - 1.0;
    Ok((value, rch.a_r.iter().map(|a| scale * a).collect()))
}

/// Last-layer denoiser `h_{t+1}^L(r, y) = E[G | R, Y] - E[G | R]`.
/// Returns the value, partials in `r_1..r_t`, and the partial in `y`.
pub fn last_h(ych: &YChannel, r: &[f64], y: f64) -> (f64, Vec<f64>, f64) {
    let t = ych.a_r.len();
    let mut value = ych.w[t] * y;
    for k in 0..t {
        value += (ych.w[k] - ych.a_r[k]) * r[k];
    }
    let partials = (0..t).map(|k| ych.w[k] - ych.a_r[k]).collect();
    (value, partials, ych.w[t])
}

/// Stein estimate of the average g-derivative of a Bayes-optimal correction
/// denoiser: `mean(h^2) / sigma_tilde_sq`.
pub fn stein_dg(h_values: &[f64], sigma_tilde_sq: f64) -> f64 {
    if h_values.is_empty() {
        return 0.0;
    }
    let ms: f64 = h_values.iter().map(|h| h * h).sum::<f64>() / h_values.len() as f64;
    ms / sigma_tilde_sq
}

/// Column-view of `t` stacked vectors, one entry per component. Gathers one
/// component's row into a scratch buffer.
#[inline]
pub fn gather(cols: &[&[f64]], i: usize, buf: &mut Vec<f64>) {
    buf.clear();
    buf.extend(cols.iter().map(|c| c[i]));
}

/// The componentwise denoisers an engine plugs in. Implementations receive
/// the channel reductions already built from state evolution and must fill
/// `out` with the denoised vector, returning the averaged derivative rows
/// that go into the Psi / Phi bookkeeping.
pub trait DenoiserSet: Sync {
    /// First-layer `f_t^1` applied to the component rows of `x_cols`.
    /// Returns the averaged Psi row (length t).
    fn f1(&self, xch: &XChannel, x_cols: &[&[f64]], out: &mut [f64]) -> Result<Vec<f64>>;

    /// Middle-layer `f_t^l`. `r_cols` holds `r_1..r_{t-1}` of the previous
    /// layer. Returns the averaged Psi row (length t).
    fn f_middle(
        &self,
        xch: &XChannel,
        rch_prev: &RChannel,
        x_cols: &[&[f64]],
        r_cols: &[&[f64]],
        out: &mut [f64],
    ) -> Result<Vec<f64>>;

    /// Hidden-layer `h_{t+1}^l` for `l < L`. Returns the averaged r-partial
    /// row (length t) and the averaged g-derivative.
    fn h_middle(
        &self,
        rch: &RChannel,
        xch_next: &XChannel,
        r_cols: &[&[f64]],
        x_cols: &[&[f64]],
        out: &mut [f64],
    ) -> Result<(Vec<f64>, f64)>;

    /// Last-layer `h_{t+1}^L`. Returns the averaged r-partial row and the
    /// averaged g-derivative.
    fn h_last(
        &self,
        ych: &YChannel,
        r_cols: &[&[f64]],
        y: &[f64],
        out: &mut [f64],
    ) -> Result<(Vec<f64>, f64)>;
}

/// The posterior-mean denoisers of the shipped model: prior posterior at the
/// first layer, ReLU joint posterior in the middle, linear-Gaussian output
/// channel at the end, with the Stein identity supplying the g-derivatives.
#[derive(Debug, Clone)]
pub struct BayesDenoisers {
    pub prior: Prior,
}

impl BayesDenoisers {
    pub fn new(prior: Prior) -> Self {
        BayesDenoisers { prior }
    }
}

impl DenoiserSet for BayesDenoisers {
    fn f1(&self, xch: &XChannel, x_cols: &[&[f64]], out: &mut [f64]) -> Result<Vec<f64>> {
        let n = out.len();
        let mut buf = Vec::with_capacity(x_cols.len());
        let mut pvar_sum = 0.0;
        for i in 0..n {
            gather(x_cols, i, &mut buf);
            let (v, pv) = prior_posterior(self.prior, xch, &buf);
            out[i] = v;
            pvar_sum += pv;
        }
        let scale = pvar_sum / n as f64 / xch.rho;
        Ok(xch.a_x.iter().map(|a| scale * a).collect())
    }

    fn f_middle(
        &self,
        xch: &XChannel,
        rch_prev: &RChannel,
        x_cols: &[&[f64]],
        r_cols: &[&[f64]],
        out: &mut [f64],
    ) -> Result<Vec<f64>> {
        let n = out.len();
        let mut xbuf = Vec::with_capacity(x_cols.len());
        let mut rbuf = Vec::with_capacity(r_cols.len());
        let mut pvar_sum = 0.0;
        for i in 0..n {
            gather(x_cols, i, &mut xbuf);
            gather(r_cols, i, &mut rbuf);
            let (v, pv) = middle_f_moments(xch, rch_prev, &xbuf, &rbuf)?;
            out[i] = v;
            pvar_sum += pv;
        }
        let scale = pvar_sum / n as f64 / xch.rho;
        Ok(xch.a_x.iter().map(|a| scale * a).collect())
    }

    fn h_middle(
        &self,
        rch: &RChannel,
        xch_next: &XChannel,
        r_cols: &[&[f64]],
        x_cols: &[&[f64]],
        out: &mut [f64],
    ) -> Result<(Vec<f64>, f64)> {
        let n = out.len();
        let mut rbuf = Vec::with_capacity(r_cols.len());
        let mut xbuf = Vec::with_capacity(x_cols.len());
        let mut var_sum = 0.0;
        for i in 0..n {
            gather(r_cols, i, &mut rbuf);
            gather(x_cols, i, &mut xbuf);
            let (v, vz0) = hidden_h_moments(rch, xch_next, &rbuf, &xbuf)?;
            out[i] = v;
            var_sum += vz0;
        }
        let scale = var_sum / n as f64 / rch.sigma - 1.0;
        let row = rch.a_r.iter().map(|a| scale * a).collect();
        Ok((row, stein_dg(out, rch.sigma)))
    }

    fn h_last(
        &self,
        ych: &YChannel,
        r_cols: &[&[f64]],
        y: &[f64],
        out: &mut [f64],
    ) -> Result<(Vec<f64>, f64)> {
        let n = out.len();
        let t = ych.a_r.len();
        let mut rbuf = Vec::with_capacity(t);
        for i in 0..n {
            gather(r_cols, i, &mut rbuf);
            let (v, _, _) = last_h(ych, &rbuf, y[i]);
            out[i] = v;
        }
        let row = (0..t).map(|k| ych.w[k] - ych.a_r[k]).collect();
        Ok((row, stein_dg(out, ych.sigma)))
    }
}
