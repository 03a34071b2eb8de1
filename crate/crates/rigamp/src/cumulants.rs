//! Spectral moments of `A Aᵀ` and rectangular free cumulants.
//!
//! Moments are always of the `A Aᵀ` eigenvalue distribution normalized by
//! `n_out`, which folds the point mass at zero for tall designs (aspect
//! ratio above one) into the law automatically. The conversion to
//! rectangular free cumulants is a truncated-polynomial recursion:
//!
//! ```text
//! kappa_{2k} = m_{2k} - [z^k] sum_{j=1}^{k-1} kappa_{2j} * B(z)^j,
//! B(z) = z * (delta*M(z) + 1) * (M(z) + 1),   M(z) = sum_{k>=1} m_{2k} z^k.
//! ```
//!
//! With this convention the iid Gaussian ensemble comes out with
//! `kappa_2 = min(1, 1/delta)` and vanishing higher cumulants.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::ensemble::{DesignMatrix, SpectrumSpec};
use crate::{Error, Result};

/// How a moment table was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentSource {
    Hutchinson,
    ExactSpectrum,
    Analytic,
}

/// Even moments `m_2, m_4, ..., m_{2K}` of the normalized `A Aᵀ` spectrum.
#[derive(Debug, Clone)]
pub struct MomentTable {
    /// `m[k-1]` holds `m_{2k}`.
    pub m: Vec<f64>,
    /// Aspect ratio `n_out / n_in` of the layer the moments describe.
    pub delta: f64,
    pub source: MomentSource,
    /// Per-order standard errors, when the source is stochastic.
    pub stderr: Option<Vec<f64>>,
}

impl MomentTable {
    pub fn order(&self) -> usize {
        self.m.len()
    }
}

/// Rectangular free cumulants `kappa_2, ..., kappa_{2K}`.
#[derive(Debug, Clone)]
pub struct FreeCumulantTable {
    /// `kappa[k-1]` holds `kappa_{2k}`.
    pub kappa: Vec<f64>,
    pub delta: f64,
}

impl FreeCumulantTable {
    pub fn order(&self) -> usize {
        self.kappa.len()
    }

    /// `kappa_{2k}`, one-based in `k`; zero beyond the stored order.
    pub fn kappa2k(&self, k: usize) -> f64 {
        if k == 0 || k > self.kappa.len() {
            0.0
        } else {
            self.kappa[k - 1]
        }
    }
}

/// Hutchinson estimate of `m_{2k} = tr((A Aᵀ)^k) / n_out` for `k = 1..=K`.
///
/// One Rademacher probe produces all orders in a single pass of repeated
/// `Aᵀ`/`A` applications, so the cost is `O(K * probes * n_out * n_in)`.
pub fn estimate_moments_hutchinson(
    a: &DesignMatrix,
    k_max: usize,
    probes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MomentTable> {
    if k_max == 0 {
        return Err(Error::InvalidParameter("moment order K must be >= 1".into()));
    }
    if probes == 0 {
        return Err(Error::InvalidParameter("probes must be >= 1".into()));
    }
    let n_out = a.n_out();
    // per-order, per-probe quadratic forms; kept so the spread can be
    // computed by deviations from the mean rather than E[x^2] - E[x]^2
    let mut samples = vec![vec![0.0f64; probes]; k_max];
    for p in 0..probes {
        let v: Vec<f64> = (0..n_out)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let mut w = v.clone();
        for k in 0..k_max {
            w = a.matvec(&a.rmatvec(&w));
            samples[k][p] = v.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() / n_out as f64;
        }
    }
    let p = probes as f64;
    let m: Vec<f64> = samples.iter().map(|s| s.iter().sum::<f64>() / p).collect();
    let stderr = if probes > 1 {
        Some(
            samples
                .iter()
                .zip(&m)
                .map(|(s, &mean)| {
                    let var =
                        s.iter().map(|q| (q - mean) * (q - mean)).sum::<f64>() / (p - 1.0);
                    (var / p).sqrt()
                })
                .collect(),
        )
    } else {
        None
    };
    Ok(MomentTable {
        m,
        delta: n_out as f64 / a.n_in() as f64,
        source: MomentSource::Hutchinson,
        stderr,
    })
}

/// Exact moments from a known spectrum: `m_{2k} = sum_i lambda_i^{2k} / n_out`
/// (missing values count as zeros, realizing the point mass for `delta > 1`).
pub fn exact_moments(lambda: &[f64], n_out: usize, k_max: usize) -> Result<MomentTable> {
    if k_max == 0 {
        return Err(Error::InvalidParameter("moment order K must be >= 1".into()));
    }
    if n_out == 0 || lambda.len() > n_out {
        return Err(Error::InvalidDimension(format!(
            "n_out = {} cannot hold {} singular values",
            n_out,
            lambda.len()
        )));
    }
    let m = (1..=k_max)
        .map(|k| lambda.iter().map(|l| l.powi(2 * k as i32)).sum::<f64>() / n_out as f64)
        .collect();
    Ok(MomentTable {
        m,
        // the spectrum alone cannot reveal n_in when the design is wide;
        // callers pass the true aspect ratio to the cumulant conversion
        delta: n_out as f64 / lambda.len() as f64,
        source: MomentSource::ExactSpectrum,
        stderr: None,
    })
}

/// Closed-form moments of the `sqrt(6) Beta(1,2)` spectrum:
/// `m_{2k} = 6^k / ((k+1)(2k+1))`, divided by `delta` when `delta >= 1`.
pub fn analytic_moments_beta(delta: f64, k_max: usize) -> Result<MomentTable> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("delta must be > 0".into()));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("moment order K must be >= 1".into()));
    }
    let mix = if delta >= 1.0 { 1.0 / delta } else { 1.0 };
    let m = (1..=k_max)
        .map(|k| {
            let kf = k as f64;
            mix * 6.0f64.powi(k as i32) / ((kf + 1.0) * (2.0 * kf + 1.0))
        })
        .collect();
    Ok(MomentTable {
        m,
        delta,
        source: MomentSource::Analytic,
        stderr: None,
    })
}

/// Limiting cumulants of the iid Gaussian ensemble under the `A Aᵀ / n_out`
/// convention: `kappa_2 = min(1, 1/delta)`, higher orders zero.
pub fn analytic_cumulants_gaussian(delta: f64, k_max: usize) -> Result<FreeCumulantTable> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("delta must be > 0".into()));
    }
    if k_max == 0 {
        return Err(Error::InvalidParameter("cumulant order K must be >= 1".into()));
    }
    let mut kappa = vec![0.0; k_max];
    kappa[0] = if delta >= 1.0 { 1.0 / delta } else { 1.0 };
    Ok(FreeCumulantTable { kappa, delta })
}

/// Closed-form cumulants for spectra that have them; `None` for explicit
/// spectra, which must be estimated or handled exactly.
pub fn analytic_cumulants(
    spec: &SpectrumSpec,
    delta: f64,
    k_max: usize,
) -> Result<Option<FreeCumulantTable>> {
    match spec {
        SpectrumSpec::IidGaussian => Ok(Some(analytic_cumulants_gaussian(delta, k_max)?)),
        SpectrumSpec::ScaledBeta => {
            let m = analytic_moments_beta(delta, k_max)?;
            Ok(Some(moments_to_cumulants(&m, delta, k_max)?))
        }
        SpectrumSpec::Explicit(_) => Ok(None),
    }
}

/// Product of two truncated polynomials, keeping degrees `0..=deg`.
fn poly_mul_trunc(a: &[f64], b: &[f64], deg: usize) -> Vec<f64> {
    let mut out = vec![0.0; deg + 1];
    for (i, &ai) in a.iter().enumerate().take(deg + 1) {
        if ai == 0.0 {
            continue;
        }
        for (j, &bj) in b.iter().enumerate().take(deg + 1 - i) {
            out[i + j] += ai * bj;
        }
    }
    out
}

/// Convert moments to rectangular free cumulants by the truncated recursion
/// stated in the module docs. All polynomial arithmetic is truncated at
/// degree `k_max`.
pub fn moments_to_cumulants(
    moments: &MomentTable,
    delta: f64,
    k_max: usize,
) -> Result<FreeCumulantTable> {
    if k_max == 0 {
        return Err(Error::InvalidParameter("cumulant order K must be >= 1".into()));
    }
    if moments.order() < k_max {
        return Err(Error::InvalidParameter(format!(
            "need {} moments for {} cumulants, have {}",
            k_max,
            k_max,
            moments.order()
        )));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter("delta must be > 0".into()));
    }
    // M(z) carries no constant term: the recursion reproduces vanishing
    // higher cumulants for the Gaussian ensemble only with m_0 = 0 here.
    let mut m_poly = vec![0.0; k_max + 1];
    for k in 1..=k_max {
        m_poly[k] = moments.m[k - 1];
    }
    let mut dm_plus = m_poly.iter().map(|v| delta * v).collect::<Vec<_>>();
    dm_plus[0] += 1.0;
    let mut m_plus = m_poly.clone();
    m_plus[0] += 1.0;
    let s = poly_mul_trunc(&dm_plus, &m_plus, k_max.saturating_sub(1));
    // B(z) = z * S(z)
    let mut base = vec![0.0; k_max + 1];
    for (i, &si) in s.iter().enumerate() {
        if i + 1 <= k_max {
            base[i + 1] = si;
        }
    }

    // powers B^j for j = 1..=k_max-1, truncated
    let mut powers: Vec<Vec<f64>> = Vec::with_capacity(k_max);
    powers.push(base.clone());
    for _ in 1..k_max.saturating_sub(1) {
        let next = poly_mul_trunc(powers.last().unwrap(), &base, k_max);
        powers.push(next);
    }

    let mut kappa = vec![0.0; k_max];
    for k in 1..=k_max {
        let mut correction = 0.0;
        for j in 1..k {
            correction += kappa[j - 1] * powers[j - 1][k];
        }
        kappa[k - 1] = moments.m[k - 1] - correction;
    }
    Ok(FreeCumulantTable { kappa, delta })
}
