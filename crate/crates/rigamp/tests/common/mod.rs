//! Independent oracles for the acceptance suite. Everything here is coded
//! straight-line, separately from the library's evaluation paths: naive
//! polynomial convolutions, fresh matrix products for every power-series
//! term, direct quadrature of defining densities, and a literal transcription
//! of the message-passing iteration over dense matrices.

use nalgebra::{DMatrix, DVector};

use rigamp::cumulants::FreeCumulantTable;
use rigamp::denoise::relu_joint_posterior;
use rigamp::ensemble::{Instance, NetworkSpec, RowMat};
use rigamp::se::SeTrajectory;

// ---------------------------------------------------------------------------
// moment -> cumulant recursion, naive untruncated polynomials

pub fn cumulants_oracle(m: &[f64], delta: f64) -> Vec<f64> {
    let kmax = m.len();
    let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; a.len() + b.len() - 1];
        for (i, ai) in a.iter().enumerate() {
            for (j, bj) in b.iter().enumerate() {
                out[i + j] += ai * bj;
            }
        }
        out
    };
    let coeff = |p: &[f64], k: usize| if k < p.len() { p[k] } else { 0.0 };

    let mut mz = vec![0.0; kmax + 1];
    for k in 1..=kmax {
        mz[k] = m[k - 1];
    }
    let mut dm1 = mz.iter().map(|v| delta * v).collect::<Vec<_>>();
    dm1[0] += 1.0;
    let mut m1 = mz.clone();
    m1[0] += 1.0;
    let mut b = vec![0.0];
    b.extend(mul(&dm1, &m1));

    let mut kappa = vec![0.0; kmax];
    for k in 1..=kmax {
        let mut sum = 0.0;
        for j in 1..k {
            let mut power = vec![1.0];
            for _ in 0..j {
                power = mul(&power, &b);
            }
            sum += kappa[j - 1] * coeff(&power, k);
        }
        kappa[k - 1] = m[k - 1] - sum;
    }
    kappa
}

// ---------------------------------------------------------------------------
// quadrature oracle for the ReLU joint posterior

fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        m: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            recurse(f, a, lm, m, fa, flm, fm, left, 0.5 * eps, depth - 1)
                + recurse(f, m, rm, b, fm, frm, fb, right, 0.5 * eps, depth - 1)
        }
    }
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    recurse(f, a, m, b, fa, fm, fb, whole, eps, 48)
}

fn panelled<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, eps: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| simpson(f, a + i as f64 * h, a + (i + 1) as f64 * h, eps / panels as f64))
        .sum()
}

pub struct JointOracle {
    pub mean_z0: f64,
    pub var_z0: f64,
    pub mean_z1: f64,
    pub var_z1: f64,
}

/// Posterior moments of `(z0, z1 = relu(z0))` under Gaussian observations
/// `(r0, s0)` of `z0` and `(r1, s1)` of `z1`, by direct integration of the
/// two branches of the joint density.
pub fn joint_quadrature_oracle(r0: f64, s0: f64, r1: f64, s1: f64) -> JointOracle {
    let q_pos = |z: f64| -(z - r0) * (z - r0) / (2.0 * s0) - (z - r1) * (z - r1) / (2.0 * s1);
    let q_neg = |z: f64| -(z - r0) * (z - r0) / (2.0 * s0) - r1 * r1 / (2.0 * s1);
    let sp = (s0 * s1 / (s0 + s1)).sqrt();
    let rp = (r0 * s1 + r1 * s0) / (s0 + s1);

    let peak_p = rp.max(0.0);
    let scale_p = q_pos(peak_p);
    let lo_p = (rp - 14.0 * sp).max(0.0);
    let hi_p = peak_p + 14.0 * sp;
    let int_pos = |k: i32| {
        panelled(&|z: f64| z.powi(k) * (q_pos(z) - scale_p).exp(), lo_p, peak_p, 1e-13)
            + panelled(&|z: f64| z.powi(k) * (q_pos(z) - scale_p).exp(), peak_p, hi_p, 1e-13)
    };
    let ip0 = int_pos(0);
    let ip1 = int_pos(1);
    let ip2 = int_pos(2);

    let s0r = s0.sqrt();
    let peak_n = r0.min(0.0);
    let scale_n = q_neg(peak_n);
    let lo_n = peak_n - 14.0 * s0r;
    let int_neg = |k: i32| {
        panelled(&|z: f64| z.powi(k) * (q_neg(z) - scale_n).exp(), lo_n, peak_n, 1e-13)
            + panelled(&|z: f64| z.powi(k) * (q_neg(z) - scale_n).exp(), peak_n, 0.0, 1e-13)
    };
    let in0 = int_neg(0);
    let in1 = int_neg(1);
    let in2 = int_neg(2);

    let lw_p = scale_p + ip0.max(f64::MIN_POSITIVE).ln();
    let lw_n = scale_n + in0.max(f64::MIN_POSITIVE).ln();
    let d = lw_n - lw_p;
    let pi = if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    };

    let (mp, ep2) = (ip1 / ip0, ip2 / ip0);
    let (mn, en2) = (in1 / in0, in2 / in0);
    let mean_z0 = pi * mp + (1.0 - pi) * mn;
    let mean_z1 = pi * mp;
    JointOracle {
        mean_z0,
        var_z0: pi * ep2 + (1.0 - pi) * en2 - mean_z0 * mean_z0,
        mean_z1,
        var_z1: pi * ep2 - mean_z1 * mean_z1,
    }
}

// ---------------------------------------------------------------------------
// naive matrix helpers shared by the power-series oracles

pub fn nmul(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, m, k) = (a.nrows(), b.ncols(), a.ncols());
    let mut out = DMatrix::<f64>::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[(i, p)] * b[(p, j)];
            }
            out[(i, j)] = acc;
        }
    }
    out
}

pub fn npow(m: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    let mut out = DMatrix::<f64>::identity(m.nrows(), m.nrows());
    for _ in 0..p {
        out = nmul(&out, m);
    }
    out
}

/// Literal expansion of the covariance series for `(G, R_1..R_t)`.
pub fn sigma_series_oracle(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    delta_blk: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
) -> DMatrix<f64> {
    let size = psi.nrows();
    let mut out = DMatrix::<f64>::zeros(size, size);
    for j in 0..=(2 * size - 1) {
        let c = kappa.kappa2k(j + 1);
        let term = if j == 0 {
            gamma.clone()
        } else {
            let pf = nmul(psi, phi);
            let mut xi = DMatrix::<f64>::zeros(size, size);
            for i in 0..=j {
                xi += nmul(&nmul(&npow(&pf, i), gamma), &npow(&pf, j - i).transpose());
            }
            let mid = nmul(&nmul(psi, delta_blk), &psi.transpose());
            for i in 0..j {
                xi += nmul(&nmul(&npow(&pf, i), &mid), &npow(&pf, j - 1 - i).transpose());
            }
            xi
        };
        out += term * c;
    }
    out
}

/// Literal expansion of the x-side covariance and mean series.
pub fn omega_mu_series_oracle(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    delta_blk: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
    delta_ratio: f64,
) -> (DMatrix<f64>, f64) {
    let size = psi.nrows();
    let mut op = DMatrix::<f64>::zeros(size, size);
    for j in 0..=(2 * size - 2) {
        let c = kappa.kappa2k(j + 1);
        let term = if j == 0 {
            delta_blk.clone()
        } else {
            let fp = nmul(phi, psi);
            let mut th = DMatrix::<f64>::zeros(size, size);
            for i in 0..=j {
                th += nmul(&nmul(&npow(&fp, i), delta_blk), &npow(&fp, j - i).transpose());
            }
            let mid = nmul(&nmul(phi, gamma), &phi.transpose());
            for i in 0..j {
                th += nmul(&nmul(&npow(&fp, i), &mid), &npow(&fp, j - 1 - i).transpose());
            }
            th
        };
        op += term * c;
    }
    op *= delta_ratio;
    let omega = op.view((1, 1), (size - 1, size - 1)).into_owned();
    let pf = nmul(psi, phi);
    let mut mb = DMatrix::<f64>::zeros(size, size);
    for j in 0..=size {
        mb += nmul(phi, &npow(&pf, j)) * kappa.kappa2k(j + 1);
    }
    mb *= delta_ratio;
    (omega, mb[(size - 1, 0)])
}

/// Literal expansion of the memory-coefficient series.
pub fn onsager_series_oracle(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
    delta_ratio: f64,
) -> (Vec<f64>, Vec<f64>) {
    let size = psi.nrows();
    let mut ma = DMatrix::<f64>::zeros(size, size);
    let mut mb = DMatrix::<f64>::zeros(size, size);
    for j in 0..=size {
        let c = kappa.kappa2k(j + 1);
        let mut ta = psi.clone();
        let mut tb = phi.clone();
        for _ in 0..j {
            ta = nmul(&ta, &nmul(phi, psi));
            tb = nmul(&tb, &nmul(psi, phi));
        }
        ma += ta * c;
        mb += tb * (c * delta_ratio);
    }
    let t = size - 1;
    (
        (1..=t).map(|k| ma[(t, k)]).collect(),
        (1..t).map(|k| mb[(t, k)]).collect(),
    )
}

// ---------------------------------------------------------------------------
// literal transcription of the message-passing iteration, dense matrices

// same spectral-cutoff convention as the library's channel reduction,
// written out directly
const CUTOFF_REL: f64 = 1e-2;

fn truncated_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let eig = m.clone().symmetric_eigen();
    let lam_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let lam = eig.eigenvalues[j];
        if lam >= CUTOFF_REL * lam_max {
            let v = eig.eigenvectors.column(j).into_owned();
            out += &v * v.transpose() / lam;
        }
    }
    out
}

struct XChan {
    a: Vec<f64>,
    rho: f64,
}

fn x_chan(mu: &[f64], omega: &DMatrix<f64>) -> XChan {
    let inv = truncated_inverse(omega);
    let muv = DVector::from_column_slice(mu);
    let sol = &inv * &muv;
    let denom = muv.dot(&sol);
    XChan {
        a: sol.iter().map(|v| v / denom).collect(),
        rho: (1.0 / denom).max(1e-12),
    }
}

struct RChan {
    a: Vec<f64>,
    sigma: f64,
}

fn r_chan(sigma_bar: &DMatrix<f64>) -> RChan {
    let n = sigma_bar.nrows();
    let t = n - 1;
    if t == 0 {
        return RChan {
            a: Vec::new(),
            sigma: sigma_bar[(0, 0)].max(1e-12),
        };
    }
    let srr = sigma_bar.view((1, 1), (t, t)).into_owned();
    let c = DVector::from_iterator(t, (1..n).map(|i| sigma_bar[(i, 0)]));
    let sol = truncated_inverse(&srr) * &c;
    RChan {
        sigma: (sigma_bar[(0, 0)] - c.dot(&sol)).max(1e-12),
        a: sol.iter().copied().collect(),
    }
}

struct YChan {
    w: Vec<f64>,
    a: Vec<f64>,
    sigma: f64,
}

fn y_chan(sigma_bar: &DMatrix<f64>, e_y2: f64) -> YChan {
    let n = sigma_bar.nrows();
    let t = n - 1;
    let rc = r_chan(sigma_bar);
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
    b[t] = sigma_bar[(0, 0)];
    let w = truncated_inverse(&obs) * b;
    YChan {
        w: w.iter().copied().collect(),
        a: rc.a,
        sigma: rc.sigma,
    }
}

fn naive_matvec(a: &RowMat, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.rows];
    for (i, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for j in 0..a.cols {
            acc += a.at(i, j) * v[j];
        }
        *o = acc;
    }
    out
}

fn naive_rmatvec(a: &RowMat, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for i in 0..a.rows {
            acc += a.at(i, j) * v[i];
        }
        *o = acc;
    }
    out
}

fn dotv(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Literal transcription of the iteration (Gaussian prior only), returning
/// the per-layer, per-iteration estimates `xhat[layer][t-1]`.
pub fn transcribe_engine(
    net: &NetworkSpec,
    dense: &[RowMat],
    instance: &Instance,
    se: &SeTrajectory,
    kappa: &[FreeCumulantTable],
    t_max: usize,
) -> Vec<Vec<Vec<f64>>> {
    let layers = net.layers();

    // iterate stores, indexed [layer][iteration]
    let mut xs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    let mut xhats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    let mut rs: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    let mut ss: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    // derivative rows: psi[layer][i] has partials of xhat_{i+1};
    // phi[layer][i] has [dg, dr...] of s_{i+1}
    let mut psi: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
    let mut phi: Vec<Vec<Vec<f64>>> = (0..layers).map(|l| vec![vec![se.dg_s1[l]]]).collect();

    // initialization sweep
    ss[layers - 1].push(instance.y.clone());
    for l in (1..layers).rev() {
        let pre = naive_rmatvec(&dense[l], &ss[l][0]);
        ss[l - 1].push(pre);
    }

    let assemble = |rows: &[Vec<f64>], size: usize, col_off: usize| -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        for (i, row) in rows.iter().enumerate().take(size - 1) {
            for (k, v) in row.iter().enumerate() {
                m[(i + 1, k + col_off)] = *v;
            }
        }
        m
    };

    for t in 1..=t_max {
        for l in 1..=layers {
            let d_ratio = net.delta(l);
            // x_t = A^T s_t - sum beta_i xhat_i
            let size = t + 1;
            let psi_m = assemble(&psi[l - 1], size, 1);
            let phi_m = assemble(&phi[l - 1], size, 0);
            let (_, beta) = onsager_series_oracle(&psi_m, &phi_m, &kappa[l - 1], d_ratio);
            let mut x_t = naive_rmatvec(&dense[l - 1], &ss[l - 1][t - 1]);
            for (i, b) in beta.iter().enumerate() {
                for (xv, h) in x_t.iter_mut().zip(&xhats[l - 1][i]) {
                    *xv -= b * h;
                }
            }
            xs[l - 1].push(x_t);

            // xhat_t componentwise
            let n = net.dim(l);
            let xch = x_chan(&se.mu[l - 1][..t], &se.omega[l - 1][t - 1]);
            let mut xhat = vec![0.0; n];
            let mut pvar_sum = 0.0;
            if l == 1 {
                for i in 0..n {
                    let row: Vec<f64> = (0..t).map(|k| xs[0][k][i]).collect();
                    let xt = dotv(&xch.a, &row);
                    xhat[i] = xt / (1.0 + xch.rho);
                }
                let scale = 1.0 / (1.0 + xch.rho);
                psi[0].push(xch.a.iter().map(|a| scale * a).collect());
            } else {
                let rch = r_chan(&se.sigma[l - 2][t - 1]);
                for i in 0..n {
                    let xrow: Vec<f64> = (0..t).map(|k| xs[l - 1][k][i]).collect();
                    let rrow: Vec<f64> = (0..t - 1).map(|k| rs[l - 2][k][i]).collect();
                    let m = relu_joint_posterior(
                        dotv(&rch.a, &rrow),
                        rch.sigma,
                        dotv(&xch.a, &xrow),
                        xch.rho,
                    )
                    .unwrap();
                    xhat[i] = m.mean_z1;
                    pvar_sum += m.var_z1;
                }
                let scale = pvar_sum / n as f64 / xch.rho;
                psi[l - 1].push(xch.a.iter().map(|a| scale * a).collect());
            }
            xhats[l - 1].push(xhat);

            // r_t = A xhat_t - sum alpha_i s_i
            let psi_m = assemble(&psi[l - 1], size, 1);
            let (alpha, _) = onsager_series_oracle(&psi_m, &phi_m, &kappa[l - 1], d_ratio);
            let mut r_t = naive_matvec(&dense[l - 1], &xhats[l - 1][t - 1]);
            for (i, a) in alpha.iter().enumerate() {
                for (rv, s) in r_t.iter_mut().zip(&ss[l - 1][i]) {
                    *rv -= a * s;
                }
            }
            rs[l - 1].push(r_t);
        }

        // s_{t+1}
        for l in 1..=layers {
            let n_out = net.dim(l + 1);
            let mut s_next = vec![0.0; n_out];
            if l == layers {
                let yc = y_chan(&se.sigma[l - 1][t], se.e_y2);
                for i in 0..n_out {
                    let rrow: Vec<f64> = (0..t).map(|k| rs[l - 1][k][i]).collect();
                    let mut v = yc.w[t] * instance.y[i];
                    for k in 0..t {
                        v += (yc.w[k] - yc.a[k]) * rrow[k];
                    }
                    s_next[i] = v;
                }
                let dg =
                    s_next.iter().map(|s| s * s).sum::<f64>() / n_out as f64 / yc.sigma;
                let mut row = vec![dg];
                row.extend((0..t).map(|k| yc.w[k] - yc.a[k]));
                phi[l - 1].push(row);
            } else {
                let rch = r_chan(&se.sigma[l - 1][t]);
                let xch_next = x_chan(&se.mu[l][..t], &se.omega[l][t - 1]);
                let mut var_sum = 0.0;
                for i in 0..n_out {
                    let rrow: Vec<f64> = (0..t).map(|k| rs[l - 1][k][i]).collect();
                    let xrow: Vec<f64> = (0..t).map(|k| xs[l][k][i]).collect();
                    let rt = dotv(&rch.a, &rrow);
                    let m = relu_joint_posterior(
                        rt,
                        rch.sigma,
                        dotv(&xch_next.a, &xrow),
                        xch_next.rho,
                    )
                    .unwrap();
                    s_next[i] = m.mean_z0 - rt;
                    var_sum += m.var_z0;
                }
                let scale = var_sum / n_out as f64 / rch.sigma - 1.0;
                let dg =
                    s_next.iter().map(|s| s * s).sum::<f64>() / n_out as f64 / rch.sigma;
                let mut row = vec![dg];
                row.extend(rch.a.iter().map(|a| scale * a));
                phi[l - 1].push(row);
            }
            ss[l - 1].push(s_next);
        }
    }
    xhats
}
