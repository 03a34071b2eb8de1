//! State evolution: the deterministic recursion that predicts the joint
//! statistics of the message-passing iterates layer by layer.
//!
//! Per iteration and layer the recursion tracks a mean vector `mu` (the
//! signal component of the x-iterates), covariances `Omega` (their noise)
//! and `Sigma` (of `(G, R_1..R_t)`), plus four derivative/correlation blocks
//! `Psi, Phi, Gamma, Delta` whose entries are scalar Monte Carlo averages.
//! The covariance updates are truncated matrix power series weighted by the
//! rectangular free cumulants:
//!
//! ```text
//! Sigma_{t+1} = sum_j kappa_{2(j+1)} Xi^(j),
//! Xi^(j) = sum_{i=0}^{j} (Psi Phi)^i Gamma ((Psi Phi)^T)^{j-i}
//!        + sum_{i=0}^{j-1} (Psi Phi)^i Psi Delta Psi^T ((Psi Phi)^T)^{j-1-i}
//! ```
//!
//! and symmetrically for `Omega` with the roles of the blocks swapped.
//! Entries computed at earlier iterations are frozen, so the leading blocks
//! of `Sigma` and `Omega` nest exactly across iterations.

use nalgebra::DMatrix;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cumulants::FreeCumulantTable;
use crate::denoise::{DenoiserSet, RChannel, XChannel, YChannel};
use crate::ensemble::{relu, NetworkSpec};
use crate::rng::{Purpose, Streams};
use crate::smallmat::symmetrize;
pub use crate::smallmat::psd_sampling_factor;
use crate::{Error, Result};

/// Default Monte Carlo bank size per layer per iteration.
pub const DEFAULT_N_MC: usize = 200_000;

/// One predicted observable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SePoint {
    pub t: usize,
    /// Layer index, one-based.
    pub layer: usize,
    pub overlap: f64,
    pub mse: f64,
}

/// Everything the recursion produces, laid out for consumption by the
/// message-passing engine (denoiser parameters) and the experiment harness
/// (per-iteration predictions).
#[derive(Debug, Clone)]
pub struct SeTrajectory {
    pub layers: usize,
    pub iterations: usize,
    /// `mu[l][i]` is the signal gain of iterate `i+1` at layer `l+1`.
    pub mu: Vec<Vec<f64>>,
    /// `omega[l][i]` is the `(i+1) x (i+1)` noise covariance of the first
    /// `i+1` x-iterates.
    pub omega: Vec<Vec<DMatrix<f64>>>,
    /// `sigma[l][i]` is the `(i+1) x (i+1)` covariance of `(G, R_1..R_i)`.
    pub sigma: Vec<Vec<DMatrix<f64>>>,
    /// Frozen derivative rows: `psi_rows[l][i]` holds the averaged partials
    /// of the `(i+1)`-th x-denoiser in `x_1..x_{i+1}`.
    pub psi_rows: Vec<Vec<Vec<f64>>>,
    /// `phi_rows[l][i]` holds `[dg, dr_1..dr_i]` for `S_{i+1}`.
    pub phi_rows: Vec<Vec<Vec<f64>>>,
    /// Second moments `E[(X^l)^2]`.
    pub e_x2: Vec<f64>,
    /// `var(G^l)`.
    pub var_g: Vec<f64>,
    /// `E[Y^2]` of the output channel.
    pub e_y2: f64,
    /// Initialization g-derivatives `E[d_g S_1^l]` (the identity-h1 chain).
    pub dg_s1: Vec<f64>,
    /// Predicted overlap and MSE per `(t, layer)`.
    pub points: Vec<SePoint>,
}

impl SeTrajectory {
    /// x-channel of layer `l` (one-based) at iterate level `t`.
    pub fn x_channel(&self, l: usize, t: usize) -> Result<XChannel> {
        XChannel::new(&self.mu[l - 1][..t], &self.omega[l - 1][t - 1])
    }

    /// r-channel of layer `l` conditioning on `r_1..r_t` (possibly empty).
    pub fn r_channel(&self, l: usize, t: usize) -> Result<RChannel> {
        RChannel::new(&self.sigma[l - 1][t])
    }

    /// Output channel of the last layer conditioning on `r_1..r_t` and `y`.
    pub fn y_channel(&self, t: usize) -> Result<YChannel> {
        YChannel::new(&self.sigma[self.layers - 1][t], self.e_y2)
    }
}

/// Initialization of one layer: scalar quantities from the identity-h1
/// backward sweep and the closed-form forward pass.
#[derive(Debug, Clone)]
pub struct SeInit {
    pub var_g: Vec<f64>,
    pub e_x2: Vec<f64>,
    pub e_y2: f64,
    pub mu1: Vec<f64>,
    pub omega1: Vec<f64>,
    pub dg_s1: Vec<f64>,
    pub e_s1_sq: Vec<f64>,
}

/// Minimum cumulant half-order needed to run `t_max` iterations with the
/// uniform per-iteration updates (the Omega update at iteration t consumes
/// orders up to `2(2(t+1)+1)`).
pub fn required_cumulant_order(t_max: usize) -> usize {
    2 * t_max + 3
}

/// Forward second moments and the backward identity-h1 recursion.
///
/// Forward: `var(G^1) = kappa_2 E[(X^1)^2]`, then `E[(X^{l+1})^2]` by Monte
/// Carlo through the ReLU and onward. Backward from the last layer:
/// `mu_1^l = delta_l kappa_2^l E[d_g S_1^l]` and
/// `Omega_1^l = delta_l kappa_2^l E[(S_1^l)^2]
///            + delta_l kappa_4^l E[(X^l)^2] (E[d_g S_1^l])^2`,
/// where the g-derivative chains through the ReLU with factor 1/2.
pub fn se_initialize(
    net: &NetworkSpec,
    kappa: &[FreeCumulantTable],
    n_mc: usize,
    streams: &Streams,
) -> Result<SeInit> {
    let layers = net.layers();
    if kappa.len() != layers {
        return Err(Error::InvalidParameter(format!(
            "expected {} cumulant tables, got {}",
            layers,
            kappa.len()
        )));
    }
    let prior_m2 = net.prior().second_moment();
    if !(prior_m2 > 0.0) {
        return Err(Error::DegenerateModel("prior second moment is zero".into()));
    }
    // forward pass: larger bank than the per-iteration default, these
    // moments are frozen into every later update
    let n_fwd = n_mc.max(1_000_000);
    let mut e_x2 = vec![0.0; layers];
    let mut var_g = vec![0.0; layers];
    e_x2[0] = prior_m2;
    for l in 1..=layers {
        var_g[l - 1] = kappa[l - 1].kappa2k(1) * e_x2[l - 1];
        if !(var_g[l - 1] > 0.0) {
            return Err(Error::DegenerateModel(format!(
                "var(G) vanishes at layer {l}"
            )));
        }
        if l < layers {
            let mut rng = streams.stream(Purpose::StateEvolution, 0, l as u64);
            let sd = var_g[l - 1].sqrt();
            let mut acc = 0.0;
            for _ in 0..n_fwd {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = relu(sd * z);
                acc += x * x;
            }
            e_x2[l] = acc / n_fwd as f64;
        }
    }
    let e_y2 = var_g[layers - 1] + net.sigma() * net.sigma();

    // backward identity-h1 sweep
    let mut mu1 = vec![0.0; layers];
    let mut omega1 = vec![0.0; layers];
    let mut dg_s1 = vec![0.0; layers];
    let mut e_s1_sq = vec![0.0; layers];
    for l in (1..=layers).rev() {
        if l == layers {
            dg_s1[l - 1] = 1.0;
            e_s1_sq[l - 1] = e_y2;
        } else {
            // S_1^l = X_1^{l+1}; the g-derivative chains through the ReLU
            dg_s1[l - 1] = 0.5 * mu1[l];
            e_s1_sq[l - 1] = mu1[l] * mu1[l] * e_x2[l] + omega1[l];
        }
        let d = net.delta(l);
        let k2 = kappa[l - 1].kappa2k(1);
        let k4 = kappa[l - 1].kappa2k(2);
        mu1[l - 1] = d * k2 * dg_s1[l - 1];
        omega1[l - 1] =
            d * k2 * e_s1_sq[l - 1] + d * k4 * e_x2[l - 1] * dg_s1[l - 1] * dg_s1[l - 1];
    }
    Ok(SeInit {
        var_g,
        e_x2,
        e_y2,
        mu1,
        omega1,
        dg_s1,
        e_s1_sq,
    })
}

/// Covariance update for `(G, R_1..R_t)` from `(t+1)`-sized blocks.
pub fn update_sigma(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    delta_blk: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
) -> Result<DMatrix<f64>> {
    let size = psi.nrows();
    let j_max = 2 * size - 1;
    if kappa.order() < j_max + 1 {
        return Err(Error::InvalidParameter(format!(
            "sigma update needs cumulants to half-order {}, have {}",
            j_max + 1,
            kappa.order()
        )));
    }
    let pf = psi * phi;
    let pows = matrix_powers(&pf, j_max);
    let middle = psi * delta_blk * psi.transpose();
    let mut out = DMatrix::<f64>::zeros(size, size);
    for j in 0..=j_max {
        let c = kappa.kappa2k(j + 1);
        if c == 0.0 {
            continue;
        }
        if j == 0 {
            out += gamma * c;
            continue;
        }
        let mut xi = DMatrix::<f64>::zeros(size, size);
        for i in 0..=j {
            xi += &pows[i] * gamma * pows[j - i].transpose();
        }
        for i in 0..j {
            xi += &pows[i] * &middle * pows[j - 1 - i].transpose();
        }
        out += xi * c;
    }
    symmetrize(&mut out);
    Ok(out)
}

/// Covariance and mean update for the x-side. Takes `(t+2)`-sized blocks
/// with the unknown trailing row/column of `Psi` and `Gamma` zero-padded
/// (they cannot influence the result) and returns `Omega_{t+1}` (the
/// `(t+1)`-sized trailing principal block of `Omega'`) together with
/// `mu_{t+1}`.
pub fn update_omega_mu(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    gamma: &DMatrix<f64>,
    delta_blk: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
    delta_ratio: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let size = psi.nrows();
    let j_max = 2 * size - 2;
    if kappa.order() < (j_max + 1).max(size + 1) {
        return Err(Error::InvalidParameter(format!(
            "omega update needs cumulants to half-order {}, have {}",
            (j_max + 1).max(size + 1),
            kappa.order()
        )));
    }
    let fp = phi * psi;
    let pows = matrix_powers(&fp, j_max.max(size));
    let middle = phi * gamma * phi.transpose();
    let mut omega_prime = DMatrix::<f64>::zeros(size, size);
    for j in 0..=j_max {
        let c = kappa.kappa2k(j + 1);
        if c == 0.0 {
            continue;
        }
        if j == 0 {
            omega_prime += delta_blk * c;
            continue;
        }
        let mut theta = DMatrix::<f64>::zeros(size, size);
        for i in 0..=j {
            theta += &pows[i] * delta_blk * pows[j - i].transpose();
        }
        for i in 0..j {
            theta += &pows[i] * &middle * pows[j - 1 - i].transpose();
        }
        omega_prime += theta * c;
    }
    omega_prime *= delta_ratio;
    let mut omega = omega_prime.view((1, 1), (size - 1, size - 1)).into_owned();
    symmetrize(&mut omega);

    // mean: last entry of the first column of delta * sum_j kappa Phi (Psi Phi)^j
    let pf = psi * phi;
    let pf_pows = matrix_powers(&pf, size);
    let mut m_beta = DMatrix::<f64>::zeros(size, size);
    for j in 0..=size {
        let c = kappa.kappa2k(j + 1);
        if c != 0.0 {
            m_beta += phi * &pf_pows[j] * c;
        }
    }
    m_beta *= delta_ratio;
    let mu_next = m_beta[(size - 1, 0)];
    Ok((omega, mu_next))
}

fn matrix_powers(m: &DMatrix<f64>, up_to: usize) -> Vec<DMatrix<f64>> {
    let n = m.nrows();
    let mut pows = Vec::with_capacity(up_to + 1);
    pows.push(DMatrix::<f64>::identity(n, n));
    for i in 1..=up_to {
        let next = &pows[i - 1] * m;
        pows.push(next);
    }
    pows
}

/// Draw `n` samples of a centered Gaussian with the given covariance
/// (eigenvalue-floored), returned one vector per coordinate.
pub fn sample_joint(
    cov: &DMatrix<f64>,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let d = cov.nrows();
    let f = psd_sampling_factor(cov)?;
    let mut out = vec![vec![0.0; n]; d];
    let mut z = vec![0.0; d];
    for s in 0..n {
        for zj in z.iter_mut() {
            *zj = StandardNormal.sample(rng);
        }
        for i in 0..d {
            let mut acc = 0.0;
            for (j, zj) in z.iter().enumerate() {
                acc += f[(i, j)] * zj;
            }
            out[i][s] = acc;
        }
    }
    Ok(out)
}

// growing per-layer tables with frozen entries
struct LayerTables {
    mu: Vec<f64>,
    omegas: Vec<DMatrix<f64>>,
    sigmas: Vec<DMatrix<f64>>,
    psi_rows: Vec<Vec<f64>>,
    phi_rows: Vec<Vec<f64>>,
    gamma_x: Vec<f64>,
    gamma_xx: Vec<Vec<f64>>,
    delta_rows: Vec<Vec<f64>>,
    e_x2: f64,
}

impl LayerTables {
    fn psi_matrix(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        for (i, row) in self.psi_rows.iter().enumerate().take(size - 1) {
            for (k, v) in row.iter().enumerate() {
                m[(i + 1, k + 1)] = *v;
            }
        }
        m
    }

    fn phi_matrix(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        for (i, row) in self.phi_rows.iter().enumerate().take(size - 1) {
            for (k, v) in row.iter().enumerate() {
                m[(i + 1, k)] = *v;
            }
        }
        m
    }

    fn gamma_matrix(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        m[(0, 0)] = self.e_x2;
        for (j, v) in self.gamma_x.iter().enumerate().take(size - 1) {
            m[(0, j + 1)] = *v;
            m[(j + 1, 0)] = *v;
        }
        for (i, row) in self.gamma_xx.iter().enumerate().take(size - 1) {
            for (j, v) in row.iter().enumerate() {
                m[(i + 1, j + 1)] = *v;
                m[(j + 1, i + 1)] = *v;
            }
        }
        m
    }

    fn delta_matrix(&self, size: usize) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        for (i, row) in self.delta_rows.iter().enumerate().take(size - 1) {
            for (j, v) in row.iter().enumerate() {
                m[(i + 1, j + 1)] = *v;
                m[(j + 1, i + 1)] = *v;
            }
        }
        m
    }
}

fn mean_prod(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / a.len() as f64
}

fn views<'a>(cols: &'a [Vec<f64>], upto: usize) -> Vec<&'a [f64]> {
    cols.iter().take(upto).map(|c| c.as_slice()).collect()
}

// one iteration's Monte Carlo bank for a layer
struct LayerBank {
    x_cols: Vec<Vec<f64>>,
    r_cols: Vec<Vec<f64>>,
    g: Vec<f64>,
    y: Option<Vec<f64>>,
}

/// Run the full recursion for `t_max` iterations.
///
/// The Monte Carlo banks are resampled fresh each iteration from the
/// current covariances; previously computed block entries are reused
/// verbatim, which makes the leading-submatrix nesting exact.
pub fn run_state_evolution<D: DenoiserSet>(
    net: &NetworkSpec,
    kappa: &[FreeCumulantTable],
    denoisers: &D,
    t_max: usize,
    n_mc: usize,
    streams: &Streams,
) -> Result<SeTrajectory> {
    let layers = net.layers();
    if t_max == 0 || n_mc == 0 {
        return Err(Error::InvalidParameter(
            "state evolution needs t_max >= 1 and n_mc >= 1".into(),
        ));
    }
    let need = required_cumulant_order(t_max);
    for (l, k) in kappa.iter().enumerate() {
        if k.order() < need {
            return Err(Error::InvalidParameter(format!(
                "layer {}: need cumulants to half-order {}, have {}",
                l + 1,
                need,
                k.order()
            )));
        }
    }

    let init = se_initialize(net, kappa, n_mc, streams)?;
    let mut tables: Vec<LayerTables> = (0..layers)
        .map(|l| LayerTables {
            mu: vec![init.mu1[l]],
            omegas: vec![DMatrix::from_element(1, 1, init.omega1[l])],
            sigmas: vec![DMatrix::from_element(1, 1, init.var_g[l])],
            psi_rows: Vec::new(),
            phi_rows: vec![vec![init.dg_s1[l]]],
            gamma_x: Vec::new(),
            gamma_xx: Vec::new(),
            delta_rows: vec![vec![init.e_s1_sq[l]]],
            e_x2: init.e_x2[l],
        })
        .collect();

    let mut points = Vec::with_capacity(t_max * layers);
    let sigma_noise = net.sigma();

    for t in 1..=t_max {
        let mut banks: Vec<LayerBank> = Vec::with_capacity(layers);
        for l in 1..=layers {
            let unit = ((t as u64) << 10) | ((l as u64) << 3);
            // x of this layer: prior draw or relu of the previous layer's g
            let x: Vec<f64> = if l == 1 {
                let mut rng = streams.stream(Purpose::StateEvolution, 1, unit);
                net.prior().sample(n_mc, &mut rng)
            } else {
                banks[l - 2].g.iter().map(|&g| relu(g)).collect()
            };

            let tab = &tables[l - 1];
            // x-iterates: X_i = mu_i X + W_i
            let mut rng_w = streams.stream(Purpose::StateEvolution, 2, unit);
            let w_cols = sample_joint(&tab.omegas[t - 1], n_mc, &mut rng_w)?;
            let mut x_cols = w_cols;
            for (i, col) in x_cols.iter_mut().enumerate() {
                let m = tab.mu[i];
                for (c, xv) in col.iter_mut().zip(&x) {
                    *c += m * xv;
                }
            }

            // recompute all x-hat iterates in the fresh bank; only the new
            // row of Psi and Gamma gets recorded
            let mut xhat_cols: Vec<Vec<f64>> = Vec::with_capacity(t);
            let mut new_psi_row = Vec::new();
            for i in 1..=t {
                let xch = XChannel::new(&tables[l - 1].mu[..i], &tables[l - 1].omegas[i - 1])
                    .map_err(|e| at_layer(e, l, t))?;
                let mut out = vec![0.0; n_mc];
                let row = if l == 1 {
                    denoisers.f1(&xch, &views(&x_cols, i), &mut out)
                } else {
                    let rch_prev = RChannel::new(&tables[l - 2].sigmas[i - 1])
                        .map_err(|e| at_layer(e, l, t))?;
                    denoisers.f_middle(
                        &xch,
                        &rch_prev,
                        &views(&x_cols, i),
                        &views(&banks[l - 2].r_cols, i - 1),
                        &mut out,
                    )
                }
                .map_err(|e| at_layer(e, l, t))?;
                if i == t {
                    new_psi_row = row;
                }
                xhat_cols.push(out);
            }

            let xhat_t = &xhat_cols[t - 1];
            let e_xxhat = mean_prod(&x, xhat_t);
            let e_xhat2 = mean_prod(xhat_t, xhat_t);
            {
                let tab = &mut tables[l - 1];
                tab.psi_rows.push(new_psi_row);
                tab.gamma_x.push(e_xxhat);
                tab.gamma_xx.push(
                    (0..t)
                        .map(|i| mean_prod(&xhat_cols[i], xhat_t))
                        .collect(),
                );
            }
            let e_x2 = tables[l - 1].e_x2;
            let overlap = if e_xhat2 > 0.0 {
                e_xxhat * e_xxhat / (e_xhat2 * e_x2)
            } else {
                0.0
            };
            let mse = e_xhat2 - 2.0 * e_xxhat + e_x2;
            points.push(SePoint {
                t,
                layer: l,
                overlap,
                mse,
            });

            // Sigma_{t+1} and the joint (G, R_1..R_t) bank
            let tab = &tables[l - 1];
            let size = t + 1;
            let mut sigma_next = update_sigma(
                &tab.psi_matrix(size),
                &tab.phi_matrix(size),
                &tab.gamma_matrix(size),
                &tab.delta_matrix(size),
                &kappa[l - 1],
            )
            .map_err(|e| at_layer(e, l, t))?;
            // the recomputed leading block agrees only up to rounding;
            // copy it from the previous iteration so the nesting is exact
            let prev = &tab.sigmas[t - 1];
            for i in 0..t {
                for j in 0..t {
                    sigma_next[(i, j)] = prev[(i, j)];
                }
            }
            let mut rng_g = streams.stream(Purpose::StateEvolution, 3, unit);
            let mut joint = sample_joint(&sigma_next, n_mc, &mut rng_g)?;
            let g = joint.remove(0);
            let y = if l == layers {
                let mut rng_e = streams.stream(Purpose::StateEvolution, 4, unit);
                Some(
                    g.iter()
                        .map(|&gv| {
                            let z: f64 = StandardNormal.sample(&mut rng_e);
                            gv + sigma_noise * z
                        })
                        .collect(),
                )
            } else {
                None
            };
            tables[l - 1].sigmas.push(sigma_next);
            banks.push(LayerBank {
                x_cols,
                r_cols: joint,
                g,
                y,
            });
        }

        // s-iterates, their blocks, then Omega_{t+1} and mu_{t+1}
        for l in 1..=layers {
            let mut s_cols: Vec<Vec<f64>> = Vec::with_capacity(t + 1);
            // S_1 is the identity initialization: X_1 of the next layer, or y
            let s1 = if l == layers {
                banks[l - 1].y.clone().expect("last layer bank carries y")
            } else {
                banks[l].x_cols[0].clone()
            };
            s_cols.push(s1);
            let mut new_phi_row = Vec::new();
            for i in 2..=t + 1 {
                let rch = RChannel::new(&tables[l - 1].sigmas[i - 1])
                    .map_err(|e| at_layer(e, l, t))?;
                let mut out = vec![0.0; n_mc];
                let (dr_row, dg) = if l == layers {
                    let ych = YChannel::new(&tables[l - 1].sigmas[i - 1], init.e_y2)
                        .map_err(|e| at_layer(e, l, t))?;
                    denoisers.h_last(
                        &ych,
                        &views(&banks[l - 1].r_cols, i - 1),
                        banks[l - 1].y.as_ref().unwrap(),
                        &mut out,
                    )
                } else {
                    let xch_next =
                        XChannel::new(&tables[l].mu[..i - 1], &tables[l].omegas[i - 2])
                            .map_err(|e| at_layer(e, l, t))?;
                    denoisers.h_middle(
                        &rch,
                        &xch_next,
                        &views(&banks[l - 1].r_cols, i - 1),
                        &views(&banks[l].x_cols, i - 1),
                        &mut out,
                    )
                }
                .map_err(|e| at_layer(e, l, t))?;
                if i == t + 1 {
                    let mut row = vec![dg];
                    row.extend(dr_row);
                    new_phi_row = row;
                }
                s_cols.push(out);
            }

            let s_new = &s_cols[t];
            let tab = &mut tables[l - 1];
            tab.phi_rows.push(new_phi_row);
            tab.delta_rows
                .push((0..=t).map(|i| mean_prod(&s_cols[i], s_new)).collect());

            // x-side update with zero-padded trailing Psi and Gamma entries
            let size = t + 2;
            let (mut omega_next, mu_next) = update_omega_mu(
                &tab.psi_matrix(size),
                &tab.phi_matrix(size),
                &tab.gamma_matrix(size),
                &tab.delta_matrix(size),
                &kappa[l - 1],
                net.delta(l),
            )
            .map_err(|e| at_layer(e, l, t))?;
            let prev = &tab.omegas[t - 1];
            for i in 0..t {
                for j in 0..t {
                    omega_next[(i, j)] = prev[(i, j)];
                }
            }
            tab.omegas.push(omega_next);
            tab.mu.push(mu_next);
        }
    }

    Ok(SeTrajectory {
        layers,
        iterations: t_max,
        mu: tables.iter().map(|t| t.mu.clone()).collect(),
        omega: tables.iter().map(|t| t.omegas.clone()).collect(),
        sigma: tables.iter().map(|t| t.sigmas.clone()).collect(),
        psi_rows: tables.iter().map(|t| t.psi_rows.clone()).collect(),
        phi_rows: tables.iter().map(|t| t.phi_rows.clone()).collect(),
        e_x2: init.e_x2.clone(),
        var_g: init.var_g.clone(),
        e_y2: init.e_y2,
        dg_s1: init.dg_s1.clone(),
        points,
    })
}

fn at_layer(e: Error, layer: usize, iter: usize) -> Error {
    match e {
        Error::NumericalDegeneracy(detail) => Error::DegenerateChannel {
            layer,
            iter,
            detail,
        },
        other => other,
    }
}
