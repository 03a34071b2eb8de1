//! The multi-layer message-passing engine.
//!
//! One iteration sweeps the layers forward with
//!
//! ```text
//! x_t^l = A_l^T s_t^l - sum_{i<t} beta_{ti} xhat_i^l
//! xhat_t^l = f_t^l(x_1..x_t, r_1..r_{t-1} of layer l-1)
//! r_t^l = A_l xhat_t^l - sum_{i<=t} alpha_{ti} s_i^l
//! ```
//!
//! then refreshes the correction iterates `s_{t+1}^l` from the next layer's
//! x-iterates (or `y` at the last layer). The memory coefficients come from
//! the truncated power series
//!
//! ```text
//! M^alpha = sum_j kappa_{2(j+1)} Psi (Phi Psi)^j,
//! M^beta  = delta * sum_j kappa_{2(j+1)} Phi (Psi Phi)^j,
//! ```
//!
//! read off their last rows. `Psi` and `Phi` hold empirically averaged
//! denoiser derivatives by default; a state-evolution-sourced variant is
//! available for comparison. Denoiser parameters always come from state
//! evolution, which therefore runs first.
//!
//! The initialization `s_1^L = y`, `s_1^l = A_{l+1}^T s_1^{l+1}` is the
//! identity correction that pulls the recursion away from the zero-overlap
//! fixed point.

use nalgebra::DMatrix;

use crate::cumulants::FreeCumulantTable;
use crate::denoise::DenoiserSet;
use crate::ensemble::{DesignMatrix, Instance, NetworkSpec};
use crate::se::SeTrajectory;
use crate::smallmat::weighted_power_series;
use crate::{Error, Result};

/// Memory coefficients of one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsagerCoeffs {
    /// `alpha_{t,1..t}` applied to `s_1..s_t` in the r-update.
    pub alpha: Vec<f64>,
    /// `beta_{t,1..t-1}` applied to `xhat_1..x_{t-1}` in the x-update.
    pub beta: Vec<f64>,
}

/// Read the memory coefficients off the last rows of the two power-series
/// matrices built from `(t+1) x (t+1)` derivative blocks.
pub fn onsager_coefficients(
    psi: &DMatrix<f64>,
    phi: &DMatrix<f64>,
    kappa: &FreeCumulantTable,
    delta_ratio: f64,
) -> Result<OnsagerCoeffs> {
    let size = psi.nrows();
    if size < 2 || phi.nrows() != size || psi.ncols() != size || phi.ncols() != size {
        return Err(Error::InvalidDimension(
            "onsager coefficients want square blocks of side t+1 >= 2".into(),
        ));
    }
    if kappa.order() < size + 1 {
        return Err(Error::InvalidParameter(format!(
            "onsager coefficients need cumulants to half-order {}, have {}",
            size + 1,
            kappa.order()
        )));
    }
    let coeffs: Vec<f64> = (1..=size + 1).map(|k| kappa.kappa2k(k)).collect();
    let m_alpha = weighted_power_series(psi, &(phi * psi), &coeffs);
    let m_beta = weighted_power_series(phi, &(psi * phi), &coeffs) * delta_ratio;
    let t = size - 1;
    let alpha = (1..=t).map(|k| m_alpha[(t, k)]).collect();
    let beta = (1..t).map(|k| m_beta[(t, k)]).collect();
    Ok(OnsagerCoeffs { alpha, beta })
}

/// Where the derivative blocks behind the memory coefficients come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoeffSource {
    /// Empirical averages over the running iterates, as the algorithm is
    /// stated.
    #[default]
    Empirical,
    /// The state-evolution expectations, for comparison runs.
    StateEvolution,
}

/// Engine knobs. Damping blends each fresh `xhat_t` / `s_{t+1}` with its
/// predecessor; it is off by default and only intended for exploratory
/// spectra (the tracked recursion assumes no damping).
#[derive(Debug, Clone, Copy)]
pub struct AmpOptions {
    pub coeff_source: CoeffSource,
    pub damping: f64,
    /// Keep the per-iteration estimates in the trajectory (small runs only).
    pub record_iterates: bool,
}

impl Default for AmpOptions {
    fn default() -> Self {
        AmpOptions {
            coeff_source: CoeffSource::Empirical,
            damping: 0.0,
            record_iterates: false,
        }
    }
}

/// One measured point of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmpPoint {
    pub t: usize,
    /// Layer index, one-based.
    pub layer: usize,
    pub overlap: f64,
    pub mse: f64,
}

/// Per-iteration metrics of one run.
#[derive(Debug, Clone)]
pub struct AmpTrajectory {
    pub points: Vec<AmpPoint>,
    pub iterations: usize,
    pub layers: usize,
    /// `xhat[layer][t-1]`, present when the run recorded iterates.
    pub xhat: Option<Vec<Vec<Vec<f64>>>>,
}

struct AmpLayer {
    x_cols: Vec<Vec<f64>>,
    xhat_cols: Vec<Vec<f64>>,
    r_cols: Vec<Vec<f64>>,
    s_cols: Vec<Vec<f64>>,
    psi_rows: Vec<Vec<f64>>,
    phi_rows: Vec<Vec<f64>>,
}

impl AmpLayer {
    fn psi_matrix(&self, size: usize, pad_last: bool) -> DMatrix<f64> {
        let mut m = DMatrix::<f64>::zeros(size, size);
        let take = if pad_last { size.saturating_sub(2) } else { size - 1 };
        for (i, row) in self.psi_rows.iter().enumerate().take(take) {
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
}

/// Iterate and derivative state of a run, one entry per layer.
pub struct AmpState {
    layers: Vec<AmpLayer>,
    /// `A_{l+1}^T s_1^{l+1}` computed during initialization; reused as
    /// `x_1^{l+1}` when iteration one reaches that layer.
    pre_x: Vec<Option<Vec<f64>>>,
}

/// Backward initialization sweep: `s_1^L = y`, then
/// `s_1^l = A_{l+1}^T s_1^{l+1}` down to the first layer (identity initial
/// correction). The first column of each empirical `Phi` is seeded with the
/// state-evolution g-derivative chain of that identity correction.
pub fn amp_initialize(
    net: &NetworkSpec,
    designs: &[DesignMatrix],
    instance: &Instance,
    se: &SeTrajectory,
) -> Result<AmpState> {
    let layers = net.layers();
    if designs.len() != layers || se.layers != layers {
        return Err(Error::InvalidDimension(
            "designs / state evolution do not match the network".into(),
        ));
    }
    if instance.y.len() != net.dim(layers + 1) {
        return Err(Error::InvalidDimension("observation length mismatch".into()));
    }
    let mut s1: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut pre_x: Vec<Option<Vec<f64>>> = vec![None; layers];
    s1[layers - 1] = instance.y.clone();
    for l in (1..layers).rev() {
        // l here is the zero-based target layer index: s_1^l from layer l+1
        let pre = designs[l].rmatvec(&s1[l]);
        s1[l - 1] = pre.clone();
        pre_x[l] = Some(pre);
    }
    let state = AmpState {
        layers: (0..layers)
            .map(|l| AmpLayer {
                x_cols: Vec::new(),
                xhat_cols: Vec::new(),
                r_cols: Vec::new(),
                s_cols: vec![std::mem::take(&mut s1[l])],
                psi_rows: Vec::new(),
                phi_rows: vec![vec![se.dg_s1[l]]],
            })
            .collect(),
        pre_x,
    };
    Ok(state)
}

fn check_finite(v: &[f64], what: &str, t: usize, layer: usize) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: what.into(),
            iter: t,
            layer,
        });
    }
    Ok(())
}

fn axpy_sub(target: &mut [f64], coeff: f64, v: &[f64]) {
    if coeff != 0.0 {
        for (t, x) in target.iter_mut().zip(v) {
            *t -= coeff * x;
        }
    }
}

fn damp(fresh: &mut [f64], previous: Option<&Vec<f64>>, gamma: f64) {
    if gamma > 0.0 {
        if let Some(prev) = previous {
            for (f, p) in fresh.iter_mut().zip(prev) {
                *f = (1.0 - gamma) * *f + gamma * p;
            }
        }
    }
}

/// Overlap `|<a, b>|^2 / (|a|^2 |b|^2)`, zero when either norm vanishes.
pub fn overlap(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa <= 0.0 || bb <= 0.0 {
        0.0
    } else {
        ab * ab / (aa * bb)
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

fn views(cols: &[Vec<f64>], upto: usize) -> Vec<&[f64]> {
    cols.iter().take(upto).map(|c| c.as_slice()).collect()
}

/// One full iteration: the layer sweep for `(x_t, xhat_t, r_t)` followed by
/// the correction sweep for `s_{t+1}`. `t` is one-based and must follow the
/// iterations already recorded in `state`.
#[allow(clippy::too_many_arguments)]
pub fn amp_step<D: DenoiserSet>(
    state: &mut AmpState,
    net: &NetworkSpec,
    designs: &[DesignMatrix],
    instance: &Instance,
    denoisers: &D,
    se: &SeTrajectory,
    kappa: &[FreeCumulantTable],
    t: usize,
    opts: &AmpOptions,
) -> Result<Vec<AmpPoint>> {
    let layers = net.layers();
    let mut points = Vec::with_capacity(layers);
    for l in 1..=layers {
        let delta_ratio = net.delta(l);
        // beta from the blocks available before xhat_t exists: the padded
        // last Psi row cannot influence it
        let (psi_pad, phi_m) = coeff_blocks(state, se, l, t, true, opts.coeff_source);
        let beta = onsager_coefficients(&psi_pad, &phi_m, &kappa[l - 1], delta_ratio)?.beta;

        let mut x_t = match (t, &state.pre_x[l - 1]) {
            (1, Some(pre)) => pre.clone(),
            _ => designs[l - 1].rmatvec(&state.layers[l - 1].s_cols[t - 1]),
        };
        for (i, b) in beta.iter().enumerate() {
            axpy_sub(&mut x_t, *b, &state.layers[l - 1].xhat_cols[i]);
        }
        check_finite(&x_t, "x", t, l)?;
        state.layers[l - 1].x_cols.push(x_t);

        // xhat_t and the new empirical Psi row
        let n = net.dim(l);
        let mut xhat = vec![0.0; n];
        let xch = se.x_channel(l, t).map_err(|e| at(e, l, t))?;
        let psi_row = if l == 1 {
            denoisers.f1(&xch, &views(&state.layers[0].x_cols, t), &mut xhat)
        } else {
            let rch_prev = se.r_channel(l - 1, t - 1).map_err(|e| at(e, l, t))?;
            let (xv, rv) = {
                let cur = &state.layers[l - 1];
                let prev = &state.layers[l - 2];
                (views(&cur.x_cols, t), views(&prev.r_cols, t - 1))
            };
            denoisers.f_middle(&xch, &rch_prev, &xv, &rv, &mut xhat)
        }
        .map_err(|e| at(e, l, t))?;
        check_finite(&xhat, "xhat", t, l)?;
        damp(
            &mut xhat,
            state.layers[l - 1].xhat_cols.last(),
            opts.damping,
        );
        state.layers[l - 1].psi_rows.push(psi_row);
        state.layers[l - 1].xhat_cols.push(xhat);

        // alpha now that the full Psi block exists
        let (psi_full, phi_m) = coeff_blocks(state, se, l, t, false, opts.coeff_source);
        let alpha = onsager_coefficients(&psi_full, &phi_m, &kappa[l - 1], delta_ratio)?.alpha;
        let mut r_t = designs[l - 1].matvec(&state.layers[l - 1].xhat_cols[t - 1]);
        for (i, a) in alpha.iter().enumerate() {
            axpy_sub(&mut r_t, *a, &state.layers[l - 1].s_cols[i]);
        }
        check_finite(&r_t, "r", t, l)?;
        state.layers[l - 1].r_cols.push(r_t);

        let truth = &instance.x[l - 1];
        let est = &state.layers[l - 1].xhat_cols[t - 1];
        points.push(AmpPoint {
            t,
            layer: l,
            overlap: overlap(est, truth),
            mse: mse(est, truth),
        });
    }

    // correction sweep: s_{t+1}
    for l in 1..=layers {
        let n_out = net.dim(l + 1);
        let mut s_next = vec![0.0; n_out];
        let (dr_row, dg) = if l == layers {
            let ych = se.y_channel(t).map_err(|e| at(e, l, t))?;
            denoisers.h_last(
                &ych,
                &views(&state.layers[l - 1].r_cols, t),
                &instance.y,
                &mut s_next,
            )
        } else {
            let rch = se.r_channel(l, t).map_err(|e| at(e, l, t))?;
            let xch_next = se.x_channel(l + 1, t).map_err(|e| at(e, l, t))?;
            let (rv, xv) = {
                let cur = &state.layers[l - 1];
                let next = &state.layers[l];
                (views(&cur.r_cols, t), views(&next.x_cols, t))
            };
            denoisers.h_middle(&rch, &xch_next, &rv, &xv, &mut s_next)
        }
        .map_err(|e| at(e, l, t))?;
        check_finite(&s_next, "s", t, l)?;
        damp(&mut s_next, state.layers[l - 1].s_cols.last(), opts.damping);
        let mut phi_row = vec![dg];
        phi_row.extend(dr_row);
        state.layers[l - 1].phi_rows.push(phi_row);
        state.layers[l - 1].s_cols.push(s_next);
    }
    Ok(points)
}

fn coeff_blocks(
    state: &AmpState,
    se: &SeTrajectory,
    l: usize,
    t: usize,
    pad_last_psi: bool,
    source: CoeffSource,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let size = t + 1;
    match source {
        CoeffSource::Empirical => {
            let layer = &state.layers[l - 1];
            (layer.psi_matrix(size, pad_last_psi), layer.phi_matrix(size))
        }
        CoeffSource::StateEvolution => {
            let mut psi = DMatrix::<f64>::zeros(size, size);
            let take = if pad_last_psi { size - 2 } else { size - 1 };
            for (i, row) in se.psi_rows[l - 1].iter().enumerate().take(take) {
                for (k, v) in row.iter().enumerate() {
                    psi[(i + 1, k + 1)] = *v;
                }
            }
            let mut phi = DMatrix::<f64>::zeros(size, size);
            for (i, row) in se.phi_rows[l - 1].iter().enumerate().take(size - 1) {
                for (k, v) in row.iter().enumerate() {
                    phi[(i + 1, k)] = *v;
                }
            }
            (psi, phi)
        }
    }
}

fn at(e: Error, layer: usize, iter: usize) -> Error {
    match e {
        Error::NumericalDegeneracy(detail) => Error::DegenerateChannel {
            layer,
            iter,
            detail,
        },
        other => other,
    }
}

/// Run `t_max` iterations against one problem instance. The state-evolution
/// trajectory must cover at least as many iterations; it supplies every
/// denoiser parameter.
#[allow(clippy::too_many_arguments)]
pub fn run_ml_rigamp<D: DenoiserSet>(
    net: &NetworkSpec,
    designs: &[DesignMatrix],
    instance: &Instance,
    denoisers: &D,
    se: &SeTrajectory,
    kappa: &[FreeCumulantTable],
    t_max: usize,
    opts: &AmpOptions,
) -> Result<AmpTrajectory> {
    if t_max == 0 {
        return Err(Error::InvalidParameter("need at least one iteration".into()));
    }
    if se.iterations < t_max {
        return Err(Error::InvalidParameter(format!(
            "state evolution covers {} iterations, requested {}",
            se.iterations, t_max
        )));
    }
    if kappa.len() != net.layers() {
        return Err(Error::InvalidParameter(
            "one cumulant table per layer required".into(),
        ));
    }
    let mut state = amp_initialize(net, designs, instance, se)?;
    let mut points = Vec::with_capacity(t_max * net.layers());
    for t in 1..=t_max {
        let step = amp_step(
            &mut state, net, designs, instance, denoisers, se, kappa, t, opts,
        )?;
        points.extend(step);
    }
    let xhat = opts
        .record_iterates
        .then(|| state.layers.iter().map(|l| l.xhat_cols.clone()).collect());
    Ok(AmpTrajectory {
        points,
        iterations: t_max,
        layers: net.layers(),
        xhat,
    })
}
