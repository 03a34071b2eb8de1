//! Experiment orchestration: configuration, the multi-trial pipeline, the
//! aspect-ratio sweep, the spectrum inspection command, and CSV output.
//!
//! A run builds the per-layer cumulant tables (closed-form or estimated),
//! computes the state-evolution prediction once, dispatches independent
//! trials over a worker pool (one RNG stream per trial, so results do not
//! depend on the worker count), and writes tidy CSV:
//!
//! ```text
//! trial,t,layer,overlap,mse
//! 0,1,1,0.342...,0.657...
//! ...
//! SE,1,1,0.341...,0.658...
//! mean,1,1,...          # across trials
//! stderr,1,1,...
//! ```
//!
//! Run metadata (config hash, seed, timings, library version) goes to a
//! JSON manifest next to the CSV, so identical seeds give byte-identical
//! result files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::amp::{run_ml_rigamp, AmpOptions, AmpTrajectory};
use crate::cumulants::{
    analytic_cumulants, estimate_moments_hutchinson, exact_moments, moments_to_cumulants,
    FreeCumulantTable, MomentTable,
};
use crate::denoise::BayesDenoisers;
use crate::ensemble::{
    build_design, build_designs, generate_instance, DesignMatrix, NetworkSpec, Prior, RowMat,
    SpectrumSpec,
};
use crate::rng::{Purpose, Streams};
use crate::se::{required_cumulant_order, run_state_evolution, SeTrajectory};
use crate::{Error, Result};

/// How the per-layer free cumulants are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CumulantMode {
    /// Closed forms for the built-in spectra; exact spectrum sums for
    /// explicit ones.
    Analytic,
    /// Hutchinson moment estimation on one reference design per layer.
    Estimated,
}

/// Spectrum selector as written in config files: a name or explicit values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpectrumConfig {
    Name(String),
    Explicit { values: Vec<f64> },
}

impl SpectrumConfig {
    pub fn to_spec(&self) -> Result<SpectrumSpec> {
        match self {
            SpectrumConfig::Name(n) => match n.as_str() {
                "gaussian" => Ok(SpectrumSpec::IidGaussian),
                "beta" => Ok(SpectrumSpec::ScaledBeta),
                other => Err(Error::Config(format!(
                    "unknown spectrum {other:?}; use \"gaussian\", \"beta\" or explicit values"
                ))),
            },
            SpectrumConfig::Explicit { values } => Ok(SpectrumSpec::Explicit(values.clone())),
        }
    }
}

fn default_iterations() -> usize {
    10
}
fn default_trials() -> usize {
    100
}
fn default_n_mc() -> usize {
    crate::se::DEFAULT_N_MC
}
fn default_probes() -> usize {
    20
}
fn default_cumulants() -> CumulantMode {
    CumulantMode::Analytic
}

/// A full experiment description. Every optional field has the documented
/// default, so a minimal file needs only `layers`, `dims`, `prior`, `sigma`
/// and `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub layers: usize,
    /// `n_1 .. n_{L+1}`.
    pub dims: Vec<usize>,
    /// One entry per layer; defaults to all-Gaussian.
    #[serde(default)]
    pub spectra: Option<Vec<SpectrumConfig>>,
    pub prior: String,
    pub sigma: f64,
    pub seed: u64,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_n_mc")]
    pub n_mc: usize,
    #[serde(default = "default_cumulants")]
    pub cumulants: CumulantMode,
    #[serde(default = "default_probes")]
    pub probes: usize,
    #[serde(default)]
    pub output: Option<String>,
}

impl ExperimentConfig {
    /// Parse and validate a TOML config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.resolved()).expect("config serializes")
    }

    /// Copy with all defaults materialized, used for serialization and
    /// hashing.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        if out.spectra.is_none() {
            out.spectra = Some(vec![
                SpectrumConfig::Name("gaussian".into());
                out.layers
            ]);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.dims.len() != self.layers + 1 {
            return Err(Error::Config(format!(
                "dims must list n_1..n_{{L+1}}: got {} entries for layers = {}",
                self.dims.len(),
                self.layers
            )));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("dims entries must be positive".into()));
        }
        if let Some(s) = &self.spectra {
            if s.len() != self.layers {
                return Err(Error::Config(format!(
                    "spectra must have one entry per layer ({}), got {}",
                    self.layers,
                    s.len()
                )));
            }
            for e in s {
                e.to_spec()?;
            }
        }
        self.prior_value()?;
        if !(self.sigma >= 0.0) {
            return Err(Error::Config("sigma must be >= 0".into()));
        }
        if self.iterations == 0 || self.trials == 0 || self.n_mc == 0 || self.probes == 0 {
            return Err(Error::Config(
                "iterations, trials, n_mc and probes must all be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn prior_value(&self) -> Result<Prior> {
        match self.prior.as_str() {
            "gaussian" => Ok(Prior::GaussianUnit),
            "rademacher" => Ok(Prior::Rademacher),
            other => Err(Error::Config(format!(
                "unknown prior {other:?}; use \"gaussian\" or \"rademacher\""
            ))),
        }
    }

    pub fn network(&self) -> Result<NetworkSpec> {
        let spectra = match &self.spectra {
            Some(s) => s.iter().map(|e| e.to_spec()).collect::<Result<Vec<_>>>()?,
            None => vec![SpectrumSpec::IidGaussian; self.layers],
        };
        NetworkSpec::new(self.dims.clone(), spectra, self.prior_value()?, self.sigma)
    }

    /// SHA-256 of the resolved canonical TOML form.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_toml().as_bytes());
        hex::encode(h.finalize())
    }
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    /// Trial index, or `SE` / `mean` / `stderr`.
    pub trial: String,
    pub t: usize,
    pub layer: usize,
    pub overlap: f64,
    pub mse: f64,
}

/// Everything a run produces, before serialization.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub rows: Vec<ResultRow>,
    pub se: SeTrajectory,
    pub config_hash: String,
    pub truncated: bool,
    pub timings: Timings,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub cumulants_s: f64,
    pub se_s: f64,
    pub trials_s: f64,
    pub total_s: f64,
}

/// Cumulant half-order used for `t_max` iterations (a little past the
/// minimum the updates consume).
pub fn cumulant_order_for(t_max: usize) -> usize {
    2 * t_max + 4
}

/// Build the per-layer cumulant tables for a network.
///
/// Estimated mode samples one reference design per layer (a dedicated trial
/// id outside the experiment range) and runs Hutchinson probes on it; the
/// tables are shared by state evolution and every trial.
pub fn build_cumulants(
    net: &NetworkSpec,
    mode: CumulantMode,
    k_max: usize,
    probes: usize,
    streams: &Streams,
) -> Result<Vec<FreeCumulantTable>> {
    const REFERENCE_TRIAL: u64 = u32::MAX as u64;
    (1..=net.layers())
        .map(|l| {
            let delta = net.delta(l);
            match mode {
                CumulantMode::Analytic => {
                    if let Some(t) = analytic_cumulants(net.spectrum(l), delta, k_max)? {
                        Ok(t)
                    } else {
                        // explicit spectrum: exact moments of the given values
                        let lambda = match net.spectrum(l) {
                            SpectrumSpec::Explicit(v) => v.clone(),
                            _ => unreachable!("analytic_cumulants covers built-ins"),
                        };
                        let m = exact_moments(&lambda, net.dim(l + 1), k_max)?;
                        moments_to_cumulants(&m, delta, k_max)
                    }
                }
                CumulantMode::Estimated => {
                    let mut rng = streams.stream(Purpose::Design, REFERENCE_TRIAL, l as u64);
                    let design =
                        build_design(net.spectrum(l), net.dim(l + 1), net.dim(l), &mut rng)?;
                    let mut prng = streams.stream(Purpose::Probes, REFERENCE_TRIAL, l as u64);
                    let m = estimate_moments_hutchinson(&design, k_max, probes, &mut prng)?;
                    moments_to_cumulants(&m, delta, k_max)
                }
            }
        })
        .collect()
}

fn se_rows(se: &SeTrajectory) -> Vec<ResultRow> {
    se.points
        .iter()
        .map(|p| ResultRow {
            trial: "SE".into(),
            t: p.t,
            layer: p.layer,
            overlap: p.overlap,
            mse: p.mse,
        })
        .collect()
}

fn summary_rows(
    trials: &[AmpTrajectory],
    iterations: usize,
    layers: usize,
) -> Vec<ResultRow> {
    let mut means = Vec::new();
    let mut stderrs = Vec::new();
    let n = trials.len() as f64;
    for t in 1..=iterations {
        for l in 1..=layers {
            let get = |traj: &AmpTrajectory, which: fn(&crate::amp::AmpPoint) -> f64| {
                traj.points
                    .iter()
                    .find(|p| p.t == t && p.layer == l)
                    .map(which)
                    .unwrap_or(f64::NAN)
            };
            let ovs: Vec<f64> = trials.iter().map(|tr| get(tr, |p| p.overlap)).collect();
            let mses: Vec<f64> = trials.iter().map(|tr| get(tr, |p| p.mse)).collect();
            let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
            let se = |v: &[f64], m: f64| {
                if trials.len() < 2 {
                    0.0
                } else {
                    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) / n).sqrt()
                }
            };
            let (mo, mm) = (mean(&ovs), mean(&mses));
            means.push(ResultRow {
                trial: "mean".into(),
                t,
                layer: l,
                overlap: mo,
                mse: mm,
            });
            stderrs.push(ResultRow {
                trial: "stderr".into(),
                t,
                layer: l,
                overlap: se(&ovs, mo),
                mse: se(&mses, mm),
            });
        }
    }
    means.extend(stderrs);
    means
}

/// The full experiment pipeline: cumulants, one state-evolution pass, then
/// independent trials over the worker pool.
///
/// On a trial failure the rows gathered so far are still returned, marked
/// truncated, so callers can flush them before surfacing the error.
pub fn cmd_run(config: &ExperimentConfig) -> (Result<()>, RunArtifacts) {
    let total = Instant::now();
    let mut artifacts = RunArtifacts {
        rows: Vec::new(),
        se: SeTrajectory {
            layers: 0,
            iterations: 0,
            mu: vec![],
            omega: vec![],
            sigma: vec![],
            psi_rows: vec![],
            phi_rows: vec![],
            e_x2: vec![],
            var_g: vec![],
            e_y2: 0.0,
            dg_s1: vec![],
            points: vec![],
        },
        config_hash: config.hash(),
        truncated: true,
        timings: Timings::default(),
    };
    let run = (|| -> Result<(SeTrajectory, Vec<AmpTrajectory>)> {
        config.validate()?;
        let net = config.network()?;
        let streams = Streams::new(config.seed);
        let order = cumulant_order_for(config.iterations).max(required_cumulant_order(
            config.iterations,
        ));
        let t0 = Instant::now();
        let kappa = build_cumulants(&net, config.cumulants, order, config.probes, &streams)?;
        artifacts.timings.cumulants_s = t0.elapsed().as_secs_f64();

        let prior = config.prior_value()?;
        let denoisers = BayesDenoisers::new(prior);
        let t1 = Instant::now();
        let se = run_state_evolution(
            &net,
            &kappa,
            &denoisers,
            config.iterations,
            config.n_mc,
            &streams,
        )?;
        artifacts.timings.se_s = t1.elapsed().as_secs_f64();

        let t2 = Instant::now();
        let results: Vec<Result<AmpTrajectory>> = (0..config.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let designs = build_designs(&net, &streams, trial)?;
                let mut rng = streams.stream(Purpose::Instance, trial, 0);
                let instance = generate_instance(&net, &designs, &mut rng)?;
                run_ml_rigamp(
                    &net,
                    &designs,
                    &instance,
                    &denoisers,
                    &se,
                    &kappa,
                    config.iterations,
                    &AmpOptions::default(),
                )
            })
            .collect();
        artifacts.timings.trials_s = t2.elapsed().as_secs_f64();

        let mut trajs = Vec::with_capacity(results.len());
        for r in results {
            trajs.push(r?);
        }
        Ok((se, trajs))
    })();

    let status = match run {
        Ok((se, trajs)) => {
            for (i, traj) in trajs.iter().enumerate() {
                for p in &traj.points {
                    artifacts.rows.push(ResultRow {
                        trial: i.to_string(),
                        t: p.t,
                        layer: p.layer,
                        overlap: p.overlap,
                        mse: p.mse,
                    });
                }
            }
            artifacts.rows.extend(se_rows(&se));
            artifacts
                .rows
                .extend(summary_rows(&trajs, config.iterations, se.layers));
            artifacts.se = se;
            artifacts.truncated = false;
            Ok(())
        }
        Err(e) => Err(e),
    };
    artifacts.timings.total_s = total.elapsed().as_secs_f64();
    (status, artifacts)
}

/// State evolution only.
pub fn cmd_se(config: &ExperimentConfig) -> Result<RunArtifacts> {
    let total = Instant::now();
    config.validate()?;
    let net = config.network()?;
    let streams = Streams::new(config.seed);
    let order =
        cumulant_order_for(config.iterations).max(required_cumulant_order(config.iterations));
    let kappa = build_cumulants(&net, config.cumulants, order, config.probes, &streams)?;
    let denoisers = BayesDenoisers::new(config.prior_value()?);
    let se = run_state_evolution(
        &net,
        &kappa,
        &denoisers,
        config.iterations,
        config.n_mc,
        &streams,
    )?;
    let rows = se_rows(&se);
    Ok(RunArtifacts {
        rows,
        config_hash: config.hash(),
        se,
        truncated: false,
        timings: Timings {
            total_s: total.elapsed().as_secs_f64(),
            ..Timings::default()
        },
    })
}

/// One line of a sweep result.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub delta1: f64,
    /// `mean`, `stderr` or `SE`.
    pub trial: String,
    pub t: usize,
    pub layer: usize,
    pub overlap: f64,
    pub mse: f64,
}

/// Final-iteration signal overlap as a function of the first layer's aspect
/// ratio. `n_1` stays fixed; downstream dimensions scale by the base
/// config's ratios.
pub fn cmd_sweep(config: &ExperimentConfig, grid: &[f64]) -> Result<Vec<SweepRow>> {
    config.validate()?;
    if grid.is_empty() {
        return Err(Error::Config("sweep grid must not be empty".into()));
    }
    if grid.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::Config("sweep grid entries must be positive".into()));
    }
    let base = config.network()?;
    let mut rows = Vec::new();
    for &d1 in grid {
        let mut dims = vec![config.dims[0]];
        dims.push(((config.dims[0] as f64) * d1).round().max(1.0) as usize);
        for l in 2..=config.layers {
            let ratio = base.delta(l);
            let prev = *dims.last().unwrap();
            dims.push(((prev as f64) * ratio).round().max(1.0) as usize);
        }
        let sub = ExperimentConfig {
            dims,
            output: None,
            ..config.clone()
        };
        let (status, artifacts) = cmd_run(&sub);
        status?;
        let t_final = sub.iterations;
        for key in ["mean", "stderr", "SE"] {
            let row = artifacts
                .rows
                .iter()
                .find(|r| r.trial == key && r.t == t_final && r.layer == 1)
                .ok_or_else(|| Error::NumericalDegeneracy("sweep row missing".into()))?;
            rows.push(SweepRow {
                delta1: d1,
                trial: key.into(),
                t: t_final,
                layer: 1,
                overlap: row.overlap,
                mse: row.mse,
            });
        }
    }
    Ok(rows)
}

/// Input selector for the spectrum inspection command.
pub enum MatrixSource {
    /// Dense matrix from a CSV file (rows = output dimension).
    CsvFile(PathBuf),
    /// Sample a design of the given spectrum and shape.
    Spec {
        spec: SpectrumSpec,
        rows: usize,
        cols: usize,
    },
}

/// Moment/cumulant table of one matrix, as printed by `rigamp cumulants`.
#[derive(Debug, Clone)]
pub struct CumulantReport {
    pub moments: MomentTable,
    pub cumulants: FreeCumulantTable,
}

impl CumulantReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>4} {:>16} {:>16} {:>16}", "2k", "m_2k", "stderr", "kappa_2k");
        for k in 1..=self.moments.order() {
            let se = self
                .moments
                .stderr
                .as_ref()
                .map(|s| s[k - 1])
                .unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:>4} {:>16.8e} {:>16.4e} {:>16.8e}",
                2 * k,
                self.moments.m[k - 1],
                se,
                self.cumulants.kappa[k - 1]
            );
        }
        out
    }
}

fn parse_dense_csv(path: &Path) -> Result<RowMat> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>> = line
            .split(',')
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!(
                        "matrix csv line {}: {:?} is not a number",
                        lineno + 1,
                        f.trim()
                    ))
                })
            })
            .collect();
        let vals = vals?;
        if let Some(first) = rows.first() {
            if vals.len() != first.len() {
                return Err(Error::Config(format!(
                    "matrix csv line {}: ragged row ({} fields, expected {})",
                    lineno + 1,
                    vals.len(),
                    first.len()
                )));
            }
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Config("matrix csv is empty".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    let mut mat = RowMat::zeros(r, c);
    for (i, row) in rows.iter().enumerate() {
        mat.data[i * c..(i + 1) * c].copy_from_slice(row);
    }
    Ok(mat)
}

/// Hutchinson moments and cumulants of a matrix from file or spec.
pub fn cmd_cumulants(
    source: &MatrixSource,
    k_max: usize,
    probes: usize,
    seed: u64,
) -> Result<CumulantReport> {
    let streams = Streams::new(seed);
    let design = match source {
        MatrixSource::CsvFile(path) => DesignMatrix::Dense {
            mat: parse_dense_csv(path)?,
        },
        MatrixSource::Spec { spec, rows, cols } => {
            let mut rng = streams.stream(Purpose::Design, 0, 0);
            build_design(spec, *rows, *cols, &mut rng)?
        }
    };
    let delta = design.n_out() as f64 / design.n_in() as f64;
    let mut prng = streams.stream(Purpose::Probes, 0, 1);
    let moments = estimate_moments_hutchinson(&design, k_max, probes, &mut prng)?;
    let cumulants = moments_to_cumulants(&moments, delta, k_max)?;
    Ok(CumulantReport { moments, cumulants })
}

/// Render result rows as CSV (stable column set).
pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("trial,t,layer,overlap,mse\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.trial, r.t, r.layer, r.overlap, r.mse);
    }
    out
}

/// Render sweep rows as CSV.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("delta1,trial,t,layer,overlap,mse\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.delta1, r.trial, r.t, r.layer, r.overlap, r.mse
        );
    }
    out
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    config_hash: &'a str,
    seed: u64,
    truncated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    timings: &'a Timings,
}

/// Write the CSV plus its JSON sidecar manifest.
pub fn write_outputs(
    csv: &str,
    out_path: &Path,
    config: &ExperimentConfig,
    artifacts_hash: &str,
    truncated: bool,
    error: Option<String>,
    timings: &Timings,
) -> Result<()> {
    std::fs::write(out_path, csv)?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        config_hash: artifacts_hash,
        seed: config.seed,
        truncated,
        error,
        timings,
    };
    let manifest_path = manifest_path_for(out_path);
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}

pub fn manifest_path_for(out_path: &Path) -> PathBuf {
    let mut os = out_path.as_os_str().to_owned();
    os.push(".manifest.json");
    PathBuf::from(os)
}
