//! Replication harness. Replication `r` draws its sample from seed
//! `base_seed + r`, so every (n, K) cell sees the same samples for a given
//! `r` and results do not depend on scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::control::{estimate_control, passthrough_control, ControlEstimate};
use crate::error::{Error, Result};
use crate::sieve::{self, FittedModel};
use crate::simulate::{simulate_seeded, true_asf, DesignKind, DgpConfig, GroundTruth, Simulation};

/// Seed offset for the holdout sample of approximation studies.
pub const HOLDOUT_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Use the simulated `v` column.
    Observed,
    /// Estimate `V` from the discrete instrument.
    DiscreteZ,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Bias and RMSE of ASF / ATE estimates.
    #[default]
    Run,
    /// Holdout CRF approximation error across K.
    Approximation,
}

/// A treatment level: a bare number for scalar `x`, or a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum XPoint {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl XPoint {
    pub fn values(&self) -> Vec<f64> {
        match self {
            XPoint::Scalar(x) => vec![*x],
            XPoint::Vector(v) => v.clone(),
        }
    }
}

fn default_holdout() -> usize {
    50_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub dgp: DgpConfig,
    #[serde(rename = "p")]
    pub p_spec: BasisSpec,
    /// Control sieves, one cell per entry.
    #[serde(rename = "psi")]
    pub psi_specs: Vec<BasisSpec>,
    #[serde(default)]
    pub ridge: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub x_grid: Vec<XPoint>,
    /// Defaults to `observed` when the DGP emits `v`, else `discrete_z`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControlMode>,
    #[serde(default = "default_holdout")]
    pub holdout_n: usize,
    #[serde(default)]
    pub study: Study,
}

impl McConfig {
    pub fn control_mode(&self) -> ControlMode {
        self.control.unwrap_or(if self.dgp.observes_v() {
            ControlMode::Observed
        } else {
            ControlMode::DiscreteZ
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        self.p_spec.validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be >= 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(Error::InvalidConfig("n_grid must be non-empty and positive".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("n_grid must be strictly increasing".into()));
        }
        if self.psi_specs.is_empty() {
            return Err(Error::InvalidConfig("psi must list at least one basis".into()));
        }
        for psi in &self.psi_specs {
            psi.validate()?;
            if matches!(psi, BasisSpec::TreatmentDummies { .. }) {
                return Err(Error::InvalidConfig("psi cannot be treatment_dummies".into()));
            }
        }
        if self.p_spec.input_dim() != self.dgp.p.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dgp.p.input_dim(),
                got: self.p_spec.input_dim(),
            });
        }
        for x in &self.x_grid {
            let len = x.values().len();
            if len != self.p_spec.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.p_spec.input_dim(),
                    got: len,
                });
            }
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidConfig("ridge must be >= 0".into()));
        }
        match self.control_mode() {
            ControlMode::Observed if !self.dgp.observes_v() => {
                return Err(Error::InvalidConfig(
                    "control = observed but the DGP does not emit v".into(),
                ))
            }
            ControlMode::DiscreteZ if self.dgp.design != DesignKind::Triangular => {
                return Err(Error::InvalidConfig(
                    "control = discrete_z needs a triangular design".into(),
                ))
            }
            _ => {}
        }
        if self.study == Study::Approximation {
            let ks: Vec<usize> = self.psi_specs.iter().map(BasisSpec::dimension).collect();
            if ks.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidConfig(
                    "approximation studies need strictly increasing K".into(),
                ));
            }
            if self.holdout_n == 0 {
                return Err(Error::InvalidConfig("holdout_n must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McCell {
    pub n: usize,
    pub k: usize,
    pub psi: String,
    /// `asf`, `ate`, `holdout_crf_mse` or `in_sample_mse`.
    pub target: String,
    /// Treatment level for ASF / ATE targets.
    pub x: Vec<f64>,
    pub truth: f64,
    pub mean_estimate: f64,
    pub bias: f64,
    pub rmse: f64,
    /// Standard error of `mean_estimate` across replications.
    pub mc_std_error: f64,
    pub mean_gram_min_eigenvalue: f64,
    pub successes: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub schema_version: u32,
    pub study: Study,
    pub replications: usize,
    pub base_seed: u64,
    pub cells: Vec<McCell>,
}

impl McReport {
    pub fn cell(&self, n: usize, k: usize, target: &str) -> Option<&McCell> {
        self.cells
            .iter()
            .find(|c| c.n == n && c.k == k && c.target == target)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record([
            "n",
            "k",
            "psi",
            "target",
            "x",
            "truth",
            "mean_estimate",
            "bias",
            "rmse",
            "mc_std_error",
            "mean_gram_min_eigenvalue",
            "successes",
            "failures",
        ])?;
        for c in &self.cells {
            let x: Vec<String> = c.x.iter().map(f64::to_string).collect();
            wtr.write_record([
                c.n.to_string(),
                c.k.to_string(),
                c.psi.clone(),
                c.target.clone(),
                x.join(";"),
                c.truth.to_string(),
                c.mean_estimate.to_string(),
                c.bias.to_string(),
                c.rmse.to_string(),
                c.mc_std_error.to_string(),
                c.mean_gram_min_eigenvalue.to_string(),
                c.successes.to_string(),
                c.failures.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// One target within one (n, K) cell: its truth and an estimate per
/// successful replication.
struct TargetSpec {
    name: &'static str,
    x: Vec<f64>,
    truth: f64,
}

fn targets(config: &McConfig, truth: &GroundTruth) -> Result<Vec<TargetSpec>> {
    let mut out = Vec::new();
    match config.study {
        Study::Run => {
            for x in &config.x_grid {
                let x = x.values();
                // the estimator's p may differ from the DGP's; truth uses the DGP basis
                out.push(TargetSpec {
                    name: "asf",
                    truth: true_asf(truth, &x)?,
                    x,
                });
            }
            if let Some(ate) = &truth.ate {
                let t = config.dgp.p.input_dim();
                for (s, effect) in ate.iter().enumerate() {
                    let mut x = vec![0.0; t];
                    x[s] = 1.0;
                    out.push(TargetSpec {
                        name: "ate",
                        x,
                        truth: *effect,
                    });
                }
            }
        }
        Study::Approximation => {
            for name in ["holdout_crf_mse", "in_sample_mse"] {
                out.push(TargetSpec {
                    name,
                    x: Vec::new(),
                    truth: 0.0,
                });
            }
        }
    }
    Ok(out)
}

fn control_for(sim: &Simulation, mode: ControlMode) -> Result<ControlEstimate> {
    match mode {
        ControlMode::Observed => passthrough_control(&sim.data),
        ControlMode::DiscreteZ => estimate_control(&sim.data),
    }
}

/// Estimates for one replication and one K, in target order.
struct RepOutcome {
    estimates: Vec<f64>,
    gram_min_eigenvalue: f64,
}

fn evaluate(
    config: &McConfig,
    sim: &Simulation,
    control: &ControlEstimate,
    psi: &BasisSpec,
    holdout: Option<&Simulation>,
) -> Result<RepOutcome> {
    let fit = sieve::fit(&sim.data, control, &config.p_spec, psi, config.ridge)?;
    let estimates = match config.study {
        Study::Run => run_estimates(config, &fit, control, sim)?,
        Study::Approximation => {
            let holdout = holdout.expect("approximation study has a holdout");
            vec![holdout_mse(&fit, holdout)?, fit.in_sample_mse]
        }
    };
    Ok(RepOutcome {
        estimates,
        gram_min_eigenvalue: fit.gram_min_eigenvalue,
    })
}

fn run_estimates(
    config: &McConfig,
    fit: &FittedModel,
    control: &ControlEstimate,
    sim: &Simulation,
) -> Result<Vec<f64>> {
    let mq = sieve::mean_q(fit, control)?;
    let mut out = Vec::new();
    for x in &config.x_grid {
        let p = fit.p_spec.eval_p(&x.values())?;
        out.push(p.iter().zip(&mq).map(|(a, b)| a * b).sum());
    }
    if sim.truth.ate.is_some() {
        out.extend(sieve::ate(fit, control)?);
    }
    Ok(out)
}

/// `mean_i {CRF(x_i, eta_i) - fitted(x_i, eta_i)}^2` on the holdout.
fn holdout_mse(fit: &FittedModel, holdout: &Simulation) -> Result<f64> {
    let truth = &holdout.truth;
    let data = &holdout.data;
    let sq = (0..data.n())
        .map(|i| {
            let x = data.x_row(i);
            let v = holdout.eta[i];
            Ok((truth.crf(x, v)? - sieve::predict_crf(fit, x, v)?).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(sq.iter().sum::<f64>() / sq.len() as f64)
}

/// Order-independent sum: values are summed in sorted order.
fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn execute(config: &McConfig) -> Result<McReport> {
    config.validate()?;
    let truth = GroundTruth::from_config(&config.dgp)?;
    let specs = targets(config, &truth)?;
    let mode = config.control_mode();
    let holdout = match config.study {
        Study::Approximation => Some(simulate_seeded(
            &config.dgp,
            config.holdout_n,
            config.base_seed.wrapping_add(HOLDOUT_SEED_OFFSET),
        )?),
        Study::Run => None,
    };

    let jobs: Vec<(usize, u64)> = config
        .n_grid
        .iter()
        .flat_map(|&n| (0..config.replications as u64).map(move |r| (n, r)))
        .collect();
    // per job: one outcome per psi spec, failures kept as None
    let outcomes: Vec<Vec<Option<RepOutcome>>> = jobs
        .par_iter()
        .map(|&(n, r)| {
            let seed = config.base_seed.wrapping_add(r);
            let sim = match simulate_seeded(&config.dgp, n, seed) {
                Ok(sim) => sim,
                Err(_) => return config.psi_specs.iter().map(|_| None).collect(),
            };
            let control = control_for(&sim, mode).ok();
            config
                .psi_specs
                .iter()
                .map(|psi| {
                    let control = control.as_ref()?;
                    evaluate(config, &sim, control, psi, holdout.as_ref()).ok()
                })
                .collect()
        })
        .collect();

    let reps = config.replications;
    let mut cells = Vec::new();
    for (ni, &n) in config.n_grid.iter().enumerate() {
        let block = &outcomes[ni * reps..(ni + 1) * reps];
        for (ki, psi) in config.psi_specs.iter().enumerate() {
            let ok: Vec<&RepOutcome> = block.iter().filter_map(|o| o[ki].as_ref()).collect();
            let successes = ok.len();
            let mut eigs: Vec<f64> = ok.iter().map(|o| o.gram_min_eigenvalue).collect();
            let mean_eig = if successes > 0 {
                stable_sum(&mut eigs) / successes as f64
            } else {
                f64::NAN
            };
            for (ti, spec) in specs.iter().enumerate() {
                let mut est: Vec<f64> = ok.iter().map(|o| o.estimates[ti]).collect();
                let mut err: Vec<f64> = est.iter().map(|e| e - spec.truth).collect();
                let mut sq: Vec<f64> = err.iter().map(|e| e * e).collect();
                let (mean_estimate, bias, rmse, se) = if successes > 0 {
                    let m = successes as f64;
                    let mean_estimate = stable_sum(&mut est) / m;
                    let bias = stable_sum(&mut err) / m;
                    let rmse = (stable_sum(&mut sq) / m).sqrt();
                    let se = if successes > 1 {
                        let mut dev: Vec<f64> =
                            est.iter().map(|e| (e - mean_estimate).powi(2)).collect();
                        (stable_sum(&mut dev) / (m - 1.0) / m).sqrt()
                    } else {
                        0.0
                    };
                    (mean_estimate, bias, rmse, se)
                } else {
                    (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
                };
                cells.push(McCell {
                    n,
                    k: psi.dimension(),
                    psi: psi.to_string(),
                    target: spec.name.to_string(),
                    x: spec.x.clone(),
                    truth: spec.truth,
                    mean_estimate,
                    bias,
                    rmse,
                    mc_std_error: se,
                    mean_gram_min_eigenvalue: mean_eig,
                    successes,
                    failures: reps - successes,
                });
            }
        }
    }
    Ok(McReport {
        schema_version: 1,
        study: config.study,
        replications: reps,
        base_seed: config.base_seed,
        cells,
    })
}

/// Bias / RMSE study of the ASF at `x_grid` and of treatment effects.
pub fn run(config: &McConfig) -> Result<McReport> {
    let mut config = config.clone();
    config.study = Study::Run;
    execute(&config)
}

/// Holdout approximation error of the fitted CRF for each control sieve.
pub fn approximation_study(config: &McConfig) -> Result<McReport> {
    let mut config = config.clone();
    config.study = Study::Approximation;
    execute(&config)
}

/// Dispatches on `config.study`.
pub fn run_study(config: &McConfig) -> Result<McReport> {
    execute(config)
}
