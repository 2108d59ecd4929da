//! Synthetic samples from triangular systems `Y = p(X)'e, X = a(Z) + b(Z) eta`
//! and from binary / mutually exclusive multi-treatment designs.
//!
//! Heterogeneity is `e_j = mu_j + rho * g(eta) + sigma * nu_j` with `g`
//! zero-mean under `eta ~ U(0, 1)`, so `E[e] = mu` and the average structural
//! function is known in closed form. The true control variable is `eta`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Triangular,
    BinaryTreatment,
    MultiTreatment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instrument {
    /// `Pr(Z = m)` for codes `m = 0..M-1`.
    pub probabilities: Vec<f64>,
}

/// `h(z, eta) = intercept + slope * eta` for one instrument code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStage {
    pub intercept: f64,
    pub slope: f64,
}

/// `intercept + slope * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub intercept: f64,
    pub slope: f64,
}

impl Affine {
    pub fn constant(c: f64) -> Self {
        Affine {
            intercept: c,
            slope: 0.0,
        }
    }

    pub fn at(&self, v: f64) -> f64 {
        self.intercept + self.slope * v
    }
}

/// Zero-mean transform `g(eta)` linking the coefficients to the first-stage
/// error.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependenceShape {
    /// `eta - 0.5`
    #[default]
    Linear,
    /// `sin(2 pi eta)`
    Sine,
    /// piecewise constant `-1.5, -0.5, 0.5, 1.5` on the quartiles of `eta`
    Step4,
}

impl DependenceShape {
    pub fn eval(self, eta: f64) -> f64 {
        match self {
            DependenceShape::Linear => eta - 0.5,
            DependenceShape::Sine => (2.0 * std::f64::consts::PI * eta).sin(),
            DependenceShape::Step4 => {
                let bin = ((eta * 4.0).floor() as i64).clamp(0, 3);
                bin as f64 - 1.5
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    /// `E[e]`, length J.
    pub mean: Vec<f64>,
    /// `sigma`, scale of the independent normal noise on each coefficient.
    pub noise_scale: f64,
    /// `rho`, loading of every coefficient on `g(eta)`.
    pub dependence: f64,
    #[serde(default)]
    pub shape: DependenceShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub design: DesignKind,
    pub p: BasisSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument: Option<Instrument>,
    /// One entry per instrument code (triangular designs).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub first_stage: Vec<FirstStage>,
    pub heterogeneity: Heterogeneity,
    /// Treatment probabilities as functions of `V`: one entry for binary
    /// designs, T entries for multi-treatment designs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub propensity: Vec<Affine>,
    /// Emit the true control variable as the `v` column. Defaults to false for
    /// triangular designs and true for treatment designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observe_v: Option<bool>,
    #[serde(default)]
    pub seed: u64,
}

impl DgpConfig {
    pub fn observes_v(&self) -> bool {
        self.observe_v
            .unwrap_or(!matches!(self.design, DesignKind::Triangular))
    }

    pub fn validate(&self) -> Result<()> {
        self.p.validate()?;
        let j = self.p.dimension();
        let het = &self.heterogeneity;
        if het.mean.len() != j {
            return Err(Error::InvalidConfig(format!(
                "heterogeneity mean has length {}, basis dimension is {j}",
                het.mean.len()
            )));
        }
        if het.mean.iter().any(|m| !m.is_finite())
            || !het.dependence.is_finite()
            || !(het.noise_scale.is_finite() && het.noise_scale >= 0.0)
        {
            return Err(Error::InvalidConfig(
                "heterogeneity parameters must be finite with noise_scale >= 0".into(),
            ));
        }
        match self.design {
            DesignKind::Triangular => {
                if self.p.input_dim() != 1 || matches!(self.p, BasisSpec::TreatmentDummies { .. }) {
                    return Err(Error::InvalidConfig(
                        "triangular designs need a scalar-input basis for p".into(),
                    ));
                }
                let inst = self.instrument.as_ref().ok_or_else(|| {
                    Error::InvalidConfig("triangular design needs an instrument".into())
                })?;
                let probs = &inst.probabilities;
                if probs.is_empty() || probs.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
                    return Err(Error::InvalidConfig(
                        "instrument probabilities must be strictly positive".into(),
                    ));
                }
                if (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidConfig(
                        "instrument probabilities must sum to 1".into(),
                    ));
                }
                if self.first_stage.len() != probs.len() {
                    return Err(Error::InvalidConfig(format!(
                        "first_stage has {} entries, instrument has {} support points",
                        self.first_stage.len(),
                        probs.len()
                    )));
                }
                if self
                    .first_stage
                    .iter()
                    .any(|f| !f.intercept.is_finite() || !(f.slope > 0.0 && f.slope.is_finite()))
                {
                    return Err(Error::InvalidConfig(
                        "first stage must be strictly increasing in eta (slope > 0)".into(),
                    ));
                }
            }
            DesignKind::BinaryTreatment => {
                let ok_basis = matches!(self.p, BasisSpec::Power { dim: 2 })
                    || matches!(self.p, BasisSpec::TreatmentDummies { treatments: 1 });
                if !ok_basis {
                    return Err(Error::InvalidConfig(
                        "binary treatment designs use p = power:2 or treatment_dummies:1".into(),
                    ));
                }
                if self.propensity.len() != 1 {
                    return Err(Error::InvalidConfig(
                        "binary treatment design needs exactly one propensity function".into(),
                    ));
                }
                let p = self.propensity[0];
                for v in [0.0, 1.0] {
                    let pv = p.at(v);
                    if !(0.0..=1.0).contains(&pv) {
                        return Err(Error::InvalidConfig(format!(
                            "propensity {pv} at v = {v} outside [0, 1]"
                        )));
                    }
                }
            }
            DesignKind::MultiTreatment => {
                let BasisSpec::TreatmentDummies { treatments } = self.p else {
                    return Err(Error::InvalidConfig(
                        "multi-treatment designs use p = treatment_dummies:T".into(),
                    ));
                };
                if self.propensity.len() != treatments {
                    return Err(Error::InvalidConfig(format!(
                        "expected {treatments} propensity functions, got {}",
                        self.propensity.len()
                    )));
                }
                // affine in v, so checking the endpoints covers [0, 1]
                for v in [0.0, 1.0] {
                    let probs: Vec<f64> = self.propensity.iter().map(|p| p.at(v)).collect();
                    if probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                        return Err(Error::InvalidConfig(format!(
                            "negative treatment probability at v = {v}"
                        )));
                    }
                    if probs.iter().sum::<f64>() > 1.0 + 1e-12 {
                        return Err(Error::InvalidConfig(format!(
                            "treatment probabilities sum above 1 at v = {v}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Analytic ground truth for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub p: BasisSpec,
    pub mean_epsilon: Vec<f64>,
    /// `mu(t) - mu(0)` for treatment designs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ate: Option<Vec<f64>>,
    pub dependence: f64,
    pub shape: DependenceShape,
}

impl GroundTruth {
    pub fn from_config(config: &DgpConfig) -> Result<Self> {
        config.validate()?;
        let mu = &config.heterogeneity.mean;
        let ate = match config.design {
            DesignKind::Triangular => None,
            DesignKind::BinaryTreatment => {
                let one = vec![1.0; config.p.input_dim()];
                let zero = vec![0.0; config.p.input_dim()];
                Some(vec![dot(&config.p.eval_p(&one)?, mu) - dot(&config.p.eval_p(&zero)?, mu)])
            }
            DesignKind::MultiTreatment => {
                let t = config.p.input_dim();
                let base = dot(&config.p.eval_p(&vec![0.0; t])?, mu);
                let mut effects = Vec::with_capacity(t);
                for s in 0..t {
                    let mut x = vec![0.0; t];
                    x[s] = 1.0;
                    effects.push(dot(&config.p.eval_p(&x)?, mu) - base);
                }
                Some(effects)
            }
        };
        Ok(GroundTruth {
            p: config.p.clone(),
            mean_epsilon: mu.clone(),
            ate,
            dependence: config.heterogeneity.dependence,
            shape: config.heterogeneity.shape,
        })
    }

    /// `q0(v) = E[e | V = v]`.
    pub fn q0(&self, v: f64) -> Vec<f64> {
        let shift = self.dependence * self.shape.eval(v);
        self.mean_epsilon.iter().map(|m| m + shift).collect()
    }

    /// Control regression function `p(x)' q0(v)`.
    pub fn crf(&self, x: &[f64], v: f64) -> Result<f64> {
        Ok(dot(&self.p.eval_p(x)?, &self.q0(v)))
    }
}

/// `p(x)' E[e]`.
pub fn true_asf(truth: &GroundTruth, x: &[f64]) -> Result<f64> {
    Ok(dot(&truth.p.eval_p(x)?, &truth.mean_epsilon))
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub data: Dataset,
    pub truth: GroundTruth,
    /// True first-stage error / control variable for every row.
    pub eta: Vec<f64>,
}

/// Draws `n` rows using `config.seed`.
pub fn simulate(config: &DgpConfig, n: usize) -> Result<Simulation> {
    simulate_seeded(config, n, config.seed)
}

/// Draws `n` rows from a ChaCha20 stream keyed by `seed`.
pub fn simulate_seeded(config: &DgpConfig, n: usize, seed: u64) -> Result<Simulation> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample size must be positive".into()));
    }
    let truth = GroundTruth::from_config(config)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let het = &config.heterogeneity;
    let j = config.p.dimension();
    let x_cols = config.p.input_dim();

    let mut y = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n * x_cols);
    let mut z = matches!(config.design, DesignKind::Triangular).then(|| Vec::with_capacity(n));
    let mut eta = Vec::with_capacity(n);
    let mut eps = vec![0.0; j];
    let mut x_row = vec![0.0; x_cols];

    for _ in 0..n {
        let code = match &config.instrument {
            Some(inst) if config.design == DesignKind::Triangular => {
                Some(draw_categorical(&mut rng, &inst.probabilities))
            }
            _ => None,
        };
        let e: f64 = rng.random();
        let shift = het.dependence * het.shape.eval(e);
        for (slot, mean) in eps.iter_mut().zip(&het.mean) {
            let nu: f64 = rng.sample(StandardNormal);
            *slot = mean + shift + het.noise_scale * nu;
        }
        match config.design {
            DesignKind::Triangular => {
                let fs = config.first_stage[code.expect("triangular draws z")];
                x_row[0] = fs.intercept + fs.slope * e;
            }
            DesignKind::BinaryTreatment => {
                let u: f64 = rng.random();
                x_row[0] = if u < config.propensity[0].at(e) { 1.0 } else { 0.0 };
            }
            DesignKind::MultiTreatment => {
                let u: f64 = rng.random();
                x_row.iter_mut().for_each(|v| *v = 0.0);
                let mut acc = 0.0;
                for (t, p) in config.propensity.iter().enumerate() {
                    acc += p.at(e);
                    if u < acc {
                        x_row[t] = 1.0;
                        break;
                    }
                }
            }
        }
        let p = config.p.eval_p(&x_row)?;
        y.push(dot(&p, &eps));
        x.extend_from_slice(&x_row);
        if let (Some(z), Some(code)) = (z.as_mut(), code) {
            z.push(code as u32);
        }
        eta.push(e);
    }

    let v = config.observes_v().then(|| eta.clone());
    let data = Dataset::new(y, x, x_cols, z, v)?;
    Ok(Simulation { data, truth, eta })
}

fn draw_categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return m;
        }
    }
    probs.len() - 1
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{ks_uniform, pearson};

    pub(crate) fn triangular(mean: Vec<f64>, rho: f64, sigma: f64) -> DgpConfig {
        DgpConfig {
            design: DesignKind::Triangular,
            p: BasisSpec::power(mean.len()),
            instrument: Some(Instrument {
                probabilities: vec![0.5, 0.5],
            }),
            first_stage: vec![
                FirstStage {
                    intercept: 0.0,
                    slope: 1.0,
                },
                FirstStage {
                    intercept: 1.0,
                    slope: 1.0,
                },
            ],
            heterogeneity: Heterogeneity {
                mean,
                noise_scale: sigma,
                dependence: rho,
                shape: DependenceShape::Linear,
            },
            propensity: vec![],
            observe_v: Some(true),
            seed: 11,
        }
    }

    fn binary(mean: Vec<f64>, p: Affine) -> DgpConfig {
        DgpConfig {
            design: DesignKind::BinaryTreatment,
            p: BasisSpec::power(2),
            instrument: None,
            first_stage: vec![],
            heterogeneity: Heterogeneity {
                mean,
                noise_scale: 1.0,
                dependence: 0.5,
                shape: DependenceShape::Linear,
            },
            propensity: vec![p],
            observe_v: None,
            seed: 3,
        }
    }

    #[test]
    fn binary_ate_is_treatment_coefficient_mean() {
        let truth = GroundTruth::from_config(&binary(vec![1.0, 2.0], Affine::constant(0.5))).unwrap();
        assert_eq!(truth.ate, Some(vec![2.0]));
    }

    #[test]
    fn multi_ate_per_treatment() {
        let config = DgpConfig {
            design: DesignKind::MultiTreatment,
            p: BasisSpec::treatment_dummies(2),
            propensity: vec![Affine::constant(0.3), Affine::constant(0.3)],
            ..binary(vec![1.0, 2.0, -1.0], Affine::constant(0.5))
        };
        let truth = GroundTruth::from_config(&config).unwrap();
        assert_eq!(truth.ate, Some(vec![2.0, -1.0]));
        let sim = simulate(&config, 2000).unwrap();
        sim.data.validate_mutually_exclusive().unwrap();
    }

    #[test]
    fn degenerate_heterogeneity_is_exact() {
        let sim = simulate(&triangular(vec![1.0, 2.0], 0.0, 0.0), 500).unwrap();
        let x = sim.data.x_scalar().unwrap();
        for (y, x) in sim.data.y().iter().zip(x) {
            assert!((y - (1.0 + 2.0 * x)).abs() < 1e-12);
        }
    }

    #[test]
    fn instrument_frequency_within_three_standard_errors() {
        let n = 10_000;
        let sim = simulate(&triangular(vec![1.0, 2.0], 0.5, 1.0), n).unwrap();
        let share = sim.data.z().unwrap().iter().filter(|&&z| z == 0).count() as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((share - 0.5).abs() < 3.0 * se, "share {share}");
    }

    #[test]
    fn true_asf_examples() {
        let truth = GroundTruth::from_config(&triangular(vec![1.0, 2.0], 0.0, 0.0)).unwrap();
        assert_eq!(true_asf(&truth, &[3.0]).unwrap(), 7.0);
        let truth = GroundTruth::from_config(&triangular(vec![1.0, 2.0, 0.5], 0.0, 0.0)).unwrap();
        assert_eq!(true_asf(&truth, &[2.0]).unwrap(), 7.0);
        let truth = GroundTruth::from_config(&triangular(vec![0.0, 0.0], 0.0, 0.0)).unwrap();
        for x in [-2.0, 0.0, 5.0] {
            assert_eq!(true_asf(&truth, &[x]).unwrap(), 0.0);
        }
        assert!(true_asf(&truth, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn eta_is_independent_of_instrument() {
        let n = 10_000;
        let sim = simulate(&triangular(vec![1.0, 2.0], 0.5, 1.0), n).unwrap();
        let z: Vec<f64> = sim.data.z().unwrap().iter().map(|&z| z as f64).collect();
        let r = pearson(&z, &sim.eta);
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "corr {r}");
    }

    #[test]
    fn endogeneity_is_present_when_rho_nonzero() {
        // recover e_2 from the noiseless shift: with sigma = 0, e_2 = mu_2 + rho g(eta)
        let config = triangular(vec![1.0, 2.0], 1.0, 0.0);
        let sim = simulate(&config, 5000).unwrap();
        let eps2: Vec<f64> = sim.eta.iter().map(|&e| 2.0 + (e - 0.5)).collect();
        let r = pearson(sim.data.x_scalar().unwrap(), &eps2);
        assert!(r > 0.3, "corr {r}");
    }

    #[test]
    fn identical_seed_is_bit_identical() {
        let config = triangular(vec![1.0, 2.0], 0.5, 1.0);
        let a = simulate(&config, 300).unwrap();
        let b = simulate(&config, 300).unwrap();
        assert_eq!(a.data, b.data);
        let c = simulate_seeded(&config, 300, 12).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn emitted_v_is_uniform() {
        let sim = simulate(&triangular(vec![1.0, 2.0], 0.5, 1.0), 10_000).unwrap();
        let ks = ks_uniform(sim.data.v().unwrap());
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = triangular(vec![1.0, 2.0], 0.5, 1.0);
        c.first_stage[1].slope = 0.0;
        assert!(simulate(&c, 10).is_err());

        let mut c = triangular(vec![1.0, 2.0], 0.5, 1.0);
        c.instrument = Some(Instrument {
            probabilities: vec![0.7, 0.7],
        });
        assert!(c.validate().is_err());

        let mut c = triangular(vec![1.0, 2.0], 0.5, 1.0);
        c.heterogeneity.mean = vec![1.0];
        assert!(c.validate().is_err());

        let c = triangular(vec![1.0, 2.0], 0.5, 1.0);
        assert!(simulate(&c, 0).is_err());

        let c = DgpConfig {
            design: DesignKind::MultiTreatment,
            p: BasisSpec::treatment_dummies(2),
            propensity: vec![Affine::constant(0.6), Affine::constant(0.6)],
            ..binary(vec![1.0, 2.0, -1.0], Affine::constant(0.5))
        };
        assert!(c.validate().is_err());
        assert!(binary(vec![1.0, 2.0], Affine { intercept: 0.5, slope: 0.8 })
            .validate()
            .is_err());
    }

    #[test]
    fn config_json_roundtrip() {
        let config = triangular(vec![1.0, 2.0], 0.5, 1.0);
        let json = serde_json::to_string(&config).unwrap();
        let back: DgpConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn dependence_shapes_have_zero_mean() {
        for shape in [DependenceShape::Linear, DependenceShape::Sine, DependenceShape::Step4] {
            let m = 4000;
            let mean: f64 = (0..m).map(|i| shape.eval((i as f64 + 0.5) / m as f64)).sum::<f64>()
                / m as f64;
            assert!(mean.abs() < 1e-9, "{shape:?} {mean}");
        }
    }
}
