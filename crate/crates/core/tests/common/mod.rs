#![allow(dead_code)]

use hetcoef::simulate::{
    Affine, DependenceShape, DesignKind, DgpConfig, FirstStage, Heterogeneity, Instrument,
};
use hetcoef::BasisSpec;

pub fn heterogeneity(mean: Vec<f64>, rho: f64, sigma: f64, shape: DependenceShape) -> Heterogeneity {
    Heterogeneity {
        mean,
        noise_scale: sigma,
        dependence: rho,
        shape,
    }
}

/// `X = a_z + b_z * eta` with equal instrument probabilities.
pub fn triangular(first_stage: &[(f64, f64)], mean: Vec<f64>, rho: f64, sigma: f64) -> DgpConfig {
    let m = first_stage.len();
    DgpConfig {
        design: DesignKind::Triangular,
        p: BasisSpec::power(mean.len()),
        instrument: Some(Instrument {
            probabilities: vec![1.0 / m as f64; m],
        }),
        first_stage: first_stage
            .iter()
            .map(|&(intercept, slope)| FirstStage { intercept, slope })
            .collect(),
        heterogeneity: heterogeneity(mean, rho, sigma, DependenceShape::Linear),
        propensity: Vec::new(),
        observe_v: None,
        seed: 1,
    }
}

/// Binary treatment with propensity `0.2 + 0.6 v` and observed V.
pub fn binary(mean: Vec<f64>, rho: f64, sigma: f64, shape: DependenceShape) -> DgpConfig {
    DgpConfig {
        design: DesignKind::BinaryTreatment,
        p: BasisSpec::power(2),
        instrument: None,
        first_stage: Vec::new(),
        heterogeneity: heterogeneity(mean, rho, sigma, shape),
        propensity: vec![Affine {
            intercept: 0.2,
            slope: 0.6,
        }],
        observe_v: None,
        seed: 1,
    }
}

pub fn multi(mean: Vec<f64>, propensity: Vec<Affine>, rho: f64, sigma: f64) -> DgpConfig {
    DgpConfig {
        design: DesignKind::MultiTreatment,
        p: BasisSpec::treatment_dummies(propensity.len()),
        instrument: None,
        first_stage: Vec::new(),
        heterogeneity: heterogeneity(mean, rho, sigma, DependenceShape::Linear),
        propensity,
        observe_v: None,
        seed: 1,
    }
}
