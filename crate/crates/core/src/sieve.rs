//! Least-squares fit of the control regression `E[Y | X, V] = p(X)' q0(V)`
//! with `q0_j(v) ≈ b_j' psi(v)`, i.e. a regression of `Y` on the kronecker
//! design `p(X) ⊗ psi(V)`, and the structural objects derived from it.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{kron_into, BasisSpec};
use crate::control::{ControlEstimate, ControlSource};
use crate::dataset::Dataset;
use crate::diagnostics::instrument_conditional_moment;
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sym_eigenvalues};
use crate::simulate::dot;
use crate::stats::quantile_edges;

/// Relative singularity factor: the Gram matrix is treated as singular when
/// its smallest eigenvalue is below `1e-10 * JK * largest eigenvalue`.
pub const SINGULARITY_FACTOR: f64 = 1e-10;

/// Grid size for the instrument-quantile conditional nonsingularity check.
pub const CONDITIONAL_GRID: usize = 20;

const ROW_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    /// `(b_1', ..., b_J')'`, length `J * K`.
    pub b: Vec<f64>,
    pub p_spec: BasisSpec,
    /// Control sieve with any indicator bin edges frozen in.
    pub psi_spec: BasisSpec,
    pub ridge: f64,
    /// Smallest eigenvalue of the unpenalized sample Gram matrix.
    pub gram_min_eigenvalue: f64,
    pub gram_max_eigenvalue: f64,
    /// Smallest relative eigenvalue of `sum_z Pr(z) p(Q(v|z)) p(Q(v|z))'` over a
    /// grid of `v`, when the control was estimated from a discrete instrument.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditional_min_eigenvalue: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_bin_edges: Option<Vec<f64>>,
    /// Mean squared residual on the estimation sample.
    pub in_sample_mse: f64,
}

impl FittedModel {
    pub fn j(&self) -> usize {
        self.p_spec.dimension()
    }

    pub fn k(&self) -> usize {
        self.psi_spec.dimension()
    }

    /// `J x K` coefficient block for outcome basis function `j`.
    pub fn coefficients(&self, j: usize) -> &[f64] {
        let k = self.k();
        &self.b[j * k..(j + 1) * k]
    }

    /// Singularity threshold `tau` used by [`fit`].
    pub fn singularity_threshold(&self) -> f64 {
        SINGULARITY_FACTOR * self.b.len() as f64 * self.gram_max_eigenvalue
    }
}

fn check_inputs(
    data: &Dataset,
    control: &ControlEstimate,
    p_spec: &BasisSpec,
    psi_spec: &BasisSpec,
) -> Result<()> {
    p_spec.validate()?;
    psi_spec.validate()?;
    if matches!(psi_spec, BasisSpec::TreatmentDummies { .. }) {
        return Err(Error::InvalidBasis(
            "treatment_dummies cannot be used as a control sieve".into(),
        ));
    }
    if control.n() != data.n() {
        return Err(Error::InvalidData(format!(
            "control has {} rows, dataset has {}",
            control.n(),
            data.n()
        )));
    }
    if p_spec.input_dim() != data.x_cols() {
        return Err(Error::DimensionMismatch {
            expected: p_spec.input_dim(),
            got: data.x_cols(),
        });
    }
    Ok(())
}

/// Triangular factor of the kronecker design augmented with `y`: returns
/// `R` (`JK x JK`) and `Q'y` such that `X'X = R'R` and `X'y = R'Q'y`.
/// Row blocks are factored in parallel and their `R` factors stacked and
/// refactored in block order, so the result does not depend on the thread
/// count.
fn factor_design(
    data: &Dataset,
    v: &[f64],
    p_spec: &BasisSpec,
    psi_spec: &BasisSpec,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = data.n();
    let m = p_spec.dimension() * psi_spec.dimension();
    let blocks: Vec<DMatrix<f64>> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|block| -> Result<DMatrix<f64>> {
            let start = block * ROW_BLOCK;
            let end = ((block + 1) * ROW_BLOCK).min(n);
            let mut aug = DMatrix::<f64>::zeros(end - start, m + 1);
            let mut row = Vec::with_capacity(m);
            for i in start..end {
                let p = p_spec.eval_p(data.x_row(i))?;
                let psi = psi_spec.eval_psi(v[i])?;
                kron_into(&p, &psi, &mut row);
                for (a, r) in row.iter().enumerate() {
                    aug[(i - start, a)] = *r;
                }
                aug[(i - start, m)] = data.y()[i];
            }
            Ok(aug.qr().r())
        })
        .collect::<Result<_>>()?;

    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut stacked = DMatrix::<f64>::zeros(rows, m + 1);
    let mut at = 0;
    for b in &blocks {
        stacked.rows_mut(at, b.nrows()).copy_from(b);
        at += b.nrows();
    }
    let r_full = stacked.qr().r();
    let r = r_full.view((0, 0), (m, m)).into_owned();
    let qty = r_full.view((0, m), (m, 1)).column(0).into_owned();
    Ok((r, qty))
}

/// Fits `b` by minimizing `(1/n) sum (y - b' r)^2 + ridge * |b|^2`.
///
/// With `ridge = 0` a numerically singular Gram matrix, or (for controls
/// estimated from a discrete instrument) a conditional second moment of
/// `p(X)` given `V` that is singular somewhere on the `v` grid, is reported as
/// [`Error::IdentificationFailure`].
pub fn fit(
    data: &Dataset,
    control: &ControlEstimate,
    p_spec: &BasisSpec,
    psi_spec: &BasisSpec,
    ridge: f64,
) -> Result<FittedModel> {
    check_inputs(data, control, p_spec, psi_spec)?;
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(Error::InvalidConfig(format!("ridge must be >= 0, got {ridge}")));
    }
    let j = p_spec.dimension();
    let k = psi_spec.dimension();
    let m = j * k;
    let n = data.n();
    if n <= m {
        return Err(Error::InvalidData(format!(
            "need more than J*K = {m} observations, got {n}"
        )));
    }

    let v = &control.v_hat;
    let psi_spec = match psi_spec {
        BasisSpec::Indicator { dim, edges: None } => psi_spec.with_edges(quantile_edges(v, *dim)),
        other => other.clone(),
    };
    let (r, qty) = factor_design(data, v, p_spec, &psi_spec)?;
    let scale = 1.0 / n as f64;
    // Gram eigenvalues from the singular values of R, which avoids squaring
    // the conditioning
    let sv = r.singular_values();
    let max = sv.iter().fold(0.0_f64, |a, s| a.max(*s)).powi(2) * scale;
    let min = sv.iter().fold(f64::INFINITY, |a, s| a.min(*s)).powi(2) * scale;
    let tau = SINGULARITY_FACTOR * m as f64 * max;

    let conditional = match (&control.source, &control.cells) {
        (ControlSource::Instrument, Some(cells)) => {
            Some(conditional_check(cells, p_spec)?)
        }
        _ => None,
    };

    if ridge == 0.0 {
        if min < tau || max == 0.0 {
            return Err(Error::IdentificationFailure {
                min_eigenvalue: min,
                threshold: tau,
                context: "sample Gram matrix of p(X) ⊗ psi(V)".into(),
            });
        }
        if let Some(check) = &conditional {
            if let Some(failure) = &check.failure {
                return Err(Error::IdentificationFailure {
                    min_eigenvalue: check.min_relative,
                    threshold: SINGULARITY_FACTOR * j as f64,
                    context: failure.clone(),
                });
            }
        }
    }

    let b = if ridge == 0.0 {
        r.solve_upper_triangular(&qty)
            .ok_or_else(|| Error::IdentificationFailure {
                min_eigenvalue: min,
                threshold: tau,
                context: "triangular factor of p(X) ⊗ psi(V) has a zero pivot".into(),
            })?
    } else {
        let mut penalized = r.transpose() * &r * scale;
        for a in 0..m {
            penalized[(a, a)] += ridge;
        }
        let cross = r.transpose() * &qty * scale;
        solve_spd(&penalized, &cross)
    };
    let b: Vec<f64> = b.iter().copied().collect();

    let mut fitted = FittedModel {
        b,
        p_spec: p_spec.clone(),
        v_bin_edges: psi_spec.edges().map(<[f64]>::to_vec),
        psi_spec,
        ridge,
        gram_min_eigenvalue: min,
        gram_max_eigenvalue: max,
        conditional_min_eigenvalue: conditional.map(|c| c.min_relative),
        n,
        in_sample_mse: f64::NAN,
    };
    fitted.in_sample_mse = residual_mse(&fitted, data, control)?;
    Ok(fitted)
}

struct ConditionalCheck {
    min_relative: f64,
    failure: Option<String>,
}

/// Evaluates `sum_z Pr(z) p(Q(v|z)) p(Q(v|z))'` on a midpoint grid of `v`.
fn conditional_check(
    cells: &crate::control::InstrumentCells,
    p_spec: &BasisSpec,
) -> Result<ConditionalCheck> {
    let j = p_spec.dimension();
    let mut min_relative = f64::INFINITY;
    let mut failure = None;
    for g in 0..CONDITIONAL_GRID {
        let v = (g as f64 + 0.5) / CONDITIONAL_GRID as f64;
        let moment = instrument_conditional_moment(cells, p_spec, v)?;
        let ev = sym_eigenvalues(&moment);
        let top = ev[0];
        let relative = if top > 0.0 { ev[j - 1].max(0.0) / top } else { 0.0 };
        min_relative = min_relative.min(relative);
        if relative < SINGULARITY_FACTOR * j as f64 && failure.is_none() {
            let distinct = crate::diagnostics::distinct_count(
                &cells.quantiles_at(v).iter().map(|q| q.1).collect::<Vec<_>>(),
                0.0,
            );
            failure = Some(format!(
                "E[p(X)p(X)'|V] is singular at v = {v:.3}: {distinct} distinct instrument quantile(s) \
                 for {j} basis functions in p(X); a discrete instrument needs at least as many \
                 support points with distinct conditional quantiles as dim p(X) ({} instrument \
                 support points observed)",
                cells.len()
            ));
        }
    }
    Ok(ConditionalCheck {
        min_relative,
        failure,
    })
}

/// `q_hat_j(v) = b_j' psi(v)`.
pub fn q_hat(fit: &FittedModel, v: f64) -> Result<Vec<f64>> {
    let psi = fit.psi_spec.eval_psi(v)?;
    Ok((0..fit.j()).map(|j| dot(fit.coefficients(j), &psi)).collect())
}

/// Control regression function `p(x)' q_hat(v)`.
pub fn predict_crf(fit: &FittedModel, x: &[f64], v: f64) -> Result<f64> {
    let p = fit.p_spec.eval_p(x)?;
    Ok(dot(&p, &q_hat(fit, v)?))
}

/// `(1/n) sum_i q_hat(v_i)`, the sample analog of `E[q0(V)]`.
pub fn mean_q(fit: &FittedModel, control: &ControlEstimate) -> Result<Vec<f64>> {
    let n = control.n();
    if n == 0 {
        return Err(Error::InvalidData("empty control estimate".into()));
    }
    let mut acc = vec![0.0; fit.j()];
    for &v in &control.v_hat {
        for (a, q) in acc.iter_mut().zip(q_hat(fit, v)?) {
            *a += q;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    Ok(acc)
}

/// Average structural function at `x`.
pub fn asf(fit: &FittedModel, control: &ControlEstimate, x: &[f64]) -> Result<f64> {
    let p = fit.p_spec.eval_p(x)?;
    Ok(dot(&p, &mean_q(fit, control)?))
}

/// `mu(t) - mu(0)` for each treatment; length 1 for a binary treatment.
pub fn ate(fit: &FittedModel, control: &ControlEstimate) -> Result<Vec<f64>> {
    let mq = mean_q(fit, control)?;
    let at = |x: &[f64]| -> Result<f64> { Ok(dot(&fit.p_spec.eval_p(x)?, &mq)) };
    match fit.p_spec {
        BasisSpec::TreatmentDummies { treatments } => {
            let base = at(&vec![0.0; treatments])?;
            (0..treatments)
                .map(|t| {
                    let mut x = vec![0.0; treatments];
                    x[t] = 1.0;
                    Ok(at(&x)? - base)
                })
                .collect()
        }
        BasisSpec::Power { dim: 2 } => Ok(vec![at(&[1.0])? - at(&[0.0])?]),
        _ => Err(Error::NotApplicable(format!(
            "treatment effects need a treatment_dummies or power:2 basis, got {}",
            fit.p_spec
        ))),
    }
}

/// `(1/n) sum_i [d p(x_i)/dx]' q_hat(v_i)`.
pub fn average_derivative(
    fit: &FittedModel,
    data: &Dataset,
    control: &ControlEstimate,
) -> Result<f64> {
    if !fit.p_spec.is_differentiable() {
        return Err(Error::NotApplicable(format!(
            "{} basis is not differentiable in x",
            fit.p_spec.kind_name()
        )));
    }
    let x = data.x_scalar()?;
    if control.n() != x.len() || x.is_empty() {
        return Err(Error::InvalidData("control and data are not aligned".into()));
    }
    let mut acc = 0.0;
    for (xi, &vi) in x.iter().zip(&control.v_hat) {
        acc += dot(&fit.p_spec.derivative(*xi)?, &q_hat(fit, vi)?);
    }
    Ok(acc / x.len() as f64)
}

/// Mean squared residual of `y` against the fitted control regression.
pub fn residual_mse(fit: &FittedModel, data: &Dataset, control: &ControlEstimate) -> Result<f64> {
    let n = data.n();
    let sse: f64 = (0..n)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let r = data.y()[i] - predict_crf(fit, data.x_row(i), control.v_hat[i])?;
            Ok(r * r)
        })
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum();
    Ok(sse / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::passthrough_control;

    fn observed(y: Vec<f64>, x: Vec<f64>, v: Vec<f64>) -> (Dataset, ControlEstimate) {
        let data = Dataset::scalar(y, x, None, Some(v)).unwrap();
        let control = passthrough_control(&data).unwrap();
        (data, control)
    }

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / (1u64 << 53) as f64
    }

    #[test]
    fn noiseless_linear_model_is_reproduced() {
        let mut s = 5;
        let n = 200;
        let x: Vec<f64> = (0..n).map(|_| 3.0 * lcg(&mut s)).collect();
        let v: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = x.iter().map(|x| 1.0 + 2.0 * x).collect();
        let (data, control) = observed(y.clone(), x.clone(), v.clone());
        let fit = fit(&data, &control, &BasisSpec::power(2), &BasisSpec::indicator(2), 0.0).unwrap();
        for i in 0..n {
            let pred = predict_crf(&fit, &[x[i]], control.v_hat[i]).unwrap();
            assert!((pred - y[i]).abs() < 1e-8);
        }
        assert!(fit.in_sample_mse < 1e-16);
        assert!((average_derivative(&fit, &data, &control).unwrap() - 2.0).abs() < 1e-8);
        assert!((asf(&fit, &control, &[1.5]).unwrap() - 4.0).abs() < 1e-8);
    }

    #[test]
    fn too_few_rows_is_an_error() {
        let (data, control) = observed(vec![1.0; 4], vec![0.0, 1.0, 2.0, 3.0], vec![0.1, 0.4, 0.6, 0.9]);
        assert!(matches!(
            fit(&data, &control, &BasisSpec::power(2), &BasisSpec::indicator(2), 0.0),
            Err(Error::InvalidData(_))
        ));
    }

    #[test]
    fn constant_x_within_bins_is_singular() {
        let n = 100;
        let x = vec![2.0; n];
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let (data, control) = observed(x.clone(), x, v);
        let err = fit(&data, &control, &BasisSpec::power(2), &BasisSpec::indicator(2), 0.0).unwrap_err();
        assert!(err.is_identification_failure(), "{err}");
        // ridge is an explicit escape hatch
        let fitted = fit(&data, &control, &BasisSpec::power(2), &BasisSpec::indicator(2), 1e-3).unwrap();
        assert!(fitted.gram_min_eigenvalue < fitted.singularity_threshold());
    }

    #[test]
    fn q_hat_extracts_one_hot_coefficients() {
        let model = FittedModel {
            b: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            p_spec: BasisSpec::power(2),
            psi_spec: BasisSpec::indicator(3),
            ridge: 0.0,
            gram_min_eigenvalue: 1.0,
            gram_max_eigenvalue: 1.0,
            conditional_min_eigenvalue: None,
            n: 10,
            v_bin_edges: None,
            in_sample_mse: 0.0,
        };
        assert_eq!(q_hat(&model, 0.5).unwrap(), vec![2.0, 5.0]);
        assert_eq!(q_hat(&model, 0.9).unwrap(), vec![3.0, 6.0]);
        assert!(q_hat(&model, 1.1).is_err());
        assert_eq!(predict_crf(&model, &[3.0], 0.1).unwrap(), 1.0 + 3.0 * 4.0);

        let zero = FittedModel {
            b: vec![0.0; 6],
            ..model.clone()
        };
        let control = ControlEstimate {
            v_hat: vec![0.2, 0.7],
            cell_counts: Default::default(),
            source: ControlSource::Observed,
            cells: None,
        };
        assert_eq!(q_hat(&zero, 0.3).unwrap(), vec![0.0, 0.0]);
        assert_eq!(asf(&zero, &control, &[4.0]).unwrap(), 0.0);
        let data = Dataset::scalar(vec![0.0; 2], vec![1.0, 2.0], None, None).unwrap();
        assert_eq!(average_derivative(&zero, &data, &control).unwrap(), 0.0);

        // constant-first basis with q = (c, 0)
        let c = FittedModel {
            b: vec![7.0, 7.0, 7.0, 0.0, 0.0, 0.0],
            ..model
        };
        for x in [-1.0, 0.0, 9.0] {
            assert_eq!(predict_crf(&c, &[x], 0.4).unwrap(), 7.0);
        }
    }

    #[test]
    fn ate_needs_treatment_basis() {
        let mut s = 1;
        let n = 100;
        let x: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let v: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let (data, control) = observed(x.clone(), x, v);
        let fitted = fit(&data, &control, &BasisSpec::power(3), &BasisSpec::power(2), 0.0).unwrap();
        assert!(matches!(ate(&fitted, &control), Err(Error::NotApplicable(_))));
    }

    #[test]
    fn dummies_basis_rejects_derivative() {
        let data = Dataset::new(
            vec![1.0, 2.0, 3.0, 1.0, 2.0, 0.5],
            vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0],
            1,
            None,
            Some(vec![0.1, 0.2, 0.3, 0.6, 0.7, 0.8]),
        )
        .unwrap();
        let control = passthrough_control(&data).unwrap();
        let fitted = fit(&data, &control, &BasisSpec::treatment_dummies(1), &BasisSpec::power(1), 0.0).unwrap();
        assert!(average_derivative(&fitted, &data, &control).is_err());
        assert_eq!(ate(&fitted, &control).unwrap().len(), 1);
    }

    #[test]
    fn fit_is_independent_of_thread_count() {
        let mut s = 9;
        let n = 9000;
        let x: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let v: Vec<f64> = (0..n).map(|_| lcg(&mut s)).collect();
        let y: Vec<f64> = x.iter().zip(&v).map(|(x, v)| x * v + lcg(&mut 3)).collect();
        let (data, control) = observed(y, x, v);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit(&data, &control, &BasisSpec::power(2), &BasisSpec::bspline(5, 0.0, 1.0), 0.0).unwrap())
        };
        assert_eq!(run(1), run(4));
    }
}
