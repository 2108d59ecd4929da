//! Basis systems for the outcome functions `p(x)` and the control sieve `psi(v)`.
//!
//! A [`BasisSpec`] is a declarative description; evaluation is a pure function
//! of the spec and the input point. Entries are never orthonormalized so the
//! coefficient layout `b = (b_1', ..., b_J')'` stays aligned with the
//! kronecker design row.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Degree of the B-spline basis (cubic).
pub const BSPLINE_DEGREE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BasisSpec {
    /// `(1, x, x^2, ..., x^{dim-1})`.
    Power { dim: usize },
    /// Cubic B-splines on `[lower, upper]` with an open knot vector.
    /// `knots` are the interior knots; when absent they are uniform.
    Bspline {
        dim: usize,
        lower: f64,
        upper: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        knots: Option<Vec<f64>>,
    },
    /// One-hot bin membership. `edges` holds `dim + 1` non-decreasing cut
    /// points; without edges the bins split `[0, 1]` into equal widths.
    Indicator {
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges: Option<Vec<f64>>,
    },
    /// `(1, x(1), ..., x(T))` for a vector of treatment dummies.
    TreatmentDummies { treatments: usize },
}

impl BasisSpec {
    pub fn power(dim: usize) -> Self {
        BasisSpec::Power { dim }
    }

    pub fn bspline(dim: usize, lower: f64, upper: f64) -> Self {
        BasisSpec::Bspline {
            dim,
            lower,
            upper,
            knots: None,
        }
    }

    pub fn indicator(dim: usize) -> Self {
        BasisSpec::Indicator { dim, edges: None }
    }

    pub fn treatment_dummies(treatments: usize) -> Self {
        BasisSpec::TreatmentDummies { treatments }
    }

    /// Number of basis functions (J for `p`, K for `psi`).
    pub fn dimension(&self) -> usize {
        match self {
            BasisSpec::Power { dim }
            | BasisSpec::Bspline { dim, .. }
            | BasisSpec::Indicator { dim, .. } => *dim,
            BasisSpec::TreatmentDummies { treatments } => treatments + 1,
        }
    }

    /// Length of the input point accepted by [`BasisSpec::eval_p`].
    pub fn input_dim(&self) -> usize {
        match self {
            BasisSpec::TreatmentDummies { treatments } => *treatments,
            _ => 1,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            BasisSpec::Power { .. } => "power",
            BasisSpec::Bspline { .. } => "bspline",
            BasisSpec::Indicator { .. } => "indicator",
            BasisSpec::TreatmentDummies { .. } => "treatment_dummies",
        }
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self, BasisSpec::Power { .. } | BasisSpec::Bspline { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BasisSpec::Power { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidBasis("power basis needs dim >= 1".into()));
                }
            }
            BasisSpec::Bspline {
                dim,
                lower,
                upper,
                knots,
            } => {
                if *dim < BSPLINE_DEGREE + 1 {
                    return Err(Error::InvalidBasis(format!(
                        "cubic bspline basis needs dim >= {}, got {dim}",
                        BSPLINE_DEGREE + 1
                    )));
                }
                if !(lower.is_finite() && upper.is_finite() && lower < upper) {
                    return Err(Error::InvalidBasis(format!(
                        "bspline domain [{lower}, {upper}] is not a proper interval"
                    )));
                }
                if let Some(knots) = knots {
                    let expected = dim - (BSPLINE_DEGREE + 1);
                    if knots.len() != expected {
                        return Err(Error::InvalidBasis(format!(
                            "bspline of dim {dim} needs {expected} interior knots, got {}",
                            knots.len()
                        )));
                    }
                    if knots.iter().any(|k| !(*k > *lower && *k < *upper)) {
                        return Err(Error::InvalidBasis(
                            "bspline knots must lie strictly inside the domain".into(),
                        ));
                    }
                    if knots.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(Error::InvalidBasis(
                            "bspline knots must be strictly increasing".into(),
                        ));
                    }
                }
            }
            BasisSpec::Indicator { dim, edges } => {
                if *dim == 0 {
                    return Err(Error::InvalidBasis("indicator basis needs dim >= 1".into()));
                }
                if let Some(edges) = edges {
                    if edges.len() != dim + 1 {
                        return Err(Error::InvalidBasis(format!(
                            "indicator basis of dim {dim} needs {} edges, got {}",
                            dim + 1,
                            edges.len()
                        )));
                    }
                    if edges.iter().any(|e| !e.is_finite())
                        || edges.windows(2).any(|w| w[0] > w[1])
                        || edges[0] >= edges[*dim]
                    {
                        return Err(Error::InvalidBasis(
                            "indicator edges must be finite and non-decreasing".into(),
                        ));
                    }
                }
            }
            BasisSpec::TreatmentDummies { treatments } => {
                if *treatments == 0 {
                    return Err(Error::InvalidBasis(
                        "treatment_dummies needs at least one treatment".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the outcome basis `p(x)`.
    pub fn eval_p(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite basis input".into()));
        }
        match self {
            BasisSpec::TreatmentDummies { .. } => {
                let mut out = Vec::with_capacity(x.len() + 1);
                out.push(1.0);
                out.extend_from_slice(x);
                Ok(out)
            }
            _ => self.eval_scalar(x[0]),
        }
    }

    /// Evaluates the control sieve `psi^K(v)` for `v` in `[0, 1]`.
    pub fn eval_psi(&self, v: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::OutOfDomain {
                value: v,
                lower: 0.0,
                upper: 1.0,
            });
        }
        if let BasisSpec::TreatmentDummies { .. } = self {
            return Err(Error::InvalidBasis(
                "treatment_dummies cannot be used as a control sieve".into(),
            ));
        }
        self.validate()?;
        self.eval_scalar(v)
    }

    /// Derivative `d p(x) / dx` for scalar-input differentiable bases.
    pub fn derivative(&self, x: f64) -> Result<Vec<f64>> {
        self.validate()?;
        if !x.is_finite() {
            return Err(Error::InvalidData("non-finite basis input".into()));
        }
        match self {
            BasisSpec::Power { dim } => Ok((0..*dim)
                .map(|j| if j == 0 { 0.0 } else { j as f64 * x.powi(j as i32 - 1) })
                .collect()),
            BasisSpec::Bspline {
                dim, lower, upper, ..
            } => {
                check_domain(x, *lower, *upper)?;
                let knots = self.full_knots();
                Ok(bspline_derivative(&knots, *dim, x))
            }
            _ => Err(Error::NotApplicable(format!(
                "{} basis is not differentiable in x",
                self.kind_name()
            ))),
        }
    }

    /// Returns an indicator spec with the given bin edges frozen in.
    /// Other kinds are returned unchanged.
    pub fn with_edges(&self, edges: Vec<f64>) -> Self {
        match self {
            BasisSpec::Indicator { dim, .. } => BasisSpec::Indicator {
                dim: *dim,
                edges: Some(edges),
            },
            other => other.clone(),
        }
    }

    pub fn edges(&self) -> Option<&[f64]> {
        match self {
            BasisSpec::Indicator {
                edges: Some(edges), ..
            } => Some(edges),
            _ => None,
        }
    }

    /// Index of the indicator bin containing `v`; `None` for other kinds.
    pub fn bin_index(&self, v: f64) -> Option<usize> {
        match self {
            BasisSpec::Indicator { dim, edges } => Some(match edges {
                Some(edges) => edges[1..*dim].partition_point(|&e| e <= v),
                None => ((v * *dim as f64).floor().max(0.0) as usize).min(dim - 1),
            }),
            _ => None,
        }
    }

    fn eval_scalar(&self, x: f64) -> Result<Vec<f64>> {
        match self {
            BasisSpec::Power { dim } => {
                let mut out = Vec::with_capacity(*dim);
                let mut acc = 1.0;
                for _ in 0..*dim {
                    out.push(acc);
                    acc *= x;
                }
                Ok(out)
            }
            BasisSpec::Bspline {
                dim, lower, upper, ..
            } => {
                check_domain(x, *lower, *upper)?;
                let knots = self.full_knots();
                Ok(bspline_values(&knots, *dim, x))
            }
            BasisSpec::Indicator { dim, edges } => {
                let (lo, hi) = match edges {
                    Some(e) => (e[0], e[*dim]),
                    None => (0.0, 1.0),
                };
                check_domain(x, lo, hi)?;
                let mut out = vec![0.0; *dim];
                out[self.bin_index(x).expect("indicator")] = 1.0;
                Ok(out)
            }
            BasisSpec::TreatmentDummies { .. } => unreachable!("handled by eval_p"),
        }
    }

    /// Full open knot vector: `degree + 1` copies of each boundary around the
    /// interior knots.
    fn full_knots(&self) -> Vec<f64> {
        let BasisSpec::Bspline {
            dim,
            lower,
            upper,
            knots,
        } = self
        else {
            return Vec::new();
        };
        let interior = dim - (BSPLINE_DEGREE + 1);
        let mut full = Vec::with_capacity(dim + BSPLINE_DEGREE + 1);
        full.extend(std::iter::repeat_n(*lower, BSPLINE_DEGREE + 1));
        match knots {
            Some(k) => full.extend_from_slice(k),
            None => full.extend(
                (1..=interior).map(|k| lower + (upper - lower) * k as f64 / (interior + 1) as f64),
            ),
        }
        full.extend(std::iter::repeat_n(*upper, BSPLINE_DEGREE + 1));
        full
    }
}

fn check_domain(x: f64, lower: f64, upper: f64) -> Result<()> {
    if x < lower || x > upper || !x.is_finite() {
        return Err(Error::OutOfDomain {
            value: x,
            lower,
            upper,
        });
    }
    Ok(())
}

fn find_span(knots: &[f64], dim: usize, x: f64) -> usize {
    if x >= knots[dim] {
        return dim - 1;
    }
    // largest i in [degree, dim - 1] with knots[i] <= x
    let upper = knots[BSPLINE_DEGREE..dim].partition_point(|&k| k <= x);
    (BSPLINE_DEGREE + upper).saturating_sub(1).max(BSPLINE_DEGREE)
}

/// Non-zero basis functions of the given degree on `span`, indices
/// `span - degree ..= span`.
fn nonzero_basis(knots: &[f64], span: usize, degree: usize, x: f64) -> Vec<f64> {
    let mut n = vec![0.0; degree + 1];
    let mut left = vec![0.0; degree + 1];
    let mut right = vec![0.0; degree + 1];
    n[0] = 1.0;
    for j in 1..=degree {
        left[j] = x - knots[span + 1 - j];
        right[j] = knots[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { n[r] / denom };
            n[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        n[j] = saved;
    }
    n
}

fn bspline_values(knots: &[f64], dim: usize, x: f64) -> Vec<f64> {
    let span = find_span(knots, dim, x);
    let local = nonzero_basis(knots, span, BSPLINE_DEGREE, x);
    let mut out = vec![0.0; dim];
    for (r, value) in local.into_iter().enumerate() {
        out[span - BSPLINE_DEGREE + r] = value;
    }
    out
}

fn bspline_derivative(knots: &[f64], dim: usize, x: f64) -> Vec<f64> {
    let p = BSPLINE_DEGREE;
    let span = find_span(knots, dim, x);
    let lower = nonzero_basis(knots, span, p - 1, x);
    // degree p-1 function with global index i, zero off the span
    let lower_at = |i: usize| -> f64 {
        if i + (p - 1) < span || i > span {
            0.0
        } else {
            lower[i + (p - 1) - span]
        }
    };
    let mut out = vec![0.0; dim];
    for i in (span - p)..=span {
        let d1 = knots[i + p] - knots[i];
        let d2 = knots[i + p + 1] - knots[i + 1];
        let a = if d1 > 0.0 { lower_at(i) / d1 } else { 0.0 };
        let b = if d2 > 0.0 { lower_at(i + 1) / d2 } else { 0.0 };
        out[i] = p as f64 * (a - b);
    }
    out
}

/// Kronecker regressor `p(x) ⊗ psi(v)`; entry `j * K + k` is `p_j * psi_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow(Vec<f64>);

impl DesignRow {
    pub fn from_parts(p: &[f64], psi: &[f64]) -> Self {
        let mut values = Vec::with_capacity(p.len() * psi.len());
        kron_into(p, psi, &mut values);
        DesignRow(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub(crate) fn kron_into(p: &[f64], psi: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for &pj in p {
        out.extend(psi.iter().map(|&pk| pj * pk));
    }
}

pub fn design_row(p_spec: &BasisSpec, psi_spec: &BasisSpec, x: &[f64], v: f64) -> Result<DesignRow> {
    let p = p_spec.eval_p(x)?;
    let psi = psi_spec.eval_psi(v)?;
    Ok(DesignRow::from_parts(&p, &psi))
}

impl fmt::Display for BasisSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BasisSpec::Power { dim } => write!(f, "power:{dim}"),
            BasisSpec::Bspline {
                dim, lower, upper, ..
            } => write!(f, "bspline:{dim}:{lower}:{upper}"),
            BasisSpec::Indicator { dim, .. } => write!(f, "indicator:{dim}"),
            BasisSpec::TreatmentDummies { treatments } => {
                write!(f, "treatment_dummies:{treatments}")
            }
        }
    }
}

/// Parses `kind:dim` (and `bspline:dim:lower:upper`). For treatment dummies
/// the number is the treatment count T, so the basis has dimension T + 1.
impl FromStr for BasisSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let bad = || Error::InvalidBasis(format!("cannot parse basis '{s}', expected kind:dim"));
        if parts.len() < 2 {
            return Err(bad());
        }
        let dim: usize = parts[1].parse().map_err(|_| bad())?;
        let spec = match (parts[0], parts.len()) {
            ("power", 2) => BasisSpec::power(dim),
            ("indicator", 2) => BasisSpec::indicator(dim),
            ("treatment_dummies" | "dummies", 2) => BasisSpec::treatment_dummies(dim),
            ("bspline", 2) => BasisSpec::bspline(dim, 0.0, 1.0),
            ("bspline", 4) => {
                let lower: f64 = parts[2].parse().map_err(|_| bad())?;
                let upper: f64 = parts[3].parse().map_err(|_| bad())?;
                BasisSpec::bspline(dim, lower, upper)
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}
