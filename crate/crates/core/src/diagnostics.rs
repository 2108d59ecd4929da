//! Numerical checks of the identification conditions: nonsingularity of
//! `E[p(X) p(X)' | V]`, propensity overlap for a binary treatment, the
//! mutually-exclusive-treatments criterion, the support-cardinality
//! necessary condition for discrete instruments, and the quantile-shift
//! condition for a binary instrument.
//!
//! Conditioning on `V` uses equal-probability bins of `v_hat`. A condition
//! that must hold with probability one is checked in every bin holding at
//! least `max(J, min_bin_count)` observations; smaller bins are reported but
//! excluded from verdicts.
//!
//! When the dataset carries a discrete instrument, each bin also gets the
//! matrix `sum_z Pr(z) p(Q(v|z)) p(Q(v|z))'` evaluated at the bin midpoint.
//! This is the conditional second moment at a single `v`, so its rank is
//! exactly the number of distinct quantiles; the binned sample average mixes
//! nearby `v` values and is never exactly rank deficient.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::control::{ControlEstimate, InstrumentCells};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues, weighted_outer_sum};
use crate::sieve::SINGULARITY_FACTOR;
use crate::stats::{quantile_edges, std_dev};

/// Tolerance on the algebraic identity `det = P(1 - P)` for binary treatments.
pub const VARIANCE_IDENTITY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative eigenvalue floor `eps_id` (and absolute slack floor for the
    /// mutually exclusive criterion).
    pub eps_id: f64,
    /// Overlap margin `eps_p` on the per-bin propensity.
    pub eps_p: f64,
    /// Quantile separation `delta_q` as a multiple of the sample sd of X.
    pub delta_q_rel: f64,
    pub min_bin_count: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eps_id: 1e-6,
            eps_p: 1e-6,
            delta_q_rel: 1e-6,
            min_bin_count: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub status: Status,
    pub detail: String,
}

impl Verdict {
    fn new(status: Status, detail: impl Into<String>) -> Self {
        Verdict {
            status,
            detail: detail.into(),
        }
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRecord {
    pub index: usize,
    pub v_lower: f64,
    pub v_upper: f64,
    pub count: usize,
    pub adequate: bool,
    /// Sample average of `p(x_i) p(x_i)'` over the bin.
    pub second_moment: Vec<Vec<f64>>,
    /// Eigenvalues of `second_moment`, largest first.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub determinant: f64,
    /// Instrument-quantile conditional second moment at the bin midpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile_moment: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantile_eigenvalues: Option<Vec<f64>>,
    /// `Q_hat(v_mid | z)` per instrument code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_cardinality: Option<usize>,
    /// Per-treatment frequencies in the bin (propensity for binary X).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity: Option<Vec<f64>>,
}

impl BinRecord {
    pub fn v_mid(&self) -> f64 {
        0.5 * (self.v_lower + self.v_upper)
    }

    /// Eigenvalues of the matrix used for verdicts: the instrument-quantile
    /// moment when available, else the binned average.
    pub fn verdict_eigenvalues(&self) -> &[f64] {
        self.quantile_eigenvalues.as_deref().unwrap_or(&self.eigenvalues)
    }

    /// Number of eigenvalues above `1e-10 * J * largest`.
    pub fn numerical_rank(&self) -> usize {
        let ev = self.verdict_eigenvalues();
        let tau = rank_threshold(ev);
        ev.iter().filter(|&&l| l > tau).count()
    }
}

fn rank_threshold(ev: &[f64]) -> f64 {
    SINGULARITY_FACTOR * ev.len() as f64 * ev.first().copied().unwrap_or(0.0).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub schema_version: u32,
    pub n: usize,
    pub j: usize,
    pub n_bins: usize,
    pub p_spec: BasisSpec,
    pub tolerances: Tolerances,
    pub per_bin: Vec<BinRecord>,
    pub overall_verdicts: BTreeMap<String, Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_profile: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub propensity_profile: Option<Vec<Vec<f64>>>,
}

impl DiagnosticsReport {
    pub fn verdict(&self, name: &str) -> Option<&Verdict> {
        self.overall_verdicts.get(name)
    }

    /// Plot-ready per-bin eigenvalue profile.
    pub fn write_profile_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["bin", "v_lower", "v_upper", "count", "adequate"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.j).map(|k| format!("eig{k}")));
        header.push("min_eigenvalue".into());
        header.push("determinant".into());
        let has_quantile = self.per_bin.iter().any(|b| b.quantile_eigenvalues.is_some());
        if has_quantile {
            header.extend((1..=self.j).map(|k| format!("quantile_eig{k}")));
            header.push("support_cardinality".into());
        }
        let n_prop = self
            .per_bin
            .iter()
            .filter_map(|b| b.propensity.as_ref().map(Vec::len))
            .max()
            .unwrap_or(0);
        header.extend((1..=n_prop).map(|t| format!("propensity{t}")));
        wtr.write_record(&header)?;
        for b in &self.per_bin {
            let mut rec = vec![
                b.index.to_string(),
                b.v_lower.to_string(),
                b.v_upper.to_string(),
                b.count.to_string(),
                b.adequate.to_string(),
            ];
            for k in 0..self.j {
                rec.push(b.eigenvalues.get(k).map(f64::to_string).unwrap_or_default());
            }
            rec.push(b.min_eigenvalue.to_string());
            rec.push(b.determinant.to_string());
            if has_quantile {
                for k in 0..self.j {
                    rec.push(
                        b.quantile_eigenvalues
                            .as_ref()
                            .and_then(|e| e.get(k))
                            .map(f64::to_string)
                            .unwrap_or_default(),
                    );
                }
                rec.push(b.support_cardinality.map(|c| c.to_string()).unwrap_or_default());
            }
            for t in 0..n_prop {
                rec.push(
                    b.propensity
                        .as_ref()
                        .and_then(|p| p.get(t))
                        .map(f64::to_string)
                        .unwrap_or_default(),
                );
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Equal-probability bins of `v`: returns `n_bins + 1` edges and the bin of
/// every row.
pub fn quantile_bins(v: &[f64], n_bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if v.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    if n_bins == 0 || n_bins > v.len() {
        return Err(Error::InvalidConfig(format!(
            "n_bins must be in 1..={}, got {n_bins}",
            v.len()
        )));
    }
    let edges = quantile_edges(v, n_bins);
    let interior = &edges[1..n_bins];
    let bins = v.iter().map(|&x| interior.partition_point(|&e| e <= x)).collect();
    Ok((edges, bins))
}

/// `sum_z Pr(z) p(Q(v|z)) p(Q(v|z))'`.
pub fn instrument_conditional_moment(
    cells: &InstrumentCells,
    p_spec: &BasisSpec,
    v: f64,
) -> Result<DMatrix<f64>> {
    let j = p_spec.dimension();
    let rows = cells
        .quantiles_at(v)
        .into_iter()
        .map(|(_, q, share)| Ok((share, p_spec.eval_p(&[q])?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(weighted_outer_sum(j, rows.iter().map(|(w, p)| (*w, p.as_slice()))))
}

/// Number of clusters of `values` whose consecutive sorted gaps exceed `delta`.
pub fn distinct_count(values: &[f64], delta: f64) -> usize {
    if values.is_empty() {
        return 0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    1 + sorted.windows(2).filter(|w| w[1] - w[0] > delta).count()
}

/// Sample average of `p p'`; zero for an empty iterator.
fn mean_outer<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> DMatrix<f64> {
    let mut count = 0usize;
    let sum = weighted_outer_sum(dim, rows.inspect(|_| count += 1).map(|p| (1.0, p)));
    if count == 0 {
        sum
    } else {
        sum / count as f64
    }
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect())
        .collect()
}

struct Binned {
    edges: Vec<f64>,
    members: Vec<Vec<usize>>,
}

fn bin_rows(control: &ControlEstimate, n_bins: usize) -> Result<Binned> {
    let (edges, bins) = quantile_bins(&control.v_hat, n_bins)?;
    let mut members = vec![Vec::new(); n_bins];
    for (i, b) in bins.into_iter().enumerate() {
        members[b].push(i);
    }
    Ok(Binned { edges, members })
}

fn check_aligned(data: &Dataset, control: &ControlEstimate) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidData("empty dataset".into()));
    }
    if control.n() != data.n() {
        return Err(Error::InvalidData(format!(
            "control has {} rows, dataset has {}",
            control.n(),
            data.n()
        )));
    }
    Ok(())
}

fn min_count(tol: &Tolerances, j: usize) -> usize {
    tol.min_bin_count.max(j)
}

/// Per-bin conditional second moments of `p(X)` and the `assumption2`
/// verdict (nonsingular in every adequately populated bin).
pub fn conditional_second_moment(
    data: &Dataset,
    control: &ControlEstimate,
    p_spec: &BasisSpec,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<DiagnosticsReport> {
    check_aligned(data, control)?;
    p_spec.validate()?;
    if p_spec.input_dim() != data.x_cols() {
        return Err(Error::DimensionMismatch {
            expected: p_spec.input_dim(),
            got: data.x_cols(),
        });
    }
    let j = p_spec.dimension();
    let binned = bin_rows(control, n_bins)?;
    let cells = match (data.z(), data.x_cols()) {
        (Some(_), 1) => Some(InstrumentCells::from_data(data)?),
        _ => None,
    };

    let p_rows: Vec<Vec<f64>> = (0..data.n())
        .map(|i| p_spec.eval_p(data.x_row(i)))
        .collect::<Result<_>>()?;

    let mut per_bin = Vec::with_capacity(n_bins);
    for (index, rows) in binned.members.iter().enumerate() {
        let count = rows.len();
        let moment = if count == 0 {
            DMatrix::zeros(j, j)
        } else {
            mean_outer(j, rows.iter().map(|&i| p_rows[i].as_slice()))
        };
        let eigenvalues = sym_eigenvalues(&moment);
        let (v_lower, v_upper) = (binned.edges[index], binned.edges[index + 1]);
        let v_mid = 0.5 * (v_lower + v_upper);
        let (quantile_moment, quantile_eigenvalues, quantiles) = match &cells {
            Some(cells) => {
                let qm = instrument_conditional_moment(cells, p_spec, v_mid)?;
                let qe = sym_eigenvalues(&qm);
                let qs = cells.quantiles_at(v_mid).into_iter().map(|q| q.1).collect();
                (Some(to_rows(&qm)), Some(qe), Some(qs))
            }
            None => (None, None, None),
        };
        per_bin.push(BinRecord {
            index,
            v_lower,
            v_upper,
            count,
            adequate: count >= min_count(tol, j),
            min_eigenvalue: *eigenvalues.last().expect("j >= 1"),
            determinant: moment.determinant(),
            second_moment: to_rows(&moment),
            eigenvalues,
            quantile_moment,
            quantile_eigenvalues,
            quantiles,
            support_cardinality: None,
            propensity: None,
        });
    }

    let mut report = DiagnosticsReport {
        schema_version: 1,
        n: data.n(),
        j,
        n_bins,
        p_spec: p_spec.clone(),
        tolerances: *tol,
        per_bin,
        overall_verdicts: BTreeMap::new(),
        support_profile: None,
        propensity_profile: None,
    };
    let verdict = assumption2_verdict(&report.per_bin, tol);
    report.overall_verdicts.insert("assumption2".into(), verdict);
    Ok(report)
}

fn assumption2_verdict(bins: &[BinRecord], tol: &Tolerances) -> Verdict {
    let adequate: Vec<&BinRecord> = bins.iter().filter(|b| b.adequate).collect();
    if adequate.is_empty() {
        return Verdict::new(Status::NotApplicable, "no adequately populated bins");
    }
    let failing: Vec<usize> = adequate
        .iter()
        .filter(|b| {
            let ev = b.verdict_eigenvalues();
            let top = ev[0];
            !(top > 0.0 && *ev.last().unwrap() >= tol.eps_id * top)
        })
        .map(|b| b.index)
        .collect();
    let source = if adequate[0].quantile_eigenvalues.is_some() {
        "instrument-quantile second moment"
    } else {
        "binned second moment"
    };
    if failing.is_empty() {
        Verdict::new(
            Status::Pass,
            format!("{source} nonsingular in all {} adequate bins", adequate.len()),
        )
    } else {
        Verdict::new(
            Status::Fail,
            format!(
                "{source} singular in {} of {} adequate bins: {:?}",
                failing.len(),
                adequate.len(),
                failing
            ),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapCheck {
    pub verdict: Verdict,
    /// Per-bin `P_hat = mean(X)`.
    pub propensity: Vec<f64>,
    pub counts: Vec<usize>,
    /// `max |det M - P_hat (1 - P_hat)|` over non-empty bins.
    pub identity_error: f64,
}

/// Propensity overlap `eps_p <= P_hat(V) <= 1 - eps_p` in every adequate bin.
pub fn check_binary_overlap(
    data: &Dataset,
    control: &ControlEstimate,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<OverlapCheck> {
    check_aligned(data, control)?;
    if !data.is_binary_treatment() {
        return Err(Error::InvalidData("overlap check needs a binary scalar x".into()));
    }
    let x = data.x_scalar()?;
    let binned = bin_rows(control, n_bins)?;
    let p_spec = BasisSpec::power(2);
    let mut propensity = Vec::with_capacity(n_bins);
    let mut counts = Vec::with_capacity(n_bins);
    let mut identity_error: f64 = 0.0;
    let mut failing = Vec::new();
    let mut adequate = 0;
    for (b, rows) in binned.members.iter().enumerate() {
        counts.push(rows.len());
        if rows.is_empty() {
            propensity.push(f64::NAN);
            continue;
        }
        let p_hat = rows.iter().map(|&i| x[i]).sum::<f64>() / rows.len() as f64;
        let ps: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| p_spec.eval_p(&[x[i]]))
            .collect::<Result<_>>()?;
        let m = mean_outer(2, ps.iter().map(Vec::as_slice));
        let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        identity_error = identity_error.max((det - p_hat * (1.0 - p_hat)).abs());
        propensity.push(p_hat);
        if rows.len() >= min_count(tol, 2) {
            adequate += 1;
            if !(p_hat >= tol.eps_p && p_hat <= 1.0 - tol.eps_p) {
                failing.push((b, p_hat));
            }
        }
    }
    let verdict = if adequate == 0 {
        Verdict::new(Status::NotApplicable, "no adequately populated bins")
    } else if failing.is_empty() {
        Verdict::new(
            Status::Pass,
            format!("propensity inside [{}, {}] in all {adequate} adequate bins", tol.eps_p, 1.0 - tol.eps_p),
        )
    } else {
        let list: Vec<String> = failing
            .iter()
            .map(|(b, p)| format!("bin {b} (P_hat = {p})"))
            .collect();
        Verdict::new(Status::Fail, format!("no overlap in {}", list.join(", ")))
    };
    Ok(OverlapCheck {
        verdict,
        propensity,
        counts,
        identity_error,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusiveBin {
    pub count: usize,
    pub frequencies: Vec<f64>,
    /// `1 - sum_s f_s`.
    pub slack: f64,
    /// Every treatment frequency strictly positive and the bin adequate.
    pub applicable: bool,
    pub frequency_pass: bool,
    pub eigen_pass: bool,
    pub min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusiveCheck {
    pub verdict: Verdict,
    pub agreement: Verdict,
    pub bins: Vec<ExclusiveBin>,
}

/// Frequency criterion `1 - sum_s f_s >= eps_id` per bin, cross-checked
/// against the minimum eigenvalue of the binned second moment of
/// `(1, X(1), ..., X(T))`.
pub fn check_mutually_exclusive(
    data: &Dataset,
    control: &ControlEstimate,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<ExclusiveCheck> {
    check_aligned(data, control)?;
    data.validate_mutually_exclusive()?;
    let t = data.x_cols();
    let p_spec = BasisSpec::treatment_dummies(t);
    let binned = bin_rows(control, n_bins)?;
    let mut bins = Vec::with_capacity(n_bins);
    for rows in &binned.members {
        let count = rows.len();
        let mut freq = vec![0.0; t];
        for &i in rows {
            for (f, x) in freq.iter_mut().zip(data.x_row(i)) {
                *f += x;
            }
        }
        if count > 0 {
            freq.iter_mut().for_each(|f| *f /= count as f64);
        }
        let slack = 1.0 - freq.iter().sum::<f64>();
        let ps: Vec<Vec<f64>> = rows
            .iter()
            .map(|&i| p_spec.eval_p(data.x_row(i)))
            .collect::<Result<_>>()?;
        let m = mean_outer(t + 1, ps.iter().map(Vec::as_slice));
        let ev = sym_eigenvalues(&m);
        let min_eigenvalue = *ev.last().unwrap();
        bins.push(ExclusiveBin {
            count,
            applicable: count >= min_count(tol, t + 1) && freq.iter().all(|&f| f > 0.0),
            frequency_pass: slack >= tol.eps_id,
            eigen_pass: ev[0] > 0.0 && min_eigenvalue >= tol.eps_id * ev[0],
            frequencies: freq,
            slack,
            min_eigenvalue,
        });
    }
    let applicable: Vec<(usize, &ExclusiveBin)> =
        bins.iter().enumerate().filter(|(_, b)| b.applicable).collect();
    let (verdict, agreement) = if applicable.is_empty() {
        (
            Verdict::new(
                Status::NotApplicable,
                "no adequate bin has every treatment frequency positive",
            ),
            Verdict::new(Status::NotApplicable, "no applicable bins"),
        )
    } else {
        let failing: Vec<usize> = applicable
            .iter()
            .filter(|(_, b)| !b.frequency_pass)
            .map(|(i, _)| *i)
            .collect();
        let disagree: Vec<usize> = applicable
            .iter()
            .filter(|(_, b)| b.frequency_pass != b.eigen_pass)
            .map(|(i, _)| *i)
            .collect();
        let verdict = if failing.is_empty() {
            Verdict::new(
                Status::Pass,
                format!("1 - sum of treatment frequencies >= {} in all {} applicable bins", tol.eps_id, applicable.len()),
            )
        } else {
            Verdict::new(
                Status::Fail,
                format!("no untreated mass in bins {failing:?}"),
            )
        };
        let agreement = if disagree.is_empty() {
            Verdict::new(
                Status::Pass,
                format!("frequency and eigenvalue criteria agree in all {} applicable bins", applicable.len()),
            )
        } else {
            Verdict::new(
                Status::Fail,
                format!("frequency and eigenvalue criteria disagree in bins {disagree:?}"),
            )
        };
        (verdict, agreement)
    };
    Ok(ExclusiveCheck {
        verdict,
        agreement,
        bins,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportCheck {
    pub verdict: Verdict,
    /// Estimated `|Q(v)|` per bin.
    pub support_profile: Vec<usize>,
    /// Per-bin `Q_hat(v_mid | z)` in code order.
    pub quantiles: Vec<Vec<f64>>,
    pub adequate: Vec<bool>,
    pub delta_q: f64,
}

impl SupportCheck {
    /// Share of adequate bins with `|Q_hat(v)| < j`.
    pub fn deficient_share(&self, j: usize) -> f64 {
        let adequate: Vec<usize> = self
            .support_profile
            .iter()
            .zip(&self.adequate)
            .filter(|(_, a)| **a)
            .map(|(c, _)| *c)
            .collect();
        if adequate.is_empty() {
            return 0.0;
        }
        adequate.iter().filter(|&&c| c < j).count() as f64 / adequate.len() as f64
    }
}

fn delta_q(data: &Dataset, tol: &Tolerances) -> Result<f64> {
    Ok(tol.delta_q_rel * std_dev(data.x_scalar()?))
}

/// Number of distinct instrument quantiles `|Q_hat(v)|` at each bin midpoint;
/// fails when any adequate bin has fewer than `J`.
pub fn count_instrument_support(
    data: &Dataset,
    control: &ControlEstimate,
    p_spec: &BasisSpec,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<SupportCheck> {
    check_aligned(data, control)?;
    let cells = InstrumentCells::from_data(data)?;
    let j = p_spec.dimension();
    let delta = delta_q(data, tol)?;
    let binned = bin_rows(control, n_bins)?;
    let mut support_profile = Vec::with_capacity(n_bins);
    let mut quantiles = Vec::with_capacity(n_bins);
    let mut adequate = Vec::with_capacity(n_bins);
    for (b, rows) in binned.members.iter().enumerate() {
        let v_mid = 0.5 * (binned.edges[b] + binned.edges[b + 1]);
        let qs: Vec<f64> = cells.quantiles_at(v_mid).into_iter().map(|q| q.1).collect();
        support_profile.push(distinct_count(&qs, delta));
        quantiles.push(qs);
        adequate.push(rows.len() >= min_count(tol, j));
    }
    let n_adequate = adequate.iter().filter(|a| **a).count();
    let deficient: Vec<usize> = (0..n_bins)
        .filter(|&b| adequate[b] && support_profile[b] < j)
        .collect();
    let verdict = if n_adequate == 0 {
        Verdict::new(Status::NotApplicable, "no adequately populated bins")
    } else if deficient.is_empty() {
        Verdict::new(
            Status::Pass,
            format!("|Q(v)| >= J = {j} in all {n_adequate} adequate bins ({} instrument values)", cells.len()),
        )
    } else {
        Verdict::new(
            Status::Fail,
            format!(
                "|Q(v)| < J = {j} in {} of {n_adequate} adequate bins; {} instrument support point(s) cannot identify {j} coefficient functions",
                deficient.len(),
                cells.len()
            ),
        )
    };
    Ok(SupportCheck {
        verdict,
        support_profile,
        quantiles,
        adequate,
        delta_q: delta,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryInstrumentCheck {
    pub verdict: Verdict,
    /// `pass => nonsingular` consistency against both eigenvalue routes.
    pub consistency: Verdict,
    /// `|Q_hat(v|z_1) - Q_hat(v|z_2)|` per bin.
    pub gaps: Vec<f64>,
    /// `Var(Q_hat(v|Z))` under the instrument shares, per bin.
    pub quantile_variance: Vec<f64>,
    pub delta_q: f64,
}

/// Quantile-shift condition for a binary instrument with `p = (1, X)`.
pub fn check_binary_instrument(
    data: &Dataset,
    control: &ControlEstimate,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<BinaryInstrumentCheck> {
    check_aligned(data, control)?;
    let cells = InstrumentCells::from_data(data)?;
    if cells.len() != 2 {
        return Err(Error::NotApplicable(format!(
            "binary instrument check needs exactly 2 instrument values, found {}",
            cells.len()
        )));
    }
    let p_spec = BasisSpec::power(2);
    let report = conditional_second_moment(data, control, &p_spec, n_bins, tol)?;
    let delta = delta_q(data, tol)?;
    let mut gaps = Vec::with_capacity(n_bins);
    let mut quantile_variance = Vec::with_capacity(n_bins);
    let mut failing = Vec::new();
    let mut inconsistent = Vec::new();
    let mut n_adequate = 0;
    for bin in &report.per_bin {
        let q = cells.quantiles_at(bin.v_mid());
        let gap = (q[0].1 - q[1].1).abs();
        let mean = q[0].2 * q[0].1 + q[1].2 * q[1].1;
        let var = q[0].2 * (q[0].1 - mean).powi(2) + q[1].2 * (q[1].1 - mean).powi(2);
        gaps.push(gap);
        quantile_variance.push(var);
        if !bin.adequate {
            continue;
        }
        n_adequate += 1;
        if gap > delta {
            let eig_ok = |ev: &[f64]| ev[0] > 0.0 && ev[1] >= tol.eps_id * ev[0];
            let binned_ok = eig_ok(&bin.eigenvalues);
            let quantile_ok = bin.quantile_eigenvalues.as_deref().is_some_and(eig_ok);
            if !(binned_ok && quantile_ok) {
                inconsistent.push(bin.index);
            }
        } else {
            failing.push(bin.index);
        }
    }
    let verdict = if n_adequate == 0 {
        Verdict::new(Status::NotApplicable, "no adequately populated bins")
    } else if failing.is_empty() {
        Verdict::new(
            Status::Pass,
            format!("instrument shifts the conditional quantile by more than {delta:.3e} in all {n_adequate} adequate bins"),
        )
    } else {
        Verdict::new(
            Status::Fail,
            format!("conditional quantiles coincide across instrument values in bins {failing:?}"),
        )
    };
    let consistency = if inconsistent.is_empty() {
        Verdict::new(Status::Pass, "every bin passing the quantile-gap check is nonsingular")
    } else {
        Verdict::new(
            Status::Fail,
            format!("quantile gap present but second moment singular in bins {inconsistent:?}"),
        )
    };
    Ok(BinaryInstrumentCheck {
        verdict,
        consistency,
        gaps,
        quantile_variance,
        delta_q: delta,
    })
}

/// Runs every applicable diagnostic and assembles one report. Failed
/// conditions are recorded as verdicts, never returned as errors.
pub fn diagnose(
    data: &Dataset,
    control: &ControlEstimate,
    p_spec: &BasisSpec,
    n_bins: usize,
    tol: &Tolerances,
) -> Result<DiagnosticsReport> {
    let mut report = conditional_second_moment(data, control, p_spec, n_bins, tol)?;

    if data.x_cols() == 1 && data.is_binary_treatment() {
        let overlap = check_binary_overlap(data, control, n_bins, tol)?;
        let identity = if overlap.identity_error <= VARIANCE_IDENTITY_TOL {
            Verdict::new(
                Status::Pass,
                format!("max |det - P(1-P)| = {:.3e}", overlap.identity_error),
            )
        } else {
            Verdict::new(
                Status::Fail,
                format!("max |det - P(1-P)| = {:.3e} exceeds {VARIANCE_IDENTITY_TOL:e}", overlap.identity_error),
            )
        };
        for (bin, p) in report.per_bin.iter_mut().zip(&overlap.propensity) {
            bin.propensity = Some(vec![*p]);
        }
        report.propensity_profile = Some(overlap.propensity.iter().map(|p| vec![*p]).collect());
        report.overall_verdicts.insert("overlap".into(), overlap.verdict);
        report.overall_verdicts.insert("variance_identity".into(), identity);
    }

    if data.x_cols() > 1 {
        match check_mutually_exclusive(data, control, n_bins, tol) {
            Ok(check) => {
                for (bin, ex) in report.per_bin.iter_mut().zip(&check.bins) {
                    bin.propensity = Some(ex.frequencies.clone());
                }
                report.propensity_profile =
                    Some(check.bins.iter().map(|b| b.frequencies.clone()).collect());
                report.overall_verdicts.insert("mutually_exclusive".into(), check.verdict);
                report
                    .overall_verdicts
                    .insert("mutually_exclusive_eigen_agreement".into(), check.agreement);
            }
            Err(Error::InvalidData(msg)) => {
                report.overall_verdicts.insert(
                    "mutually_exclusive".into(),
                    Verdict::new(Status::NotApplicable, msg),
                );
            }
            Err(e) => return Err(e),
        }
    }

    if data.z().is_some() && data.x_cols() == 1 {
        let support = count_instrument_support(data, control, p_spec, n_bins, tol)?;
        for (bin, c) in report.per_bin.iter_mut().zip(&support.support_profile) {
            bin.support_cardinality = Some(*c);
        }
        report.support_profile = Some(support.support_profile);
        report.overall_verdicts.insert("instrument_support".into(), support.verdict);

        let two_codes = data.instrument_codes().len() == 2;
        if two_codes && *p_spec == BasisSpec::power(2) {
            let check = check_binary_instrument(data, control, n_bins, tol)?;
            report.overall_verdicts.insert("binary_instrument".into(), check.verdict);
            report
                .overall_verdicts
                .insert("binary_instrument_consistency".into(), check.consistency);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{estimate_control, passthrough_control};
    use proptest::prelude::*;

    fn binary_rows(pattern: &[f64], reps: usize) -> (Dataset, ControlEstimate) {
        let n = pattern.len() * reps;
        let x: Vec<f64> = (0..n).map(|i| pattern[i % pattern.len()]).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let data = Dataset::scalar(vec![0.0; n], x, None, Some(v)).unwrap();
        let control = passthrough_control(&data).unwrap();
        (data, control)
    }

    #[test]
    fn binary_half_frequency_matrix() {
        let (data, control) = binary_rows(&[0.0, 1.0], 100);
        let report =
            conditional_second_moment(&data, &control, &BasisSpec::power(2), 1, &Tolerances::default()).unwrap();
        let bin = &report.per_bin[0];
        assert_eq!(bin.second_moment, vec![vec![1.0, 0.5], vec![0.5, 0.5]]);
        assert!((bin.determinant - 0.25).abs() < 1e-15);
        // closed form: (1.5 - sqrt(1.25)) / 2
        let closed = (1.5 - 1.25_f64.sqrt()) / 2.0;
        assert!((bin.min_eigenvalue - closed).abs() < 1e-12);
        assert!((bin.min_eigenvalue - 0.191).abs() < 1e-3);
        assert!(report.verdict("assumption2").unwrap().passed());
    }

    #[test]
    fn constant_x_bin_is_rank_one() {
        let (data, control) = binary_rows(&[1.0], 50);
        let report =
            conditional_second_moment(&data, &control, &BasisSpec::power(2), 1, &Tolerances::default()).unwrap();
        assert!(report.per_bin[0].min_eigenvalue.abs() < 1e-14);
        assert_eq!(report.verdict("assumption2").unwrap().status, Status::Fail);
    }

    #[test]
    fn bin_errors() {
        let (data, control) = binary_rows(&[0.0, 1.0], 5);
        let tol = Tolerances::default();
        assert!(conditional_second_moment(&data, &control, &BasisSpec::power(2), 11, &tol).is_err());
        assert!(conditional_second_moment(&data, &control, &BasisSpec::power(2), 0, &tol).is_err());
        let report = conditional_second_moment(&data, &control, &BasisSpec::power(2), 2, &tol).unwrap();
        // bins of 5 rows are under-populated
        assert!(report.per_bin.iter().all(|b| !b.adequate));
        assert_eq!(report.per_bin.iter().map(|b| b.count).sum::<usize>(), 10);
        assert_eq!(report.verdict("assumption2").unwrap().status, Status::NotApplicable);
    }

    #[test]
    fn overlap_pass_and_fail() {
        let tol = Tolerances::default();
        let (data, control) = binary_rows(&[0.0, 1.0], 200);
        let check = check_binary_overlap(&data, &control, 4, &tol).unwrap();
        assert!(check.verdict.passed());
        assert!(check.propensity.iter().all(|&p| p == 0.5));

        // last quarter always treated
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| if i >= 300 { 1.0 } else { (i % 2) as f64 }).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let data = Dataset::scalar(vec![0.0; n], x, None, Some(v)).unwrap();
        let control = passthrough_control(&data).unwrap();
        let check = check_binary_overlap(&data, &control, 4, &tol).unwrap();
        assert_eq!(check.verdict.status, Status::Fail);
        assert!(check.verdict.detail.contains("bin 3"), "{}", check.verdict.detail);
        assert!(check.identity_error <= VARIANCE_IDENTITY_TOL);

        let nonbinary = Dataset::scalar(vec![0.0; 2], vec![0.0, 0.5], None, Some(vec![0.2, 0.4])).unwrap();
        let control = passthrough_control(&nonbinary).unwrap();
        assert!(check_binary_overlap(&nonbinary, &control, 1, &tol).is_err());
    }

    fn exclusive_bin(freqs: &[f64], count: usize) -> (Dataset, ControlEstimate) {
        let t = freqs.len();
        let mut x = Vec::with_capacity(count * t);
        let mut assigned = 0;
        for (s, f) in freqs.iter().enumerate() {
            let m = (f * count as f64).round() as usize;
            for _ in 0..m {
                let mut row = vec![0.0; t];
                row[s] = 1.0;
                x.extend(row);
            }
            assigned += m;
        }
        for _ in assigned..count {
            x.extend(vec![0.0; t]);
        }
        let v: Vec<f64> = (0..count).map(|i| (i as f64 + 0.5) / count as f64).collect();
        let data = Dataset::new(vec![0.0; count], x, t, None, Some(v)).unwrap();
        let control = passthrough_control(&data).unwrap();
        (data, control)
    }

    #[test]
    fn exclusive_frequency_criterion() {
        let tol = Tolerances::default();
        let (data, control) = exclusive_bin(&[0.3, 0.4], 100);
        let check = check_mutually_exclusive(&data, &control, 1, &tol).unwrap();
        assert!((check.bins[0].slack - 0.3).abs() < 1e-12);
        assert!(check.verdict.passed());
        assert!(check.agreement.passed());

        let (data, control) = exclusive_bin(&[0.6, 0.4], 100);
        let check = check_mutually_exclusive(&data, &control, 1, &tol).unwrap();
        assert!(check.bins[0].slack.abs() < 1e-12);
        assert_eq!(check.verdict.status, Status::Fail);
        assert!(!check.bins[0].eigen_pass);
        assert!(check.agreement.passed());

        let (data, control) = exclusive_bin(&[0.0, 0.4], 100);
        let check = check_mutually_exclusive(&data, &control, 1, &tol).unwrap();
        assert_eq!(check.verdict.status, Status::NotApplicable);

        let bad = Dataset::new(vec![0.0], vec![1.0, 1.0], 2, None, Some(vec![0.5])).unwrap();
        let control = passthrough_control(&bad).unwrap();
        assert!(check_mutually_exclusive(&bad, &control, 1, &tol).is_err());
    }

    /// Deterministic triangular sample: every cell sees the same eta grid.
    fn grid_triangular(shifts: &[(f64, f64)], per_cell: usize) -> Dataset {
        let mut x = Vec::new();
        let mut z = Vec::new();
        for i in 0..per_cell {
            let eta = (i as f64 + 0.5) / per_cell as f64;
            for (code, (a, b)) in shifts.iter().enumerate() {
                x.push(a + b * eta);
                z.push(code as u32);
            }
        }
        let n = x.len();
        Dataset::scalar(vec![0.0; n], x, Some(z), None).unwrap()
    }

    #[test]
    fn support_cardinality_examples() {
        let tol = Tolerances::default();
        let data = grid_triangular(&[(0.0, 1.0), (1.0, 1.0)], 500);
        let control = estimate_control(&data).unwrap();
        let j2 = count_instrument_support(&data, &control, &BasisSpec::power(2), 10, &tol).unwrap();
        assert!(j2.support_profile.iter().all(|&c| c == 2));
        assert!(j2.verdict.passed());
        let j3 = count_instrument_support(&data, &control, &BasisSpec::power(3), 10, &tol).unwrap();
        assert_eq!(j3.verdict.status, Status::Fail);
        assert_eq!(j3.deficient_share(3), 1.0);

        // irrelevant instrument: identical first stage in both cells
        let same = grid_triangular(&[(0.5, 2.0), (0.5, 2.0)], 500);
        let control = estimate_control(&same).unwrap();
        let check = count_instrument_support(&same, &control, &BasisSpec::power(2), 10, &tol).unwrap();
        assert!(check.support_profile.iter().all(|&c| c == 1));
        assert_eq!(check.verdict.status, Status::Fail);

        let no_z = Dataset::scalar(vec![0.0; 2], vec![1.0, 2.0], None, Some(vec![0.3, 0.6])).unwrap();
        let control = passthrough_control(&no_z).unwrap();
        assert!(count_instrument_support(&no_z, &control, &BasisSpec::power(2), 1, &tol).is_err());
    }

    #[test]
    fn rank_is_bounded_by_support_cardinality() {
        let data = grid_triangular(&[(0.0, 1.0), (1.0, 0.5)], 400);
        let control = estimate_control(&data).unwrap();
        let report = diagnose(&data, &control, &BasisSpec::power(3), 10, &Tolerances::default()).unwrap();
        for bin in &report.per_bin {
            let card = bin.support_cardinality.unwrap();
            assert!(card < 3);
            assert!(bin.numerical_rank() <= card);
            let qe = bin.quantile_eigenvalues.as_ref().unwrap();
            assert!(qe[2] < rank_threshold(qe));
        }
        assert_eq!(report.verdict("assumption2").unwrap().status, Status::Fail);
        assert_eq!(report.verdict("instrument_support").unwrap().status, Status::Fail);
    }

    #[test]
    fn binary_instrument_shift_and_coincidence() {
        let tol = Tolerances::default();
        let data = grid_triangular(&[(0.0, 1.0), (1.0, 1.0)], 500);
        let control = estimate_control(&data).unwrap();
        let check = check_binary_instrument(&data, &control, 10, &tol).unwrap();
        assert!(check.verdict.passed());
        assert!(check.consistency.passed());
        assert!(check.gaps.iter().all(|g| (g - 1.0).abs() < 1e-12));
        // determinant of the quantile moment equals Var(Q(v|Z))
        let report = conditional_second_moment(&data, &control, &BasisSpec::power(2), 10, &tol).unwrap();
        for (bin, var) in report.per_bin.iter().zip(&check.quantile_variance) {
            let qm = bin.quantile_moment.as_ref().unwrap();
            let det = qm[0][0] * qm[1][1] - qm[0][1] * qm[1][0];
            assert!((det - var).abs() < 1e-12);
            assert!((var - 0.25).abs() < 1e-12);
        }

        let same = grid_triangular(&[(0.0, 1.0), (0.0, 1.0)], 500);
        let control = estimate_control(&same).unwrap();
        let check = check_binary_instrument(&same, &control, 10, &tol).unwrap();
        assert_eq!(check.verdict.status, Status::Fail);
        assert!(check.gaps.iter().all(|&g| g == 0.0));

        let three = grid_triangular(&[(0.0, 1.0), (1.0, 1.0), (2.0, 1.0)], 100);
        let control = estimate_control(&three).unwrap();
        assert!(check_binary_instrument(&three, &control, 4, &tol).is_err());
    }

    #[test]
    fn diagnose_binary_treatment_reports_overlap_failure_as_verdict() {
        let n = 400;
        let x: Vec<f64> = (0..n).map(|i| if i >= 300 { 1.0 } else { (i % 2) as f64 }).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let data = Dataset::scalar(vec![0.0; n], x, None, Some(v)).unwrap();
        let control = passthrough_control(&data).unwrap();
        let report = diagnose(&data, &control, &BasisSpec::power(2), 4, &Tolerances::default()).unwrap();
        assert_eq!(report.verdict("overlap").unwrap().status, Status::Fail);
        assert!(report.verdict("variance_identity").unwrap().passed());
        let mut csv = Vec::new();
        report.write_profile_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("bin,v_lower,v_upper,count,adequate,eig1,eig2"));
    }

    #[test]
    fn distinct_count_clusters() {
        assert_eq!(distinct_count(&[1.0, 1.0, 2.0], 0.0), 2);
        assert_eq!(distinct_count(&[1.0, 1.0 + 1e-9, 2.0], 1e-6), 2);
        assert_eq!(distinct_count(&[], 0.0), 0);
    }

    proptest! {
        #[test]
        fn second_moments_are_symmetric_psd(
            xs in proptest::collection::vec(-3.0f64..3.0, 40..200),
            bins in 1usize..5,
        ) {
            let n = xs.len();
            let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % n) as f64 / n as f64).collect();
            let data = Dataset::scalar(vec![0.0; n], xs, None, Some(v)).unwrap();
            let control = passthrough_control(&data).unwrap();
            let report = conditional_second_moment(&data, &control, &BasisSpec::power(3), bins, &Tolerances::default()).unwrap();
            prop_assert_eq!(report.per_bin.iter().map(|b| b.count).sum::<usize>(), n);
            for bin in &report.per_bin {
                let m = &bin.second_moment;
                for a in 0..3 {
                    for b in 0..3 {
                        prop_assert!((m[a][b] - m[b][a]).abs() <= 1e-12);
                    }
                }
                prop_assert!(bin.min_eigenvalue >= -1e-10);
            }
        }

        /// Theorem-4 style equivalence on exact frequency matrices.
        #[test]
        fn exclusive_criterion_matches_eigenvalues(
            raw in proptest::collection::vec(0.01f64..1.0, 2..=3),
            saturate in proptest::bool::ANY,
            scale in 0.0f64..1.0,
        ) {
            let total: f64 = raw.iter().sum();
            let target = if saturate { 1.0 } else { scale };
            let f: Vec<f64> = raw.iter().map(|r| r / total * target).collect();
            prop_assume!(f.iter().all(|&x| x > 0.0));
            let t = f.len();
            let mut m = DMatrix::<f64>::zeros(t + 1, t + 1);
            m[(0, 0)] = 1.0;
            for s in 0..t {
                m[(0, s + 1)] = f[s];
                m[(s + 1, 0)] = f[s];
                m[(s + 1, s + 1)] = f[s];
            }
            let ev = sym_eigenvalues(&m);
            let slack = 1.0 - f.iter().sum::<f64>();
            let eps = Tolerances::default().eps_id;
            let freq_pass = slack >= eps;
            let eigen_pass = ev[t] >= eps * ev[0];
            // the two thresholds only disagree for slack within a tiny band
            if slack.abs() < 1e-12 || slack > 1e-3 {
                prop_assert_eq!(freq_pass, eigen_pass);
            }
        }
    }
}
