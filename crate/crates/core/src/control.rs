//! Control variable `V = F_{X|Z}(X | Z)` for discrete instruments.
//!
//! Within each instrument cell the estimate is `(midrank - 0.5) / n_z`, which
//! stays strictly inside `(0, 1)` and is invariant to strictly increasing
//! transforms of `X`.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Clamp applied to an observed control column.
pub const PASSTHROUGH_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSource {
    /// Estimated from per-instrument-cell empirical CDFs.
    Instrument,
    /// Taken from an observed `v` column.
    Observed,
}

/// Sorted treatment values per instrument cell, used for the empirical
/// conditional quantile `Q(v | z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentCells {
    sorted_x: BTreeMap<u32, Vec<f64>>,
    n: usize,
}

impl InstrumentCells {
    /// Groups a scalar treatment column by instrument code.
    pub fn from_data(data: &Dataset) -> Result<Self> {
        let z = data
            .z()
            .ok_or_else(|| Error::InvalidData("dataset has no 'z' column".into()))?;
        let x = data.x_scalar()?;
        let mut sorted_x: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for (&code, &xi) in z.iter().zip(x) {
            if !xi.is_finite() {
                return Err(Error::InvalidData("non-finite x".into()));
            }
            sorted_x.entry(code).or_default().push(xi);
        }
        for xs in sorted_x.values_mut() {
            xs.sort_by(f64::total_cmp);
        }
        Ok(InstrumentCells {
            sorted_x,
            n: data.n(),
        })
    }

    pub fn codes(&self) -> impl Iterator<Item = u32> + '_ {
        self.sorted_x.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.sorted_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted_x.is_empty()
    }

    /// `n_z / n` for every code.
    pub fn shares(&self) -> Vec<(u32, f64)> {
        self.sorted_x
            .iter()
            .map(|(&z, xs)| (z, xs.len() as f64 / self.n as f64))
            .collect()
    }

    /// Empirical quantile inverting the `(rank - 0.5) / n_z` convention:
    /// 1-based position `v * n_z + 0.5`, clamped to `[1, n_z]`, linearly
    /// interpolated between adjacent order statistics.
    pub fn quantile(&self, code: u32, v: f64) -> Option<f64> {
        let xs = self.sorted_x.get(&code)?;
        let n = xs.len();
        let pos = (v * n as f64 + 0.5).clamp(1.0, n as f64);
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        Some(xs[lo - 1] + frac * (xs[hi - 1] - xs[lo - 1]))
    }

    /// Quantiles of every cell at `v`, in code order.
    pub fn quantiles_at(&self, v: f64) -> Vec<(u32, f64, f64)> {
        self.sorted_x
            .iter()
            .map(|(&z, xs)| {
                let q = self.quantile(z, v).expect("code present");
                (z, q, xs.len() as f64 / self.n as f64)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlEstimate {
    pub v_hat: Vec<f64>,
    pub cell_counts: BTreeMap<u32, usize>,
    pub source: ControlSource,
    pub cells: Option<InstrumentCells>,
}

impl ControlEstimate {
    pub fn n(&self) -> usize {
        self.v_hat.len()
    }
}

pub fn estimate_control(data: &Dataset) -> Result<ControlEstimate> {
    let z = data
        .z()
        .ok_or_else(|| Error::InvalidData("control estimation needs a 'z' column".into()))?;
    let x = data.x_scalar()?;
    if let Some(i) = x.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidData(format!("non-finite x in row {i}")));
    }

    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &code) in z.iter().enumerate() {
        members.entry(code).or_default().push(i);
    }
    if let Some((code, rows)) = members.iter().find(|(_, rows)| rows.len() < 2) {
        return Err(Error::InvalidData(format!(
            "instrument cell {code} has {} observation(s); at least 2 are required",
            rows.len()
        )));
    }

    let ranked: Vec<(u32, Vec<(usize, f64)>, Vec<f64>)> = members
        .into_par_iter()
        .map(|(code, rows)| {
            let (assigned, sorted) = cell_ranks(x, &rows);
            (code, assigned, sorted)
        })
        .collect();

    let mut v_hat = vec![0.0; data.n()];
    let mut cell_counts = BTreeMap::new();
    let mut sorted_x = BTreeMap::new();
    for (code, assigned, sorted) in ranked {
        cell_counts.insert(code, sorted.len());
        for (i, v) in assigned {
            v_hat[i] = v;
        }
        sorted_x.insert(code, sorted);
    }
    Ok(ControlEstimate {
        v_hat,
        cell_counts,
        source: ControlSource::Instrument,
        cells: Some(InstrumentCells {
            sorted_x,
            n: data.n(),
        }),
    })
}

/// `(midrank - 0.5) / n_z` for the rows of one cell, plus the sorted values.
fn cell_ranks(x: &[f64], rows: &[usize]) -> (Vec<(usize, f64)>, Vec<f64>) {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let n = order.len();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end share their average
        let midrank = (start + 1 + end) as f64 / 2.0;
        let v = (midrank - 0.5) / n as f64;
        out.extend(order[start..end].iter().map(|&i| (i, v)));
        start = end;
    }
    let sorted = order.iter().map(|&i| x[i]).collect();
    (out, sorted)
}

pub fn passthrough_control(data: &Dataset) -> Result<ControlEstimate> {
    let v = data
        .v()
        .ok_or_else(|| Error::InvalidData("dataset has no 'v' column".into()))?;
    if let Some(bad) = v.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidData(format!("v entry {bad} outside [0, 1]")));
    }
    let v_hat = v
        .iter()
        .map(|v| v.clamp(PASSTHROUGH_CLAMP, 1.0 - PASSTHROUGH_CLAMP))
        .collect();
    let mut cell_counts = BTreeMap::new();
    if let Some(z) = data.z() {
        for &code in z {
            *cell_counts.entry(code).or_insert(0) += 1;
        }
    }
    Ok(ControlEstimate {
        v_hat,
        cell_counts,
        source: ControlSource::Observed,
        cells: None,
    })
}
