//! Columnar sample container and its CSV representation.
//!
//! CSV layout: a header row with `y`, then `x` (scalar treatment) or
//! `x1..xT` (treatment dummies), then optional `z` (integer instrument code)
//! and optional `v` (control variable in `[0, 1]`).

use std::collections::BTreeSet;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: Vec<f64>,
    /// Row-major `n x x_cols`.
    x: Vec<f64>,
    x_cols: usize,
    z: Option<Vec<u32>>,
    v: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        x_cols: usize,
        z: Option<Vec<u32>>,
        v: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if x_cols == 0 {
            return Err(Error::InvalidData("x must have at least one column".into()));
        }
        if x.len() != n * x_cols {
            return Err(Error::InvalidData(format!(
                "x has {} entries, expected {} rows x {} columns",
                x.len(),
                n,
                x_cols
            )));
        }
        if let Some(z) = &z {
            if z.len() != n {
                return Err(Error::InvalidData(format!(
                    "z has length {}, expected {n}",
                    z.len()
                )));
            }
        }
        if let Some(v) = &v {
            if v.len() != n {
                return Err(Error::InvalidData(format!(
                    "v has length {}, expected {n}",
                    v.len()
                )));
            }
            if let Some(bad) = v.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidData(format!("v entry {bad} outside [0, 1]")));
            }
        }
        Ok(Dataset { y, x, x_cols, z, v })
    }

    /// Scalar-treatment convenience constructor.
    pub fn scalar(y: Vec<f64>, x: Vec<f64>, z: Option<Vec<u32>>, v: Option<Vec<f64>>) -> Result<Self> {
        Dataset::new(y, x, 1, z, v)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x_cols(&self) -> usize {
        self.x_cols
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.x_cols..(i + 1) * self.x_cols]
    }

    /// The treatment column when `x` is scalar.
    pub fn x_scalar(&self) -> Result<&[f64]> {
        if self.x_cols != 1 {
            return Err(Error::InvalidData(format!(
                "expected scalar x, dataset has {} x columns",
                self.x_cols
            )));
        }
        Ok(&self.x)
    }

    pub fn z(&self) -> Option<&[u32]> {
        self.z.as_deref()
    }

    pub fn v(&self) -> Option<&[f64]> {
        self.v.as_deref()
    }

    /// Distinct instrument codes in ascending order.
    pub fn instrument_codes(&self) -> Vec<u32> {
        self.z
            .as_ref()
            .map(|z| z.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
            .unwrap_or_default()
    }

    pub fn with_v(mut self, v: Vec<f64>) -> Result<Self> {
        if v.len() != self.n() {
            return Err(Error::InvalidData(format!(
                "v has length {}, expected {}",
                v.len(),
                self.n()
            )));
        }
        if let Some(bad) = v.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidData(format!("v entry {bad} outside [0, 1]")));
        }
        self.v = Some(v);
        Ok(self)
    }

    pub fn is_binary_treatment(&self) -> bool {
        self.x_cols == 1 && self.x.iter().all(|&x| x == 0.0 || x == 1.0)
    }

    /// Checks that every row of x is a 0/1 vector with at most one active
    /// treatment.
    pub fn validate_mutually_exclusive(&self) -> Result<()> {
        for i in 0..self.n() {
            let row = self.x_row(i);
            if row.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(Error::InvalidData(format!(
                    "row {i}: treatment dummies must be 0 or 1"
                )));
            }
            if row.iter().sum::<f64>() > 1.0 {
                return Err(Error::InvalidData(format!(
                    "row {i}: treatments are not mutually exclusive"
                )));
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h == name);

        let y_idx = find("y").ok_or_else(|| Error::InvalidData("missing column 'y'".into()))?;
        let x_idx: Vec<usize> = match find("x") {
            Some(i) => vec![i],
            None => {
                let mut cols = Vec::new();
                while let Some(i) = find(&format!("x{}", cols.len() + 1)) {
                    cols.push(i);
                }
                if cols.is_empty() {
                    return Err(Error::InvalidData("missing column 'x' or 'x1'".into()));
                }
                cols
            }
        };
        let z_idx = find("z");
        let v_idx = find("v");

        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z = z_idx.map(|_| Vec::new());
        let mut v = v_idx.map(|_| Vec::new());
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            let row = line + 2;
            let field = |i: usize| -> Result<f64> {
                let raw = record.get(i).unwrap_or("");
                raw.parse::<f64>().map_err(|_| {
                    Error::InvalidData(format!("row {row}: cannot parse '{raw}' as a number"))
                })
            };
            y.push(field(y_idx)?);
            for &i in &x_idx {
                x.push(field(i)?);
            }
            if let (Some(i), Some(z)) = (z_idx, z.as_mut()) {
                let raw = record.get(i).unwrap_or("");
                let code = raw.parse::<u32>().map_err(|_| {
                    Error::InvalidData(format!(
                        "row {row}: instrument code '{raw}' is not a non-negative integer"
                    ))
                })?;
                z.push(code);
            }
            if let (Some(i), Some(v)) = (v_idx, v.as_mut()) {
                v.push(field(i)?);
            }
        }
        Dataset::new(y, x, x_idx.len(), z, v)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["y".to_string()];
        if self.x_cols == 1 {
            header.push("x".into());
        } else {
            header.extend((1..=self.x_cols).map(|t| format!("x{t}")));
        }
        if self.z.is_some() {
            header.push("z".into());
        }
        if self.v.is_some() {
            header.push("v".into());
        }
        wtr.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            record.clear();
            record.push(fmt_f64(self.y[i]));
            record.extend(self.x_row(i).iter().map(|&x| fmt_f64(x)));
            if let Some(z) = &self.z {
                record.push(z[i].to_string());
            }
            if let Some(v) = &self.v {
                record.push(fmt_f64(v[i]));
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest decimal representation that round-trips exactly.
pub(crate) fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
