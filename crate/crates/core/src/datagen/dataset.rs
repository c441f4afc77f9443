use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeKind {
    Binary,
    Continuous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColumnRole {
    Instrument,
    Confounder,
    Adjustment,
    Unstable,
    Raw,
}

/// Covariates, treatments and outcomes for one population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub t: Vec<f64>,
    pub yf: Vec<f64>,
    pub ycf: Option<Vec<f64>>,
    pub y0: Option<Vec<f64>>,
    pub y1: Option<Vec<f64>>,
    pub kind: OutcomeKind,
    pub roles: Vec<ColumnRole>,
    pub names: Vec<String>,
}

impl Dataset {
    /// Checks lengths, binary treatment, role coverage, and factual consistency.
    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let m = self.x.cols();
        let bad = |what: &str| Err(Error::Contract(format!("dataset: {what}")));
        if self.t.len() != n || self.yf.len() != n {
            return bad("t/yf length differs from row count");
        }
        for v in [&self.ycf, &self.y0, &self.y1].into_iter().flatten() {
            if v.len() != n {
                return bad("potential outcome length differs from row count");
            }
        }
        if self.roles.len() != m || self.names.len() != m {
            return bad("roles/names must cover every column");
        }
        if self.t.iter().any(|&t| t != 0.0 && t != 1.0) {
            return bad("treatment must be 0 or 1");
        }
        if !self.x.is_finite() || self.yf.iter().any(|v| !v.is_finite()) {
            return bad("non-finite values");
        }
        if let (Some(y0), Some(y1)) = (&self.y0, &self.y1) {
            for i in 0..n {
                let expect = if self.t[i] == 1.0 { y1[i] } else { y0[i] };
                if expect != self.yf[i] {
                    return bad("yf inconsistent with t and potential outcomes");
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn has_potential_outcomes(&self) -> bool {
        self.y0.is_some() && self.y1.is_some()
    }

    /// Ground-truth effects `y1 - y0`.
    pub fn ite(&self) -> Result<Vec<f64>> {
        match (&self.y0, &self.y1) {
            (Some(y0), Some(y1)) => Ok(y1.iter().zip(y0).map(|(a, b)| a - b).collect()),
            _ => Err(Error::Protocol("dataset has no potential outcomes".into())),
        }
    }

    pub fn treated(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.t[i] == 1.0).collect()
    }

    pub fn control(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.t[i] == 0.0).collect()
    }

    pub fn columns_with(&self, role: ColumnRole) -> Vec<usize> {
        (0..self.dim()).filter(|&j| self.roles[j] == role).collect()
    }

    /// Row subset, order preserved as given.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Dataset {
            x: self.x.select_rows(idx)?,
            t: pick(&self.t),
            yf: pick(&self.yf),
            ycf: self.ycf.as_ref().map(pick),
            y0: self.y0.as_ref().map(pick),
            y1: self.y1.as_ref().map(pick),
            kind: self.kind,
            roles: self.roles.clone(),
            names: self.names.clone(),
        })
    }

    /// Stacks datasets with identical columns.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero datasets".into()))?;
        for p in parts {
            if p.names != first.names || p.kind != first.kind || p.roles != first.roles {
                return Err(Error::Contract(
                    "concat of datasets with different schemas".into(),
                ));
            }
        }
        let xs: Vec<&Matrix> = parts.iter().map(|p| &p.x).collect();
        let cat = |f: &dyn Fn(&Dataset) -> &Vec<f64>| {
            parts
                .iter()
                .flat_map(|p| f(p).iter().copied())
                .collect::<Vec<_>>()
        };
        let opt = |f: &dyn Fn(&Dataset) -> Option<&Vec<f64>>| -> Option<Vec<f64>> {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(f(p)?);
            }
            Some(out)
        };
        Ok(Dataset {
            x: Matrix::concat_rows(&xs)?,
            t: cat(&|d| &d.t),
            yf: cat(&|d| &d.yf),
            ycf: opt(&|d| d.ycf.as_ref()),
            y0: opt(&|d| d.y0.as_ref()),
            y1: opt(&|d| d.y1.as_ref()),
            kind: first.kind,
            roles: first.roles.clone(),
            names: first.names.clone(),
        })
    }
}
