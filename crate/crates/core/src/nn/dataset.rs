use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Base,
    Adversarial,
}

impl Provenance {
    fn tag(self) -> &'static str {
        match self {
            Provenance::Base => "base",
            Provenance::Adversarial => "adversarial",
        }
    }
}

/// Where a record came from: solve group, sample index and time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub provenance: Provenance,
    pub group: u32,
    pub sample: u32,
    pub step: u32,
}

/// Supervised records `(z, target)` with a per-record loss weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    input_dim: usize,
    target_dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    weights: Vec<f64>,
    meta: Vec<RecordMeta>,
}

impl Dataset {
    pub fn new(input_dim: usize, target_dim: usize) -> Self {
        Self {
            input_dim,
            target_dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            weights: Vec::new(),
            meta: Vec::new(),
        }
    }

    pub fn push(&mut self, input: &[f64], target: &[f64], meta: RecordMeta) -> Result<()> {
        ensure_dim("record input", self.input_dim, input.len())?;
        ensure_dim("record target", self.target_dim, target.len())?;
        self.inputs.extend_from_slice(input);
        self.targets.extend_from_slice(target);
        self.weights.push(1.0);
        self.meta.push(meta);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        ensure_dim("record input", self.input_dim, other.input_dim)?;
        ensure_dim("record target", self.target_dim, other.target_dim)?;
        self.inputs.extend_from_slice(&other.inputs);
        self.targets.extend_from_slice(&other.targets);
        self.weights.extend_from_slice(&other.weights);
        self.meta.extend_from_slice(&other.meta);
        Ok(())
    }

    /// Sets the loss weight of every record with the given provenance.
    pub fn set_weight(&mut self, provenance: Provenance, weight: f64) -> Result<()> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid("weight", "must be finite and nonnegative"));
        }
        for (w, m) in self.weights.iter_mut().zip(&self.meta) {
            if m.provenance == provenance {
                *w = weight;
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    pub fn input(&self, r: usize) -> &[f64] {
        &self.inputs[r * self.input_dim..(r + 1) * self.input_dim]
    }

    pub fn target(&self, r: usize) -> &[f64] {
        &self.targets[r * self.target_dim..(r + 1) * self.target_dim]
    }

    pub fn weight(&self, r: usize) -> f64 {
        self.weights[r]
    }

    pub fn meta(&self, r: usize) -> &RecordMeta {
        &self.meta[r]
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.meta.iter().filter(|m| m.provenance == provenance).count()
    }

    /// Records in the given order.
    pub fn reordered(&self, order: &[usize]) -> Self {
        let mut out = Dataset::new(self.input_dim, self.target_dim);
        for &r in order {
            out.inputs.extend_from_slice(self.input(r));
            out.targets.extend_from_slice(self.target(r));
            out.weights.push(self.weights[r]);
            out.meta.push(self.meta[r]);
        }
        out
    }

    fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["provenance", "group", "sample", "step", "weight"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((0..self.input_dim).map(|c| format!("z{c}")));
        h.extend((0..self.target_dim).map(|c| format!("y{c}")));
        h
    }

    /// One row per record. Inputs are `z = (x, mean_x, noise)` and targets
    /// `(u, mean_u)`, each block `d` (resp. `m`) wide.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(self.header())?;
        let mut row = Vec::with_capacity(5 + self.input_dim + self.target_dim);
        for r in 0..self.len() {
            let m = &self.meta[r];
            row.clear();
            row.push(m.provenance.tag().to_string());
            row.push(m.group.to_string());
            row.push(m.sample.to_string());
            row.push(m.step.to_string());
            row.push(format!("{:?}", self.weights[r]));
            row.extend(self.input(r).iter().map(|v| format!("{v:?}")));
            row.extend(self.target(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let headers = rd.headers()?.clone();
        let input_dim = headers.iter().filter(|h| h.starts_with('z')).count();
        let target_dim = headers.iter().filter(|h| h.starts_with('y')).count();
        let mut data = Dataset::new(input_dim, target_dim);
        if headers.len() != 5 + input_dim + target_dim {
            return Err(Error::Parse {
                what: "dataset csv",
                reason: "unexpected columns".into(),
            });
        }
        let bad = |reason: String| Error::Parse {
            what: "dataset csv",
            reason,
        };
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let num = |c: usize| -> Result<f64> {
                rec[c]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {}: column {c}: {e}", line + 1)))
            };
            let int = |c: usize| -> Result<u32> {
                rec[c]
                    .parse::<u32>()
                    .map_err(|e| bad(format!("row {}: column {c}: {e}", line + 1)))
            };
            let provenance = match &rec[0] {
                "base" => Provenance::Base,
                "adversarial" => Provenance::Adversarial,
                other => return Err(bad(format!("row {}: provenance `{other}`", line + 1))),
            };
            let meta = RecordMeta {
                provenance,
                group: int(1)?,
                sample: int(2)?,
                step: int(3)?,
            };
            let input: Vec<f64> = (5..5 + input_dim).map(num).collect::<Result<_>>()?;
            let target: Vec<f64> = (5 + input_dim..5 + input_dim + target_dim)
                .map(num)
                .collect::<Result<_>>()?;
            data.push(&input, &target, meta)?;
            *data.weights.last_mut().expect("just pushed") = num(4)?;
        }
        Ok(data)
    }
}
