use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

/// Named scalar metrics in insertion order, plus provenance and notes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    metrics: Vec<(String, f64)>,
    pub provenance: KeyValues,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(protocol: impl Into<String>) -> Self {
        EvalReport {
            protocol: protocol.into(),
            ..Default::default()
        }
    }

    /// Sets `name`, replacing an earlier value.
    pub fn set(&mut self, name: impl Into<String>, value: f64) {
        let name = name.into();
        match self.metrics.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.metrics.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|m| m.1)
    }

    pub fn metrics(&self) -> &[(String, f64)] {
        &self.metrics
    }

    pub fn is_empty(&self) -> bool {
        self.metrics.is_empty()
    }

    /// Appends every metric of `other` with `prefix.` prepended.
    pub fn absorb(&mut self, prefix: &str, other: &EvalReport) {
        for (n, v) in &other.metrics {
            self.set(format!("{prefix}.{n}"), *v);
        }
        self.notes.extend(other.notes.iter().cloned());
    }

    /// Dice metrics (names containing `dice`, except gaps) must lie in
    /// [0, 1] and Fréchet distances must be at least -1e-6.
    pub fn validate(&self) -> Result<()> {
        for (n, v) in &self.metrics {
            let is_dice = n.contains("dice") && !n.contains("gap");
            if is_dice && !(0.0..=1.0).contains(v) {
                return Err(Error::Numerical(format!("{n} = {v} outside [0, 1]")));
            }
            if n.contains("fid") && (v.is_nan() || *v < -1e-6) {
                return Err(Error::Numerical(format!("{n} = {v} is negative")));
            }
        }
        Ok(())
    }

    /// `metric = value` lines, then provenance and notes.
    pub fn to_text(&self) -> String {
        let mut s = format!("protocol = {}\n", self.protocol);
        for (n, v) in &self.metrics {
            s.push_str(&format!("{n} = {v:.6}\n"));
        }
        for (k, v) in self.provenance.iter() {
            s.push_str(&format!("provenance.{k} = {v}\n"));
        }
        for note in &self.notes {
            s.push_str(&format!("note = {note}\n"));
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("metric\tvalue\n");
        for (n, v) in &self.metrics {
            s.push_str(&format!("{n}\t{v:.6}\n"));
        }
        s
    }

    /// Writes `report.txt` and `report.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        let tsv = dir.join("report.tsv");
        fs::write(&tsv, self.to_tsv()).map_err(|e| Error::io(&tsv, e))
    }
}
