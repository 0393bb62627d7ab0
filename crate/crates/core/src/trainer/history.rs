use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "iteration,critic_loss,gen_loss,wasserstein,gen_disease_types,avg_diseases_per_visit";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: u64,
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub wasserstein: f64,
    pub gen_disease_types: usize,
    pub avg_diseases_per_visit: f64,
}

/// Logged training curves; iterations strictly increase.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[HistoryRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, rec: HistoryRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.iteration <= last.iteration {
                return Err(Error::Config(format!(
                    "history iteration {} does not follow {}",
                    rec.iteration, last.iteration
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    /// Records with `iteration > after`.
    pub fn since(&self, after: u64) -> impl Iterator<Item = &HistoryRecord> {
        self.records.iter().filter(move |r| r.iteration > after)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(HISTORY_HEADER.split(','))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("history: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_csv()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != HISTORY_HEADER {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: 1,
                msg: format!("unexpected header {header:?}"),
            });
        }
        let mut h = Self::new();
        for rec in r.deserialize() {
            h.push(rec?)?;
        }
        Ok(h)
    }
}
