use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Behavioral signals at one evaluation step. Splits with no facts report `NaN`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    /// Mean cross-entropy over the training split.
    pub loss: f64,
    pub train_acc: f64,
    pub comp_ood_acc: f64,
    pub ana_ood_acc: f64,
    pub train_prob: f64,
    pub comp_prob: f64,
    pub ana_prob: f64,
}

/// Which accuracy column to inspect.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Train,
    CompOod,
    AnaOod,
}

impl EvalRecord {
    pub fn accuracy(&self, signal: Signal) -> f64 {
        match signal {
            Signal::Train => self.train_acc,
            Signal::CompOod => self.comp_ood_acc,
            Signal::AnaOod => self.ana_ood_acc,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

pub const HISTORY_HEADER: [&str; 8] = [
    "step",
    "loss",
    "train_acc",
    "comp_ood_acc",
    "ana_ood_acc",
    "train_prob",
    "comp_prob",
    "ana_prob",
];

impl TrainHistory {
    pub fn push(&mut self, record: EvalRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.step <= last.step {
                return Err(Error::Config(format!(
                    "history steps must increase ({} after {})",
                    record.step, last.step
                )));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.records.last()
    }

    /// First evaluated step at which `signal` reaches `threshold`.
    pub fn first_reaching(&self, signal: Signal, threshold: f64) -> Option<u64> {
        self.records
            .iter()
            .find(|r| r.accuracy(signal) >= threshold)
            .map(|r| r.step)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        w.write_record(HISTORY_HEADER)
            .map_err(|e| csv_err("history", e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_err("history", e))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r =
            csv::Reader::from_path(path).map_err(|e| csv_err(path.display().to_string(), e))?;
        let header: Vec<String> = r
            .headers()
            .map_err(|e| csv_err(path.display().to_string(), e))?
            .iter()
            .map(str::to_string)
            .collect();
        if header != HISTORY_HEADER {
            return Err(Error::validation(
                path,
                format!("unexpected header {header:?}"),
            ));
        }
        let mut h = Self::default();
        for rec in r.deserialize() {
            h.push(rec.map_err(|e| csv_err(path.display().to_string(), e))?)?;
        }
        Ok(h)
    }
}

fn csv_err(context: impl Into<String>, source: csv::Error) -> Error {
    Error::Csv {
        context: context.into(),
        source,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: u64, acc: f64) -> EvalRecord {
        EvalRecord {
            step,
            loss: 1.5,
            train_acc: acc,
            comp_ood_acc: acc / 2.0,
            ana_ood_acc: f64::NAN,
            train_prob: 0.25,
            comp_prob: 0.125,
            ana_prob: f64::NAN,
        }
    }

    #[test]
    fn csv_round_trip_with_nan() {
        let mut h = TrainHistory::default();
        h.push(rec(0, 0.0)).unwrap();
        h.push(rec(50, 1.0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        h.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "step,loss,train_acc,comp_ood_acc,ana_ood_acc,train_prob,comp_prob,ana_prob\n"
        ));
        let back = TrainHistory::read_csv(&path).unwrap();
        assert_eq!(back.records.len(), 2);
        assert_eq!(back.records[1].train_acc, 1.0);
        assert!(back.records[1].ana_ood_acc.is_nan());
        assert_eq!(back.first_reaching(Signal::Train, 0.99), Some(50));
        assert_eq!(back.first_reaching(Signal::AnaOod, 0.5), None);
    }

    #[test]
    fn steps_must_increase() {
        let mut h = TrainHistory::default();
        h.push(rec(10, 0.0)).unwrap();
        assert!(h.push(rec(10, 0.0)).is_err());
    }
}
