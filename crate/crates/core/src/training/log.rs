use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::TokenOrigin;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_target_loss: f64,
    pub mean_importance: f64,
    pub zero_score_fraction: f64,
    pub eval_detection_rate: Option<f64>,
    /// Mean training weight of each token position over the epoch.
    pub token_weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Validation(format!("{}: {e}", path.display()))
}

impl TrainLog {
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.epoch <= last.epoch {
                return Err(Error::Validation(format!("epoch {} after epoch {}", r.epoch, last.epoch)));
            }
        }
        self.records.push(r);
        Ok(())
    }

    /// `epoch,mean_target_loss,mean_importance,zero_score_fraction,eval_dr`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epoch", "mean_target_loss", "mean_importance", "zero_score_fraction", "eval_dr"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.mean_target_loss.to_string(),
                r.mean_importance.to_string(),
                r.zero_score_fraction.to_string(),
                r.eval_detection_rate.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Long format `epoch,token_index,feature_name,mean_weight`.
    pub fn write_token_weights_csv(&self, path: &Path, origin: &[TokenOrigin]) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["epoch", "token_index", "feature_name", "mean_weight"])?;
        for r in &self.records {
            for (k, v) in r.token_weights.iter().enumerate() {
                let name = origin.get(k).map(|o| o.feature.name()).unwrap_or("?");
                w.write_record([r.epoch.to_string(), k.to_string(), name.to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
