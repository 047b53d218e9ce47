use std::io::Write;

use serde::{Deserialize, Serialize};

use super::EvalResult;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub result: EvalResult,
    pub param_count: usize,
}

/// Models ranked by held-out MAE, lowest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn new(mut rows: Vec<ComparisonRow>) -> Self {
        rows.sort_by(|a, b| a.result.mae.total_cmp(&b.result.mae).then_with(|| a.model.cmp(&b.model)));
        ComparisonReport { rows }
    }

    pub fn get(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// `rank,model,mae,window_mean,window_std,windows,divergence_step,param_count`
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rank", "model", "mae", "window_mean", "window_std", "windows", "divergence_step", "param_count"])?;
        for (k, r) in self.rows.iter().enumerate() {
            w.write_record([
                (k + 1).to_string(),
                r.model.clone(),
                r.result.mae.to_string(),
                r.result.window_mean().to_string(),
                r.result.window_std().to_string(),
                r.result.window_mae.len().to_string(),
                r.result.divergence_step.map(|s| s.to_string()).unwrap_or_default(),
                r.param_count.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format for plotting: `model,window,metric,value`, one row per
    /// window MAE plus one `mae` row per model with window `all`.
    pub fn write_plot_data<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["model", "window", "metric", "value"])?;
        for r in &self.rows {
            w.write_record([r.model.as_str(), "all", "mae", &r.result.mae.to_string()])?;
            for (k, v) in r.result.window_mae.iter().enumerate() {
                w.write_record([r.model.as_str(), &k.to_string(), "window_mae", &v.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
