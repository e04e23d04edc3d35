use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One measurement; `epoch == None` marks the final summary.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: Option<usize>,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

/// Per-epoch measurements. Wall-clock times are kept separately and never
/// written to the CSV, so reruns produce identical files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub rows: Vec<MetricRow>,
    pub epoch_seconds: Vec<f64>,
}

impl Metrics {
    pub fn push(&mut self, epoch: Option<usize>, split: &str, metric: &str, value: f64) {
        self.rows.push(MetricRow {
            epoch,
            split: split.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    /// Most recent value of `split/metric`.
    pub fn last(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .rev()
            .find(|r| r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// Final summary value of `split/metric`.
    pub fn summary(&self, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.epoch.is_none() && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// `epoch,split,metric,value` rows; values use the shortest exact decimal form.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,split,metric,value\n");
        for r in &self.rows {
            let epoch = r.epoch.map_or_else(|| "final".to_string(), |e| e.to_string());
            writeln!(s, "{epoch},{},{},{:?}", r.split, r.metric, r.value).expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("epoch,split,metric,value") {
            return Err(Error::format("metrics csv", "missing header"));
        }
        let mut m = Metrics::default();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format("metrics csv", format!("bad row '{line}'"));
            if f.len() != 4 {
                return Err(bad());
            }
            let epoch = match f[0] {
                "final" => None,
                e => Some(e.parse().map_err(|_| bad())?),
            };
            m.push(epoch, f[1], f[2], f[3].parse().map_err(|_| bad())?);
        }
        Ok(m)
    }
}
