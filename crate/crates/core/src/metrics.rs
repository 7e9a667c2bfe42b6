//! Metrics rows, byte accounting, and CSV emission.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::Method;
use crate::data::Dataset;
use crate::error::Result;
use crate::nn::{evaluate, ModelSpec};
use crate::params::ParamVector;
use crate::selection::TraceRow;

/// One evaluation row of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: usize,
    pub method: &'static str,
    pub test_accuracy: f64,
    pub train_loss: f64,
    /// Cumulative payload bytes through this round.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: u64,
}

/// Evaluation rows plus a header echoing the resolved run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    /// JSON blob with the resolved config and input hashes.
    pub header_json: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# ");
        out.push_str(&self.header_json);
        out.push('\n');
        out.push_str("round,method,test_accuracy,train_loss,bytes_up,bytes_down,wall_ms\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.round, r.method, r.test_accuracy, r.train_loss, r.bytes_up, r.bytes_down, r.wall_ms
            ));
        }
        out
    }

    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map(|r| r.test_accuracy).unwrap_or(0.0)
    }

    pub fn best_accuracy(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.test_accuracy)
            .fold(0.0, f64::max)
    }

    /// First evaluated round whose accuracy reaches `threshold`.
    pub fn rounds_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.rows
            .iter()
            .find(|r| r.test_accuracy >= threshold)
            .map(|r| r.round)
    }

    pub fn total_bytes(&self) -> (u64, u64) {
        self.rows
            .last()
            .map(|r| (r.bytes_up, r.bytes_down))
            .unwrap_or((0, 0))
    }
}

/// Per-round payload bytes `(up, down)` for a method.
///
/// Every protocol moves one model-sized payload per participating device in
/// each direction; the control-variate method moves two (model plus
/// control).
pub fn account_bytes(method: Method, param_count: usize, devices_per_round: usize) -> (u64, u64) {
    let model_bytes = (param_count * 8 * devices_per_round) as u64;
    match method {
        Method::Scaffold => (2 * model_bytes, 2 * model_bytes),
        _ => (model_bytes, model_bytes),
    }
}

/// Collects rows during a run: evaluation every `eval_every` completed
/// rounds plus the round-0 anchor before training.
pub struct Recorder<'a> {
    method: Method,
    eval_every: usize,
    record_wall_time: bool,
    train_set: &'a Dataset,
    eval_set: &'a Dataset,
    spec: &'a ModelSpec,
    header_json: String,
    rows: Vec<MetricsRow>,
    bytes_up: u64,
    bytes_down: u64,
    started: Instant,
}

impl<'a> Recorder<'a> {
    pub fn new(
        method: Method,
        eval_every: usize,
        record_wall_time: bool,
        train_set: &'a Dataset,
        eval_set: &'a Dataset,
        spec: &'a ModelSpec,
        header_json: String,
    ) -> Self {
        Recorder {
            method,
            eval_every,
            record_wall_time,
            train_set,
            eval_set,
            spec,
            header_json,
            rows: Vec::new(),
            bytes_up: 0,
            bytes_down: 0,
            started: Instant::now(),
        }
    }

    fn eval_row(&mut self, completed_rounds: usize, model: &ParamVector) -> Result<()> {
        let test = evaluate(model, self.spec, self.eval_set)?;
        let train = evaluate(model, self.spec, self.train_set)?;
        let wall_ms = if self.record_wall_time {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        };
        self.rows.push(MetricsRow {
            round: completed_rounds,
            method: self.method.name(),
            test_accuracy: test.accuracy,
            train_loss: train.mean_loss,
            bytes_up: self.bytes_up,
            bytes_down: self.bytes_down,
            wall_ms,
        });
        Ok(())
    }

    /// Emit the round-0 anchor row.
    pub fn record_initial(&mut self, model: &ParamVector) -> Result<()> {
        self.eval_row(0, model)
    }

    /// Account one finished round and evaluate on cadence.
    pub fn round_done(
        &mut self,
        completed_rounds: usize,
        param_count: usize,
        devices_per_round: usize,
        model: &ParamVector,
    ) -> Result<()> {
        let (up, down) = account_bytes(self.method, param_count, devices_per_round);
        self.bytes_up += up;
        self.bytes_down += down;
        if completed_rounds.is_multiple_of(self.eval_every) {
            self.eval_row(completed_rounds, model)?;
        }
        Ok(())
    }

    pub fn finish(self) -> MetricsLog {
        MetricsLog {
            header_json: self.header_json,
            rows: self.rows,
        }
    }
}

/// Write bytes to `path` atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// CSV for the optional selection audit trace.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("round,slot,group_index,device,greedy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.round, r.slot, r.group_index, r.device, r.greedy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_accounting_examples() {
        // 10 devices x 1000 params x 8 bytes = 80 kB each way.
        assert_eq!(account_bytes(Method::Fedavg, 1000, 10), (80_000, 80_000));
        assert_eq!(
            account_bytes(Method::Scaffold, 1000, 10),
            (160_000, 160_000)
        );
        assert_eq!(
            account_bytes(Method::Fedcat, 1000, 10),
            account_bytes(Method::Fedavg, 1000, 10)
        );
        assert_eq!(
            account_bytes(Method::FedcatGc, 777, 3),
            account_bytes(Method::Fedprox, 777, 3)
        );
    }

    #[test]
    fn csv_shape() {
        let log = MetricsLog {
            header_json: "{\"seed\":1}".to_string(),
            rows: vec![MetricsRow {
                round: 0,
                method: "fedavg",
                test_accuracy: 0.5,
                train_loss: 2.0,
                bytes_up: 0,
                bytes_down: 0,
                wall_ms: 0,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# {"));
        assert_eq!(
            lines.next().unwrap(),
            "round,method,test_accuracy,train_loss,bytes_up,bytes_down,wall_ms"
        );
        assert_eq!(lines.next().unwrap(), "0,fedavg,0.5,2,0,0,0");
    }

    #[test]
    fn threshold_lookup() {
        let row = |round, acc| MetricsRow {
            round,
            method: "fedavg",
            test_accuracy: acc,
            train_loss: 0.0,
            bytes_up: 0,
            bytes_down: 0,
            wall_ms: 0,
        };
        let log = MetricsLog {
            header_json: String::new(),
            rows: vec![row(0, 0.1), row(10, 0.6), row(20, 0.7)],
        };
        assert_eq!(log.rounds_to_threshold(0.6), Some(10));
        assert_eq!(log.rounds_to_threshold(0.9), None);
        assert_eq!(log.final_accuracy(), 0.7);
        assert_eq!(log.best_accuracy(), 0.7);
    }
}
