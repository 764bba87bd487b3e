//! Per-step logit tables of a decoded trajectory.
//!
//! CSV layout: `step,chosen,n0,...,n{N-1}`, one row per policy decision.
//! Masked nodes are written as `-inf`.

use std::path::Path;

use asap_core::io::{read_to_string, write_atomic};
use asap_core::policy::Rollout;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub chosen: usize,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogitTrace {
    pub num_nodes: usize,
    pub rows: Vec<TraceRow>,
}

impl LogitTrace {
    /// Decisions of trajectory `traj` from a rollout run with logits kept.
    /// The forced first move is not a decision and is left out.
    pub fn from_rollout(rollout: &Rollout, traj: usize) -> CliResult<Self> {
        let num_nodes = rollout.state.num_nodes();
        let mut rows = Vec::new();
        for r in rollout.decisions(traj) {
            let logits = r
                .logits
                .clone()
                .ok_or_else(|| CliError::usage("rollout was run without keeping logits"))?;
            rows.push(TraceRow {
                step: r.step,
                chosen: r.action,
                logits,
            });
        }
        Ok(LogitTrace { num_nodes, rows })
    }

    pub fn to_csv(&self) -> CliResult<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["step".to_string(), "chosen".to_string()];
        header.extend((0..self.num_nodes).map(|i| format!("n{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.chosen.to_string()];
            rec.extend(r.logits.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| CliError::io(format!("csv: {e}")))
    }

    pub fn from_csv(text: &str, context: &str) -> CliResult<Self> {
        let bad = |m: String| CliError::io(format!("trace {context}: {m}"));
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let header = rd.headers()?.clone();
        if header.len() < 3 || &header[0] != "step" || &header[1] != "chosen" {
            return Err(bad("expected columns step,chosen,n0,...".into()));
        }
        let num_nodes = header.len() - 2;
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let step = field(0).parse().map_err(|e| bad(format!("row {}: step: {e}", line + 1)))?;
            let chosen: usize = field(1).parse().map_err(|e| bad(format!("row {}: chosen: {e}", line + 1)))?;
            if chosen >= num_nodes {
                return Err(bad(format!("row {}: chosen node {chosen} out of range", line + 1)));
            }
            let logits = (0..num_nodes)
                .map(|i| field(i + 2).parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
            rows.push(TraceRow { step, chosen, logits });
        }
        Ok(LogitTrace { num_nodes, rows })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        Ok(write_atomic(path, &self.to_csv()?)?)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_csv(&read_to_string(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_masked_entries() {
        let t = LogitTrace {
            num_nodes: 3,
            rows: vec![
                TraceRow {
                    step: 1,
                    chosen: 2,
                    logits: vec![f64::NEG_INFINITY, -3.25, 7.0 / 3.0],
                },
                TraceRow {
                    step: 2,
                    chosen: 0,
                    logits: vec![0.5, f64::NEG_INFINITY, f64::NEG_INFINITY],
                },
            ],
        };
        let bytes = t.to_csv().unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("step,chosen,n0,n1,n2\n"));
        assert!(text.contains("-inf"));
        assert_eq!(LogitTrace::from_csv(&text, "t").unwrap(), t);
    }

    #[test]
    fn malformed_trace_is_rejected() {
        assert!(LogitTrace::from_csv("a,b,c\n1,2,3\n", "t").is_err());
        assert!(LogitTrace::from_csv("step,chosen,n0\n1,5,0.0\n", "t").is_err());
        assert!(LogitTrace::from_csv("step,chosen,n0\n1,0,abc\n", "t").is_err());
    }
}
