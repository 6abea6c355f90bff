//! Metrics as `key=value` text and as JSON.

use std::path::Path;

use owl_core::openworld::{AccuracyReport, AgentThreshold, Label};
use owl_core::train::EpochRecord;
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub n_test: usize,
    pub unknown_recall: Option<f64>,
    pub per_class: Vec<ClassMetrics>,
    pub agent: AgentMetrics,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<TraceRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    /// Class id, or "unknown".
    pub label: String,
    pub support: usize,
    pub correct: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AgentMetrics {
    pub a: f64,
    pub a_k: f64,
    pub a_u: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_k: f64,
    pub l_u: f64,
    pub l_total: f64,
    pub acc_val: f64,
}

impl Metrics {
    pub fn new(report: &AccuracyReport, agent: &AgentThreshold, trace: &[EpochRecord]) -> Self {
        Metrics {
            accuracy: report.accuracy,
            n_test: report.n,
            unknown_recall: report.unknown_recall(),
            per_class: report
                .per_class
                .iter()
                .map(|c| ClassMetrics {
                    label: match c.label {
                        Label::Class(k) => k.to_string(),
                        Label::Unknown => "unknown".into(),
                    },
                    support: c.support,
                    correct: c.correct,
                    recall: c.recall(),
                })
                .collect(),
            agent: AgentMetrics {
                a: agent.a,
                a_k: agent.a_k,
                a_u: agent.a_u,
            },
            trace: trace
                .iter()
                .map(|r| TraceRow {
                    epoch: r.epoch,
                    l_k: r.l_k,
                    l_u: r.l_u,
                    l_total: r.l_total,
                    acc_val: r.acc_val,
                })
                .collect(),
        }
    }

    /// Line-oriented report; the loss trace is summarized by its last row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
        kv("accuracy", format!("{:.6}", self.accuracy));
        kv("n_test", self.n_test.to_string());
        if let Some(u) = self.unknown_recall {
            kv("unknown_recall", format!("{u:.6}"));
        }
        kv("a", format!("{:.6}", self.agent.a));
        kv("a_k", format!("{:.6}", self.agent.a_k));
        kv("a_u", format!("{:.6}", self.agent.a_u));
        for c in &self.per_class {
            kv(&format!("recall.{}", c.label), format!("{:.6}", c.recall));
        }
        if let Some(last) = self.trace.last() {
            kv("epochs", last.epoch.to_string());
            kv("final_l_total", format!("{:.6}", last.l_total));
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("metrics serialize");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
