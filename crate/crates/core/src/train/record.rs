use serde::{Deserialize, Serialize};

use crate::error::{LmError, Result};

pub const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalEvent {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub format_version: u32,
    pub step: usize,
    pub split: String,
    pub metric: String,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub events: Vec<EvalEvent>,
    /// Mean training-batch loss of every step taken.
    pub train_loss: Vec<f64>,
    /// `(step, milliseconds since start)` at each evaluation.
    pub wall_ms: Vec<(usize, u64)>,
    pub final_step: usize,
    pub diverged: Option<(usize, String)>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl RunRecord {
    pub fn last(&self, split: &str) -> Option<&EvalEvent> {
        self.events.iter().rev().find(|e| e.split == split)
    }

    pub fn split_events<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a EvalEvent> + 'a {
        self.events.iter().filter(move |e| e.split == split)
    }

    /// First evaluated step at which `split` accuracy reached `threshold`.
    pub fn first_step_reaching(&self, split: &str, threshold: f64) -> Option<usize> {
        self.split_events(split).find(|e| e.accuracy >= threshold).map(|e| e.step)
    }

    pub fn metric_lines(&self) -> Vec<MetricLine> {
        let mut out = Vec::with_capacity(2 * self.events.len());
        for e in &self.events {
            for (metric, value) in [("loss", e.loss), ("accuracy", e.accuracy)] {
                out.push(MetricLine {
                    format_version: METRICS_FORMAT_VERSION,
                    step: e.step,
                    split: e.split.clone(),
                    metric: metric.to_string(),
                    value: finite(value),
                });
            }
        }
        out
    }

    /// Deterministic for a given run: no timings.
    pub fn to_jsonl(&self) -> String {
        self.metric_lines()
            .iter()
            .map(|l| serde_json::to_string(l).expect("plain struct") + "\n")
            .collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<MetricLine>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LmError::Parse {
                    source_name: "metrics.jsonl".into(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn timing_jsonl(&self) -> String {
        self.wall_ms
            .iter()
            .map(|(s, ms)| format!("{{\"step\":{s},\"wall_ms\":{ms}}}\n"))
            .collect()
    }

    /// Final values per split and metric, plus the step count and outcome.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("format_version,step,split,metric,value\n");
        for split in ["train", "test"] {
            if let Some(e) = self.last(split) {
                for (m, v) in [("loss", e.loss), ("accuracy", e.accuracy)] {
                    s += &format!("{METRICS_FORMAT_VERSION},{},{split},{m},{v}\n", e.step);
                }
            }
        }
        let status = if self.diverged.is_some() { 1.0 } else { 0.0 };
        s += &format!("{METRICS_FORMAT_VERSION},{},run,diverged,{status}\n", self.final_step);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec() -> RunRecord {
        let ev = |step, split: &str, loss, accuracy| EvalEvent {
            step,
            split: split.into(),
            loss,
            accuracy,
        };
        RunRecord {
            events: vec![
                ev(0, "train", 2.0, 0.1),
                ev(0, "test", 2.1, 0.1),
                ev(10, "train", 0.5, 0.995),
                ev(10, "test", 1.0, 0.4),
            ],
            final_step: 10,
            ..RunRecord::default()
        }
    }

    #[test]
    fn jsonl_round_trip_and_order() {
        let r = rec();
        let lines = RunRecord::parse_jsonl(&r.to_jsonl()).unwrap();
        assert_eq!(lines, r.metric_lines());
        assert_eq!(lines.len(), 8);
        let first = r.to_jsonl().lines().next().unwrap().to_string();
        assert_eq!(
            first,
            r#"{"format_version":1,"step":0,"split":"train","metric":"loss","value":2.0}"#
        );
        assert!(lines.windows(2).all(|w| w[0].step <= w[1].step));
    }

    #[test]
    fn thresholds() {
        let r = rec();
        assert_eq!(r.first_step_reaching("train", 0.99), Some(10));
        assert_eq!(r.first_step_reaching("test", 0.99), None);
    }

    #[test]
    fn csv_has_final_values() {
        let csv = rec().summary_csv();
        assert!(csv.contains("1,10,test,loss,1\n"));
        assert!(csv.ends_with("1,10,run,diverged,0\n"));
    }
}
