//! Bbox2Caption ROUGE-L and Caption2Bbox ACC@IoU evaluation with
//! deterministic JSON reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Deserialize;

use crate::bbox::{find_bbox_in_text, NormBBox};
use crate::curation::Task;
use crate::error::{Error, Result};
use crate::geometry::{acc_at_iou, Image};
use crate::rouge::rouge_l_text;
use crate::trainer::TrainSample;
use crate::vlm::Vlm;

/// Anything that answers a question about an image with text.
pub trait Generator: Sync {
    fn generate(&self, image: &Image, question: &str, max_new: usize) -> Result<String>;
}

impl Generator for Vlm {
    fn generate(&self, image: &Image, question: &str, max_new: usize) -> Result<String> {
        Vlm::generate(self, image, question, max_new)
    }
}

pub const ROUGE_METRIC: &str = "rouge_l_f1";
pub const ACC_METRIC: &str = "acc_at_iou";

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetric {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    pub parse_failures: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Keyed by task tag (`b2c`, `c2b`).
    pub tasks: BTreeMap<String, TaskMetric>,
    /// `(step, value)` snapshots, empty when not tracked.
    pub curve: Vec<(usize, f64)>,
}

/// One generation with its score contribution.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub sample_id: String,
    pub output: String,
    pub score: f64,
}

fn select<'a>(set: &'a [TrainSample], task: Task) -> Result<Vec<&'a TrainSample>> {
    let mut items: Vec<&TrainSample> = set.iter().filter(|s| s.task() == task).collect();
    if items.is_empty() {
        return Err(Error::EmptyInput("evaluation set has no samples of the requested task"));
    }
    items.sort_by(|a, b| a.sample.sample_id.cmp(&b.sample.sample_id));
    Ok(items)
}

fn generate_all<G: Generator>(model: &G, items: &[&TrainSample], max_new: usize) -> Result<Vec<String>> {
    items
        .par_iter()
        .map(|s| model.generate(&s.image, &s.sample.question, max_new))
        .collect()
}

/// Greedy generations and their ROUGE-L f1, sorted by sample id.
pub fn predict_bbox2caption<G: Generator>(model: &G, set: &[TrainSample], max_new: usize) -> Result<Vec<Prediction>> {
    let items = select(set, Task::Bbox2Caption)?;
    let outputs = generate_all(model, &items, max_new)?;
    Ok(items
        .iter()
        .zip(outputs)
        .map(|(s, output)| Prediction {
            sample_id: s.sample.sample_id.clone(),
            score: rouge_l_text(&output, &s.sample.answer).f1,
            output,
        })
        .collect())
}

/// Mean ROUGE-L f1 over the Bbox2Caption samples of `set`.
pub fn eval_bbox2caption<G: Generator>(model: &G, set: &[TrainSample], max_new: usize) -> Result<TaskMetric> {
    let preds = predict_bbox2caption(model, set, max_new)?;
    let total: f64 = preds.iter().map(|p| p.score).sum();
    Ok(TaskMetric {
        metric: ROUGE_METRIC.into(),
        value: total / preds.len() as f64,
        samples: preds.len(),
        parse_failures: 0,
    })
}

/// ACC@IoU≥`tau` over the Caption2Bbox samples of `set`; outputs without a
/// parseable box count as misses and as parse failures.
pub fn eval_caption2bbox<G: Generator>(model: &G, set: &[TrainSample], tau: f64, max_new: usize) -> Result<TaskMetric> {
    let items = select(set, Task::Caption2Bbox)?;
    let outputs = generate_all(model, &items, max_new)?;
    let preds: Vec<Option<NormBBox>> = outputs.iter().map(|o| find_bbox_in_text(o)).collect();
    let gts = items
        .iter()
        .map(|s| {
            s.sample
                .bbox
                .ok_or_else(|| Error::config(format!("{} has no ground-truth box", s.sample.sample_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskMetric {
        metric: ACC_METRIC.into(),
        value: acc_at_iou(&preds, &gts, tau)?,
        samples: items.len(),
        parse_failures: preds.iter().filter(|p| p.is_none()).count(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = String::from("{\n  \"tasks\": {");
        for (i, (tag, m)) in self.tasks.iter().enumerate() {
            let sep = if i == 0 { "" } else { "," };
            let _ = write!(
                s,
                "{sep}\n    {}: {{\"metric\": {}, \"value\": {:.6}, \"samples\": {}, \"parse_failures\": {}}}",
                serde_json::Value::from(tag.as_str()),
                serde_json::Value::from(m.metric.as_str()),
                m.value,
                m.samples,
                m.parse_failures
            );
        }
        s.push_str(if self.tasks.is_empty() { "}" } else { "\n  }" });
        if !self.curve.is_empty() {
            s.push_str(",\n  \"curve\": [");
            for (i, (step, v)) in self.curve.iter().enumerate() {
                let sep = if i == 0 { "" } else { ", " };
                let _ = write!(s, "{sep}[{step}, {v:.6}]");
            }
            s.push(']');
        }
        s.push_str("\n}\n");
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,value\n");
        for (step, v) in &self.curve {
            let _ = writeln!(s, "{step},{v:.6}");
        }
        s
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct RawMetric {
            metric: String,
            value: f64,
            samples: usize,
            parse_failures: usize,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            tasks: BTreeMap<String, RawMetric>,
            #[serde(default)]
            curve: Vec<(usize, f64)>,
        }
        let raw: Raw = serde_json::from_str(text)?;
        Ok(Self {
            tasks: raw
                .tasks
                .into_iter()
                .map(|(k, m)| {
                    (
                        k,
                        TaskMetric {
                            metric: m.metric,
                            value: m.value,
                            samples: m.samples,
                            parse_failures: m.parse_failures,
                        },
                    )
                })
                .collect(),
            curve: raw.curve,
        })
    }

    /// Values rounded to the six decimals the JSON form keeps.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| format!("{v:.6}").parse::<f64>().expect("formatted float");
        let mut out = self.clone();
        out.tasks.values_mut().for_each(|m| m.value = r(m.value));
        out.curve.iter_mut().for_each(|(_, v)| *v = r(*v));
        out
    }
}

/// Writes the JSON report and, when a curve is present, a sibling
/// `<stem>.curve.csv`.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
    if !report.curve.is_empty() {
        let csv = path.with_extension("curve.csv");
        std::fs::write(&csv, report.curve_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(())
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    EvalReport::from_json(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_shape() {
        let mut r = EvalReport::default();
        r.tasks.insert(
            "b2c".into(),
            TaskMetric {
                metric: ROUGE_METRIC.into(),
                value: 2.0 / 3.0,
                samples: 3,
                parse_failures: 0,
            },
        );
        assert_eq!(
            r.to_json(),
            "{\n  \"tasks\": {\n    \"b2c\": {\"metric\": \"rouge_l_f1\", \"value\": 0.666667, \"samples\": 3, \"parse_failures\": 0}\n  }\n}\n"
        );
        r.curve = vec![(10, 0.5), (20, 0.25)];
        assert!(r.to_json().ends_with("\"curve\": [[10, 0.500000], [20, 0.250000]]\n}\n"));
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r.rounded());
        assert_eq!(EvalReport::default().to_json(), "{\n  \"tasks\": {}\n}\n");
    }
}
