//! Test-split accuracy, confusion matrices and the metrics file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Session, VerbalParameters};
use crate::graph::{NodeId, Split};
use crate::prompting::{PredictedLabel, INVALID_LABEL};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no predictions to score")]
    EmptyPredictionList,
    #[error("metrics steps must increase: {prev} then {next}")]
    NonIncreasingStep { prev: usize, next: usize },
    #[error("malformed metrics file {path}, line {line}: {reason}")]
    MalformedMetrics {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub accuracy: f64,
    pub num_test: usize,
    pub num_invalid: usize,
}

/// One scored test prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scored {
    pub node_id: NodeId,
    pub truth: String,
    pub predicted: PredictedLabel,
}

/// Fraction of predictions equal to the truth; invalid answers count as
/// wrong.
pub fn accuracy(predictions: &[Scored]) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyPredictionList);
    }
    let correct = predictions
        .iter()
        .filter(|p| p.predicted.matches(&p.truth))
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Rows are true labels; columns are predicted labels followed by a final
/// INVALID column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub rows: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn build(labels: &[String], predictions: &[Scored]) -> Self {
        let k = labels.len();
        let mut rows = vec![vec![0; k + 1]; k];
        let pos = |l: &str| labels.iter().position(|x| x == l);
        for p in predictions {
            let Some(r) = pos(&p.truth) else { continue };
            let c = p.predicted.as_label().and_then(pos).unwrap_or(k);
            rows[r][c] += 1;
        }
        Self {
            labels: labels.to_vec(),
            rows,
        }
    }

    pub fn total(&self) -> usize {
        self.rows.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> usize {
        (0..self.labels.len()).map(|i| self.rows[i][i]).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        let _ = writeln!(out, ",{INVALID_LABEL}");
        for (label, row) in self.labels.iter().zip(&self.rows) {
            out.push_str(label);
            for n in row {
                let _ = write!(out, ",{n}");
            }
            out.push('\n');
        }
        out
    }
}

/// Scores `theta` on the test split. Neighbor summaries of test nodes are
/// computed once per run and reused.
pub fn evaluate_theta(
    session: &mut Session<'_>,
    theta: &VerbalParameters,
) -> Result<(MetricsRecord, ConfusionMatrix), EngineError> {
    let test = session.graph().nodes_in_split(Split::UnlabeledTest);
    if test.is_empty() {
        return Err(EvalError::EmptyPredictionList.into());
    }
    let reps = session.cached_representations(&test, theta.step)?;
    let predictions = session.predict_all(&reps, theta, theta.step)?;
    let scored: Vec<Scored> = test
        .iter()
        .zip(predictions)
        .map(|(&i, p)| Scored {
            node_id: p.node_id,
            truth: session.graph().node(i).label.clone().unwrap_or_default(),
            predicted: p.label,
        })
        .collect();
    let record = MetricsRecord {
        step: theta.step,
        accuracy: accuracy(&scored)?,
        num_test: scored.len(),
        num_invalid: scored
            .iter()
            .filter(|s| s.predicted == PredictedLabel::Invalid)
            .count(),
    };
    Ok((record, ConfusionMatrix::build(session.labels(), &scored)))
}

pub const METRICS_HEADER: &str = "step,accuracy,num_test,num_invalid";

pub fn emit_metrics(records: &[MetricsRecord], path: &Path) -> Result<(), EvalError> {
    let mut out = format!("{METRICS_HEADER}\n");
    for pair in records.windows(2) {
        if pair[1].step <= pair[0].step {
            return Err(EvalError::NonIncreasingStep {
                prev: pair[0].step,
                next: pair[1].step,
            });
        }
    }
    for r in records {
        let _ = writeln!(
            out,
            "{},{:.6},{},{}",
            r.step, r.accuracy, r.num_test, r.num_invalid
        );
    }
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, reason: &str| EvalError::MalformedMetrics {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(bad(1, "missing header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad(i + 1, "expected 4 fields"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| bad(i + 1, "bad integer"));
            Ok(MetricsRecord {
                step: num(f[0])?,
                accuracy: f[1].parse().map_err(|_| bad(i + 1, "bad accuracy"))?,
                num_test: num(f[2])?,
                num_invalid: num(f[3])?,
            })
        })
        .collect()
}

pub fn emit_confusion(matrix: &ConfusionMatrix, path: &Path) -> Result<(), EvalError> {
    std::fs::write(path, matrix.to_csv()).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scored(truth: &str, pred: Option<&str>) -> Scored {
        Scored {
            node_id: NodeId::new("n"),
            truth: truth.into(),
            predicted: pred.map_or(PredictedLabel::Invalid, |p| PredictedLabel::Label(p.into())),
        }
    }

    #[test]
    fn accuracy_counts_invalid_as_wrong() {
        let p = [
            scored("A", Some("A")),
            scored("B", None),
            scored("B", Some("A")),
            scored("B", Some("B")),
        ];
        assert_eq!(accuracy(&p).unwrap(), 0.5);
        assert!(matches!(accuracy(&[]), Err(EvalError::EmptyPredictionList)));
    }

    #[test]
    fn confusion_layout() {
        let labels = vec!["A".to_string(), "B".to_string()];
        let m = ConfusionMatrix::build(
            &labels,
            &[
                scored("A", Some("A")),
                scored("B", None),
                scored("B", Some("A")),
            ],
        );
        assert_eq!(m.rows, vec![vec![1, 0, 0], vec![1, 0, 1]]);
        assert_eq!(
            m.to_csv(),
            "true\\predicted,A,B,INVALID\nA,1,0,0\nB,1,0,1\n"
        );
    }

    #[test]
    fn metrics_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = vec![
            MetricsRecord {
                step: 0,
                accuracy: 0.125,
                num_test: 8,
                num_invalid: 1,
            },
            MetricsRecord {
                step: 5,
                accuracy: 1.0,
                num_test: 8,
                num_invalid: 0,
            },
        ];
        emit_metrics(&recs, &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "step,accuracy,num_test,num_invalid\n0,0.125000,8,1\n5,1.000000,8,0\n"
        );
        assert_eq!(read_metrics(&path).unwrap(), recs);
        let bad = vec![recs[1].clone(), recs[0].clone()];
        assert!(matches!(
            emit_metrics(&bad, &path),
            Err(EvalError::NonIncreasingStep { .. })
        ));
    }

    proptest! {
        #[test]
        fn accuracy_matches_confusion_trace(pairs in prop::collection::vec((0usize..3, prop::option::of(0usize..3)), 1..40)) {
            let labels: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
            let p: Vec<Scored> = pairs
                .iter()
                .map(|(t, q)| scored(&labels[*t], q.map(|q| labels[q].as_str())))
                .collect();
            let m = ConfusionMatrix::build(&labels, &p);
            let acc = accuracy(&p).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc));
            prop_assert_eq!(m.total(), p.len());
            prop_assert!((acc - m.diagonal() as f64 / p.len() as f64).abs() < 1e-12);
        }
    }
}
