//! Accuracy, mean confidence and calibration gap, plus grouping of run
//! records into mean ± std tables.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::distill::RunRecord;
use crate::numkern::{argmax, softmax, DenseMatrix, NumError, ProbVec, Real};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("records disagree on class count: {0} vs {1}")]
    InconsistentClasses(usize, usize),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean of `max_c p(c|x)` at temperature 1.
    pub mean_confidence: f64,
    /// `mean_confidence − accuracy`.
    pub calibration_gap: f64,
    pub n_eval: usize,
}

/// Scores rows of probabilities; `labels[k]` is the gold class of row `k`.
pub fn evaluate_probs(rows: &[ProbVec], labels: &[u32]) -> Result<EvalReport, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::InvalidArgument("empty eval set".into()));
    }
    if rows.len() != labels.len() {
        return Err(MetricsError::InvalidArgument(format!(
            "{} prediction rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let n = rows.len() as f64;
    let hits = rows
        .iter()
        .zip(labels)
        .filter(|(p, &y)| p.argmax() == y as usize)
        .count();
    let accuracy = hits as f64 / n;
    let mean_confidence = rows.iter().map(ProbVec::max).sum::<f64>() / n;
    Ok(EvalReport {
        accuracy,
        mean_confidence,
        calibration_gap: mean_confidence - accuracy,
        n_eval: rows.len(),
    })
}

/// Scores a logit matrix at temperature 1.
pub fn evaluate_logits<T: Real>(
    logits: &DenseMatrix<T>,
    labels: &[u32],
) -> Result<EvalReport, MetricsError> {
    let rows = logits
        .iter_rows()
        .map(|z| softmax(z, 1.0))
        .collect::<Result<Vec<_>, _>>()?;
    let report = evaluate_probs(&rows, labels)?;
    // accuracy by logit argmax so ties resolve the same way as predict()
    let hits = logits
        .iter_rows()
        .zip(labels)
        .filter(|(z, &y)| argmax(z) == y as usize)
        .count();
    let accuracy = hits as f64 / labels.len() as f64;
    Ok(EvalReport {
        accuracy,
        calibration_gap: report.mean_confidence - accuracy,
        ..report
    })
}

/// Runs `forward` on the eval indices and scores its logits against
/// `labels`.
pub fn evaluate<T, F, E>(forward: F, labels: &[u32], eval: &[usize]) -> Result<EvalReport, E>
where
    T: Real,
    F: FnOnce(&[usize]) -> Result<DenseMatrix<T>, E>,
    E: From<MetricsError>,
{
    if eval.is_empty() {
        return Err(MetricsError::InvalidArgument("empty eval set".into()).into());
    }
    let logits = forward(eval)?;
    let gold: Vec<u32> = eval.iter().map(|&i| labels[i]).collect();
    Ok(evaluate_logits(&logits, &gold)?)
}

/// Columns a report can be grouped by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKey {
    /// Method name, with the probe kind appended for probe distillation.
    Method,
    Probe,
    Fraction,
    Seed,
}

impl GroupKey {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupKey::Method => "method",
            GroupKey::Probe => "probe",
            GroupKey::Fraction => "fraction",
            GroupKey::Seed => "seed",
        }
    }

    fn value(self, r: &RunRecord) -> String {
        match self {
            GroupKey::Method => r.method_label(),
            GroupKey::Probe => r.probe.clone().unwrap_or_default(),
            GroupKey::Fraction => r.fraction.to_string(),
            GroupKey::Seed => r.seed.to_string(),
        }
    }

    /// Parses a comma-separated list such as `method,fraction`.
    pub fn parse_list(s: &str) -> Result<Vec<GroupKey>, MetricsError> {
        s.split(',')
            .map(|t| match t.trim() {
                "method" => Ok(GroupKey::Method),
                "probe" => Ok(GroupKey::Probe),
                "fraction" => Ok(GroupKey::Fraction),
                "seed" => Ok(GroupKey::Seed),
                other => Err(MetricsError::InvalidArgument(format!(
                    "unknown group key {other:?}"
                ))),
            })
            .collect()
    }
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub keys: Vec<(String, String)>,
    pub n_runs: usize,
    pub accuracy: MeanStd,
    pub mean_confidence: MeanStd,
    pub calibration_gap: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateTable {
    pub group_by: Vec<GroupKey>,
    pub rows: Vec<GroupRow>,
}

/// Groups records by `keys`; rows appear in order of first occurrence.
pub fn aggregate(records: &[RunRecord], keys: &[GroupKey]) -> Result<AggregateTable, MetricsError> {
    if let Some(first) = records.first() {
        if let Some(bad) = records.iter().find(|r| r.n_classes != first.n_classes) {
            return Err(MetricsError::InconsistentClasses(first.n_classes, bad.n_classes));
        }
    }
    let mut order: Vec<Vec<String>> = Vec::new();
    let mut members: Vec<Vec<&RunRecord>> = Vec::new();
    for r in records {
        let k: Vec<String> = keys.iter().map(|g| g.value(r)).collect();
        match order.iter().position(|o| *o == k) {
            Some(p) => members[p].push(r),
            None => {
                order.push(k);
                members.push(vec![r]);
            }
        }
    }
    let rows = order
        .into_iter()
        .zip(members)
        .map(|(k, group)| {
            let pick = |f: fn(&RunRecord) -> f64| group.iter().map(|r| f(r)).collect::<Vec<_>>();
            GroupRow {
                keys: keys
                    .iter()
                    .zip(k)
                    .map(|(g, v)| (g.as_str().to_string(), v))
                    .collect(),
                n_runs: group.len(),
                accuracy: MeanStd::of(&pick(|r| r.accuracy)),
                mean_confidence: MeanStd::of(&pick(|r| r.mean_confidence)),
                calibration_gap: MeanStd::of(&pick(|r| r.calibration_gap)),
            }
        })
        .collect();
    Ok(AggregateTable {
        group_by: keys.to_vec(),
        rows,
    })
}

impl AggregateTable {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = self.group_by.iter().map(|g| g.as_str().to_string()).collect();
        h.extend(
            [
                "n_runs",
                "accuracy_mean",
                "accuracy_std",
                "confidence_mean",
                "confidence_std",
                "gap_mean",
                "gap_std",
            ]
            .map(String::from),
        );
        h
    }

    pub fn write_csv<W: Write>(&self, dst: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(dst);
        w.write_record(self.header())?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.keys.iter().map(|(_, v)| v.clone()).collect();
            rec.push(row.n_runs.to_string());
            for m in [row.accuracy, row.mean_confidence, row.calibration_gap] {
                rec.push(format!("{:.6}", m.mean));
                rec.push(format!("{:.6}", m.std));
            }
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, MetricsError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String, MetricsError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Row whose keys all match `wanted`.
    pub fn find(&self, wanted: &[&str]) -> Option<&GroupRow> {
        self.rows
            .iter()
            .find(|r| r.keys.len() == wanted.len() && r.keys.iter().zip(wanted).all(|((_, v), w)| v == w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(method: &str, fraction: f64, acc: f64) -> RunRecord {
        RunRecord {
            method: method.into(),
            fraction,
            accuracy: acc,
            mean_confidence: 0.5,
            calibration_gap: 0.5 - acc,
            n_classes: 4,
            ..RunRecord::default()
        }
    }

    #[test]
    fn perfect_and_uniform() {
        let one = DenseMatrix::<f64>::from_rows(&[vec![50.0, 0.0], vec![0.0, 50.0]]).unwrap();
        let r = evaluate_logits(&one, &[0, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.mean_confidence - 1.0).abs() < 1e-12);
        assert!(r.calibration_gap.abs() < 1e-12);

        let flat = DenseMatrix::<f64>::zeros(3, 4);
        let r = evaluate_logits(&flat, &[0, 1, 2]).unwrap();
        assert!((r.mean_confidence - 0.25).abs() < 1e-12);
        assert!((r.calibration_gap - (0.25 - r.accuracy)).abs() < 1e-12);
    }

    #[test]
    fn empty_eval_is_an_error() {
        let r: Result<EvalReport, MetricsError> =
            evaluate(|_| Ok(DenseMatrix::<f64>::zeros(0, 3)), &[0, 1], &[]);
        assert!(matches!(r, Err(MetricsError::InvalidArgument(_))));
    }

    #[test]
    fn sample_std() {
        let rs = [record("a", 1.0, 0.2), record("a", 1.0, 0.4)];
        let t = aggregate(&rs, &[GroupKey::Method]).unwrap();
        assert!((t.rows[0].accuracy.mean - 0.3).abs() < 1e-12);
        assert!((t.rows[0].accuracy.std - 0.141_421_356).abs() < 1e-6);
        let single = aggregate(&rs[..1], &[GroupKey::Method]).unwrap();
        assert_eq!(single.rows[0].accuracy.std, 0.0);
    }

    #[test]
    fn insertion_order_and_class_check() {
        let rs = [record("b", 0.5, 0.1), record("a", 0.5, 0.2), record("b", 1.0, 0.3)];
        let t = aggregate(&rs, &[GroupKey::Method, GroupKey::Fraction]).unwrap();
        let names: Vec<_> = t.rows.iter().map(|r| r.keys[0].1.clone()).collect();
        assert_eq!(names, ["b", "a", "b"]);
        assert!(t.find(&["a", "0.5"]).is_some());
        let mut odd = record("a", 0.5, 0.2);
        odd.n_classes = 5;
        assert!(matches!(
            aggregate(&[rs[0].clone(), odd], &[GroupKey::Method]),
            Err(MetricsError::InconsistentClasses(4, 5))
        ));
    }

    #[test]
    fn csv_layout() {
        let t = aggregate(&[record("a", 0.5, 0.25)], &[GroupKey::Method, GroupKey::Fraction]).unwrap();
        let s = t.to_csv_string().unwrap();
        assert_eq!(
            s,
            "method,fraction,n_runs,accuracy_mean,accuracy_std,confidence_mean,confidence_std,gap_mean,gap_std\n\
             a,0.5,1,0.250000,0.000000,0.500000,0.000000,0.250000,0.000000\n"
        );
    }
}
