//! Accuracy, macro-F1, confusion matrices and hierarchical consistency.

use serde::{Deserialize, Serialize};

use crate::datagen::Bag;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{forward, ForwardTrace, ModelParams};
use crate::numerics::argmax;
use crate::taxonomy::Taxonomy;

/// How the fine prediction is read from the fine logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Argmax over every fine class.
    #[default]
    Unrestricted,
    /// Argmax over the fine children of the predicted coarse class.
    Restricted,
}

/// `(coarse, fine)` argmax of the two logit vectors; ties go to the lowest index.
pub fn predict(trace: &ForwardTrace) -> (usize, usize) {
    (argmax(&trace.o_c), argmax(&trace.o_f))
}

pub fn predict_restricted(trace: &ForwardTrace, taxonomy: &Taxonomy) -> Result<(usize, usize)> {
    let coarse = argmax(&trace.o_c);
    let children = taxonomy.children_of(coarse)?;
    let mut best = children[0];
    for &k in &children[1..] {
        if trace.o_f[k] > trace.o_f[best] {
            best = k;
        }
    }
    Ok((coarse, best))
}

/// Rows are true classes, columns predicted classes.
pub fn confusion_matrix(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            context: "truth vs predictions",
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for idx in [t, p] {
            if idx >= n_classes {
                return Err(Error::IndexOutOfRange {
                    what: "class",
                    index: idx,
                    len: n_classes,
                });
            }
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn check_square(confusion: &[Vec<u64>]) -> Result<()> {
    let n = confusion.len();
    if let Some(row) = confusion.iter().find(|r| r.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "confusion matrix row",
            expected: n,
            got: row.len(),
        });
    }
    Ok(())
}

/// Per-class precision, recall and F1. Any ratio with a zero denominator is 0.
pub fn per_class_scores(confusion: &[Vec<u64>]) -> Result<Vec<ClassScores>> {
    check_square(confusion)?;
    let n = confusion.len();
    Ok((0..n)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let predicted: u64 = (0..n).map(|r| confusion[r][c]).sum();
            let support: u64 = confusion[c].iter().sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect())
}

pub fn macro_f1(confusion: &[Vec<u64>]) -> Result<f64> {
    let scores = per_class_scores(confusion)?;
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64)
}

pub fn accuracy(confusion: &[Vec<u64>]) -> f64 {
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let diag: u64 = confusion.iter().enumerate().map(|(i, r)| r[i]).sum();
    diag as f64 / total as f64
}

/// Fraction of `(coarse, fine)` predictions whose fine class sits under the
/// predicted coarse class. An empty input is vacuously consistent.
pub fn consistency_rate(predictions: &[(usize, usize)], taxonomy: &Taxonomy) -> f64 {
    if predictions.is_empty() {
        return 1.0;
    }
    let hits = predictions
        .iter()
        .filter(|&&(c, f)| taxonomy.is_consistent(c, f))
        .count();
    hits as f64 / predictions.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub decoding: Decoding,
    pub acc_coarse: f64,
    pub f1_macro_coarse: f64,
    pub acc_fine: f64,
    pub f1_macro_fine: f64,
    pub consistency_rate: f64,
    pub confusion_coarse: Vec<Vec<u64>>,
    pub confusion_fine: Vec<Vec<u64>>,
    pub per_class_coarse: Vec<ClassScores>,
    pub per_class_fine: Vec<ClassScores>,
}

impl EvalReport {
    /// Builds a report from `(coarse, fine)` label and prediction pairs.
    pub fn from_predictions(
        labels: &[(usize, usize)],
        predictions: &[(usize, usize)],
        taxonomy: &Taxonomy,
        decoding: Decoding,
    ) -> Result<Self> {
        let split = |v: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { v.iter().copied().unzip() };
        let (tc, tf) = split(labels);
        let (pc, pf) = split(predictions);
        let confusion_coarse = confusion_matrix(&tc, &pc, taxonomy.n_coarse())?;
        let confusion_fine = confusion_matrix(&tf, &pf, taxonomy.n_fine())?;
        Ok(Self {
            n_samples: labels.len(),
            decoding,
            acc_coarse: accuracy(&confusion_coarse),
            f1_macro_coarse: macro_f1(&confusion_coarse)?,
            acc_fine: accuracy(&confusion_fine),
            f1_macro_fine: macro_f1(&confusion_fine)?,
            consistency_rate: consistency_rate(predictions, taxonomy),
            per_class_coarse: per_class_scores(&confusion_coarse)?,
            per_class_fine: per_class_scores(&confusion_fine)?,
            confusion_coarse,
            confusion_fine,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Runs the model over every bag and scores the predictions.
pub fn evaluate(
    params: &ModelParams,
    bags: &[Bag],
    taxonomy: &Taxonomy,
    decoding: Decoding,
    exec: Exec,
) -> Result<EvalReport> {
    if let Some(first) = bags.first() {
        params.config.check_compatible(first.dim(), taxonomy)?;
    } else {
        params.config.check_compatible(params.config.input_dim, taxonomy)?;
    }
    let outputs = exec.map(bags, |bag| -> Result<((usize, usize), (usize, usize))> {
        bag.check_labels(taxonomy)?;
        let trace = forward(bag, params)?;
        let pred = match decoding {
            Decoding::Unrestricted => predict(&trace),
            Decoding::Restricted => predict_restricted(&trace, taxonomy)?,
        };
        Ok(((bag.coarse_label, bag.fine_label), pred))
    });
    let (labels, predictions): (Vec<_>, Vec<_>) = outputs.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    EvalReport::from_predictions(&labels, &predictions, taxonomy, decoding)
}

/// Confusion matrix as CSV with class names on both axes.
pub fn confusion_csv(confusion: &[Vec<u64>], names: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    fn trace_with(o_c: Vec<f64>, o_f: Vec<f64>) -> ForwardTrace {
        let pooled = crate::model::Pooled {
            pre: Matrix::zeros(0, 0),
            hidden: Matrix::zeros(0, 0),
            attn_tanh: Matrix::zeros(0, 0),
            attn_gate: Matrix::zeros(0, 0),
            attn_logits: vec![],
            attn_weights: vec![],
            max_index: vec![],
            slide: vec![],
        };
        ForwardTrace {
            inputs: Matrix::zeros(0, 0),
            pooled,
            v_c: vec![],
            v_f: vec![],
            v_c_aug: vec![],
            v_f_aug: vec![],
            f_c: Matrix::zeros(0, 0),
            f_f: Matrix::zeros(0, 0),
            o_c,
            o_f,
        }
    }

    #[test]
    fn argmax_readout() {
        let t = trace_with(vec![0.1, 2.0, -1.0, 0.0], vec![1.0, 1.0, 0.5]);
        assert_eq!(predict(&t), (1, 0));
        let shifted = trace_with(vec![5.1, 7.0, 4.0, 5.0], vec![-2.0, -2.0, -2.5]);
        assert_eq!(predict(&shifted), predict(&t));
    }

    #[test]
    fn restricted_decoding_stays_in_group() {
        let tax = Taxonomy::gastric();
        let mut o_f = vec![0.0; 14];
        o_f[0] = 5.0; // Benign child wins globally
        o_f[11] = 1.0; // Chronic gastritis
        let gastritis = tax.coarse_index("Gastritis").unwrap();
        let mut o_c = vec![0.0; 4];
        o_c[gastritis] = 1.0;
        let t = trace_with(o_c, o_f);
        assert_eq!(predict(&t), (gastritis, 0));
        assert_eq!(predict_restricted(&t, &tax).unwrap(), (gastritis, 11));
    }

    #[test]
    fn macro_f1_cases() {
        let perfect = vec![vec![3, 0, 0], vec![0, 4, 0], vec![0, 0, 1]];
        assert_eq!(macro_f1(&perfect).unwrap(), 1.0);

        // Brute force from the definitions for [[8,2],[3,7]].
        let conf = vec![vec![8, 2], vec![3, 7]];
        let f1 = |tp: f64, fp: f64, fn_: f64| {
            let p = tp / (tp + fp);
            let r = tp / (tp + fn_);
            2.0 * p * r / (p + r)
        };
        let expected = 0.5 * (f1(8.0, 3.0, 2.0) + f1(7.0, 2.0, 3.0));
        assert!((macro_f1(&conf).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.749_373_433_583_959_9).abs() < 1e-15);

        // Class 2 never true and never predicted.
        let conf = vec![vec![2, 0, 0], vec![0, 2, 0], vec![0, 0, 0]];
        let scores = per_class_scores(&conf).unwrap();
        assert_eq!(scores[2].f1, 0.0);
        assert!((macro_f1(&conf).unwrap() - 2.0 / 3.0).abs() < 1e-15);

        assert!(macro_f1(&[vec![1, 0], vec![0]]).is_err());
    }

    #[test]
    fn consistency_cases() {
        let tax = Taxonomy::gastric();
        let cancer = tax.coarse_index("Cancer").unwrap();
        let chronic = tax.fine_index("Chronic gastritis").unwrap();
        assert_eq!(consistency_rate(&vec![(cancer, chronic); 7], &tax), 0.0);
        let good: Vec<(usize, usize)> = (0..14).map(|f| (tax.group_of(f).unwrap(), f)).collect();
        assert_eq!(consistency_rate(&good, &tax), 1.0);
        let single = Taxonomy::new(vec!["a".into()], vec!["x".into(), "y".into()], vec![0, 0]).unwrap();
        assert_eq!(consistency_rate(&[(0, 0), (0, 1)], &single), 1.0);
    }

    #[test]
    fn report_from_ground_truth_predictions() {
        let tax = Taxonomy::gastric();
        let labels: Vec<(usize, usize)> = (0..14).map(|f| (tax.group_of(f).unwrap(), f)).collect();
        let r = EvalReport::from_predictions(&labels, &labels, &tax, Decoding::Unrestricted).unwrap();
        assert_eq!((r.acc_coarse, r.acc_fine, r.consistency_rate), (1.0, 1.0, 1.0));
        assert_eq!((r.f1_macro_coarse, r.f1_macro_fine), (1.0, 1.0));
        for (c, row) in r.confusion_fine.iter().enumerate() {
            assert_eq!(row.iter().sum::<u64>(), r.per_class_fine[c].support);
        }
    }

    #[test]
    fn confusion_csv_layout() {
        let csv = confusion_csv(&[vec![1, 2], vec![0, 3]], &["a".into(), "b".into()]).unwrap();
        assert_eq!(csv, "true\\predicted,a,b\na,1,2\nb,0,3\n");
    }
}
