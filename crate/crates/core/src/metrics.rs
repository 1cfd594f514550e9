//! Strict AP, soft AP and token accuracy over token pieces.
//!
//! A class is *correct* in a document under strict AP when the set of pieces
//! predicted as that class equals the ground-truth set, and under soft AP when
//! the ground-truth set is non-empty and contained in the prediction. The
//! denominator for a class is the number of documents where the class occurs
//! in the ground truth or the prediction. Means are taken over non-background
//! classes with a non-zero denominator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ClassSet;
use crate::error::{Error, Result};

/// Piece identity inside a document: `(source token index, piece index)`.
pub type PieceKey = (usize, usize);

/// Per-piece ground truth and prediction for one document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocPrediction {
    pub doc_id: String,
    pub pieces: Vec<PieceKey>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl DocPrediction {
    pub fn new(doc_id: impl Into<String>, pieces: Vec<PieceKey>, truth: Vec<usize>, predicted: Vec<usize>) -> Result<Self> {
        if pieces.len() != truth.len() || pieces.len() != predicted.len() {
            return Err(Error::Shape(format!(
                "{} pieces, {} labels, {} predictions",
                pieces.len(),
                truth.len(),
                predicted.len()
            )));
        }
        Ok(DocPrediction {
            doc_id: doc_id.into(),
            pieces,
            truth,
            predicted,
        })
    }
}

/// Piece sets per non-background class for one document.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FieldExtraction {
    pub truth: BTreeMap<usize, BTreeSet<PieceKey>>,
    pub predicted: BTreeMap<usize, BTreeSet<PieceKey>>,
}

impl FieldExtraction {
    pub fn from_prediction(doc: &DocPrediction, background: usize) -> Self {
        let mut out = FieldExtraction::default();
        for ((&key, &t), &p) in doc.pieces.iter().zip(&doc.truth).zip(&doc.predicted) {
            if t != background {
                out.truth.entry(t).or_default().insert(key);
            }
            if p != background {
                out.predicted.entry(p).or_default().insert(key);
            }
        }
        out
    }
}

/// Per-class scores (`None` when the denominator is zero) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    pub mean: Option<f64>,
}

fn score(
    docs: &[FieldExtraction],
    n_classes: usize,
    background: usize,
    correct: impl Fn(&BTreeSet<PieceKey>, &BTreeSet<PieceKey>) -> bool,
) -> Result<ClassScores> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let empty = BTreeSet::new();
    let mut hits = vec![0usize; n_classes];
    let mut support = vec![0usize; n_classes];
    for doc in docs {
        let present: BTreeSet<usize> = doc.truth.keys().chain(doc.predicted.keys()).copied().collect();
        for c in present {
            if c == background || c >= n_classes {
                continue;
            }
            support[c] += 1;
            let t = doc.truth.get(&c).unwrap_or(&empty);
            let p = doc.predicted.get(&c).unwrap_or(&empty);
            if correct(t, p) {
                hits[c] += 1;
            }
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (c != background && support[c] > 0).then(|| hits[c] as f64 / support[c] as f64))
        .collect();
    Ok(ClassScores {
        mean: mean(&per_class),
        per_class,
        support,
    })
}

fn mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn strict_ap(docs: &[FieldExtraction], n_classes: usize, background: usize) -> Result<ClassScores> {
    score(docs, n_classes, background, |t, p| t == p)
}

pub fn soft_ap(docs: &[FieldExtraction], n_classes: usize, background: usize) -> Result<ClassScores> {
    score(docs, n_classes, background, |t, p| !t.is_empty() && t.is_subset(p))
}

/// Fraction of non-background ground-truth pieces predicted correctly.
pub fn token_accuracy(predicted: &[usize], truth: &[usize], background: usize) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let (right, total) = predicted
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t != background)
        .fold((0usize, 0usize), |(r, n), (p, t)| (r + usize::from(p == t), n + 1));
    if total == 0 {
        return Err(Error::InvalidArgument("no non-background pieces to score".into()));
    }
    Ok(right as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub ap: Option<f64>,
    pub soft_ap: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub documents: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub mean_ap: Option<f64>,
    pub mean_soft_ap: Option<f64>,
    pub token_accuracy: Option<f64>,
    pub documents: usize,
}

impl EvalReport {
    /// Aligned text table with one `AP/softAP` cell per class.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "  -  ".to_string(), |v| format!("{v:.3}"));
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>13}  {:>8}  {:>5}", "class", "(AP/softAP)", "tok.acc", "docs");
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:<width$}  {:>13}  {:>8}  {:>5}",
                c.name,
                format!("{}/{}", fmt(c.ap), fmt(c.soft_ap)),
                fmt(c.token_accuracy),
                c.documents
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>13}  {:>8}  {:>5}",
            "mean",
            format!("{}/{}", fmt(self.mean_ap), fmt(self.mean_soft_ap)),
            fmt(self.token_accuracy),
            self.documents
        );
        out
    }
}

fn per_class_token_accuracy(docs: &[DocPrediction], n_classes: usize) -> Vec<Option<f64>> {
    let mut right = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for d in docs {
        for (&t, &p) in d.truth.iter().zip(&d.predicted) {
            if t < n_classes {
                total[t] += 1;
                right[t] += usize::from(t == p);
            }
        }
    }
    (0..n_classes)
        .map(|c| (total[c] > 0).then(|| right[c] as f64 / total[c] as f64))
        .collect()
}

/// Scores `docs` for every class in `classes` (index 0 is the background).
pub fn evaluate(docs: &[DocPrediction], classes: &ClassSet) -> Result<EvalReport> {
    let k = classes.len();
    let extractions: Vec<FieldExtraction> = docs.iter().map(|d| FieldExtraction::from_prediction(d, 0)).collect();
    let strict = strict_ap(&extractions, k, 0)?;
    let soft = soft_ap(&extractions, k, 0)?;
    let tok = per_class_token_accuracy(docs, k);
    let all_pred: Vec<usize> = docs.iter().flat_map(|d| d.predicted.iter().copied()).collect();
    let all_truth: Vec<usize> = docs.iter().flat_map(|d| d.truth.iter().copied()).collect();
    Ok(EvalReport {
        classes: (1..k)
            .map(|c| ClassReport {
                name: classes.name(c).unwrap_or("?").to_string(),
                ap: strict.per_class[c],
                soft_ap: soft.per_class[c],
                token_accuracy: tok[c],
                documents: strict.support[c],
            })
            .collect(),
        mean_ap: strict.mean,
        mean_soft_ap: soft.mean,
        token_accuracy: token_accuracy(&all_pred, &all_truth, 0).ok(),
        documents: docs.len(),
    })
}

/// Independent brute-force scoring by enumerating pieces per document and
/// class with plain vectors. Used to cross-check [`evaluate`].
pub fn oracle_eval(docs: &[DocPrediction], classes: &ClassSet) -> Result<EvalReport> {
    if docs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let k = classes.len();
    let mut reports = Vec::new();
    let (mut ap_sum, mut soft_sum, mut counted) = (0.0, 0.0, 0usize);
    for c in 1..k {
        let (mut denom, mut strict_ok, mut soft_ok) = (0usize, 0usize, 0usize);
        for d in docs {
            let gt: Vec<PieceKey> = (0..d.pieces.len()).filter(|&i| d.truth[i] == c).map(|i| d.pieces[i]).collect();
            let pr: Vec<PieceKey> = (0..d.pieces.len()).filter(|&i| d.predicted[i] == c).map(|i| d.pieces[i]).collect();
            if gt.is_empty() && pr.is_empty() {
                continue;
            }
            denom += 1;
            let gt_in_pr = gt.iter().all(|g| pr.contains(g));
            let pr_in_gt = pr.iter().all(|p| gt.contains(p));
            if gt_in_pr && pr_in_gt {
                strict_ok += 1;
            }
            if !gt.is_empty() && gt_in_pr {
                soft_ok += 1;
            }
        }
        let (mut tok_right, mut tok_total) = (0usize, 0usize);
        for d in docs {
            for i in 0..d.truth.len() {
                if d.truth[i] == c {
                    tok_total += 1;
                    if d.predicted[i] == c {
                        tok_right += 1;
                    }
                }
            }
        }
        let (ap, soft) = if denom == 0 {
            (None, None)
        } else {
            let ap = strict_ok as f64 / denom as f64;
            let soft = soft_ok as f64 / denom as f64;
            ap_sum += ap;
            soft_sum += soft;
            counted += 1;
            (Some(ap), Some(soft))
        };
        reports.push(ClassReport {
            name: classes.name(c).unwrap_or("?").to_string(),
            ap,
            soft_ap: soft,
            token_accuracy: if tok_total == 0 { None } else { Some(tok_right as f64 / tok_total as f64) },
            documents: denom,
        });
    }
    let (mut right, mut total) = (0usize, 0usize);
    for d in docs {
        for i in 0..d.truth.len() {
            if d.truth[i] != 0 {
                total += 1;
                if d.predicted[i] == d.truth[i] {
                    right += 1;
                }
            }
        }
    }
    Ok(EvalReport {
        classes: reports,
        mean_ap: if counted == 0 { None } else { Some(ap_sum / counted as f64) },
        mean_soft_ap: if counted == 0 { None } else { Some(soft_sum / counted as f64) },
        token_accuracy: if total == 0 { None } else { Some(right as f64 / total as f64) },
        documents: docs.len(),
    })
}
