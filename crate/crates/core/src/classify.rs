//! Flow classification: a multinomial naive Bayes baseline, the remote
//! classifier client, and the classification report (per-class scores,
//! confusion matrix, one-vs-rest ROC-AUC).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::flow::TextualizedRow;
use crate::http::{JsonClient, RetryPolicy};
use crate::scalar::{harmonic, Real};

/// The class conventionally treated as benign traffic.
pub const NORMAL_CLASS: &str = "Normal";

/// Slack allowed on the sum of a remote probability row (servers often
/// compute softmax in single precision).
pub const REMOTE_PROB_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub label: String,
    /// One probability per class, in the order of the accompanying class list.
    pub probs: Vec<T>,
}

impl<T: Real> Prediction<T> {
    /// Builds a prediction from probabilities; the label is the first class
    /// holding the maximum.
    pub fn from_probs(classes: &[String], probs: Vec<T>) -> Result<Self> {
        if classes.len() != probs.len() || classes.is_empty() {
            return Err(Error::Integrity(format!(
                "{} probabilities for {} classes",
                probs.len(),
                classes.len()
            )));
        }
        let best = argmax(&probs);
        Ok(Prediction {
            label: classes[best].clone(),
            probs,
        })
    }

    pub fn confidence(&self) -> T {
        self.probs.iter().copied().fold(T::zero(), T::max)
    }
}

fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// A batch of predictions sharing one class list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classified<T> {
    pub classes: Vec<String>,
    pub predictions: Vec<Prediction<T>>,
}

pub trait Classifier<T: Real>: Send + Sync {
    fn name(&self) -> &str;
    fn classify(&self, texts: &[&str]) -> Result<Classified<T>>;
}

fn tokens(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct NbModel<T> {
    /// Sorted class names.
    pub classes: Vec<String>,
    pub log_priors: Vec<T>,
    /// Sorted vocabulary; `log_likelihoods[c][w]` indexes into it.
    pub vocab: Vec<String>,
    pub log_likelihoods: Vec<Vec<T>>,
    /// Set when training saw a single class.
    pub degenerate: bool,
}

/// Multinomial naive Bayes over whitespace tokens with add-one smoothing.
pub fn train_nb<T: Real>(rows: &[TextualizedRow]) -> Result<NbModel<T>> {
    if rows.is_empty() {
        return Err(Error::Precondition("no training rows".into()));
    }
    let mut docs: BTreeMap<&str, usize> = BTreeMap::new();
    let mut counts: BTreeMap<&str, BTreeMap<&str, u64>> = BTreeMap::new();
    let mut vocab: BTreeSet<&str> = BTreeSet::new();
    for row in rows {
        *docs.entry(&row.label).or_default() += 1;
        let per_class = counts.entry(&row.label).or_default();
        for t in tokens(&row.text) {
            *per_class.entry(t).or_default() += 1;
            vocab.insert(t);
        }
    }
    let vocab: Vec<&str> = vocab.into_iter().collect();
    let v = T::of_usize(vocab.len());
    let n = T::of_usize(rows.len());
    let mut log_priors = Vec::new();
    let mut log_likelihoods = Vec::new();
    for (class, &d) in &docs {
        log_priors.push((T::of_usize(d) / n).ln());
        let per_class = &counts[class];
        let total = T::of(per_class.values().sum::<u64>() as f64);
        let denom = total + v;
        log_likelihoods.push(
            vocab
                .iter()
                .map(|w| ((T::of(*per_class.get(w).unwrap_or(&0) as f64) + T::one()) / denom).ln())
                .collect(),
        );
    }
    Ok(NbModel {
        degenerate: docs.len() < 2,
        classes: docs.keys().map(|c| (*c).to_owned()).collect(),
        log_priors,
        vocab: vocab.into_iter().map(str::to_owned).collect(),
        log_likelihoods,
    })
}

impl<T: Real> NbModel<T> {
    fn word_index(&self, token: &str) -> Option<usize> {
        self.vocab.binary_search_by(|w| w.as_str().cmp(token)).ok()
    }

    /// Per-class log scores; out-of-vocabulary tokens contribute nothing.
    pub fn log_scores(&self, text: &str) -> Vec<T> {
        let mut scores = self.log_priors.clone();
        for t in tokens(text) {
            if let Some(w) = self.word_index(t) {
                for (c, s) in scores.iter_mut().enumerate() {
                    *s += self.log_likelihoods[c][w];
                }
            }
        }
        scores
    }
}

pub fn predict_nb<T: Real>(model: &NbModel<T>, text: &str) -> Result<Prediction<T>> {
    if model.degenerate {
        return Err(Error::Degenerate(format!(
            "model was trained on a single class ({})",
            model.classes.join(", ")
        )));
    }
    let scores = model.log_scores(text);
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = scores.iter().map(|s| (*s - max).exp()).collect();
    let z: T = exps.iter().copied().sum();
    Prediction::from_probs(&model.classes, exps.into_iter().map(|e| e / z).collect())
}

impl<T: Real> Classifier<T> for NbModel<T> {
    fn name(&self) -> &str {
        "naive-bayes"
    }

    fn classify(&self, texts: &[&str]) -> Result<Classified<T>> {
        Ok(Classified {
            classes: self.classes.clone(),
            predictions: texts
                .iter()
                .map(|t| predict_nb(self, t))
                .collect::<Result<_>>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyRequest<S = String> {
    pub texts: Vec<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub classes: Vec<String>,
    pub labels: Vec<String>,
    pub probs: Vec<Vec<f64>>,
}

impl<T: Real> From<&Classified<T>> for ClassifyResponse {
    fn from(c: &Classified<T>) -> Self {
        ClassifyResponse {
            classes: c.classes.clone(),
            labels: c.predictions.iter().map(|p| p.label.clone()).collect(),
            probs: c
                .predictions
                .iter()
                .map(|p| p.probs.iter().map(|v| v.as_f64()).collect())
                .collect(),
        }
    }
}

/// Checks a classify response against the contract: one label and one
/// probability row per text, rows sized to the class list and summing to 1,
/// labels drawn from the class list and carrying a maximal probability.
/// `expected` additionally pins the class set.
pub fn validate_response<T: Real>(
    resp: ClassifyResponse,
    n_texts: usize,
    expected: Option<&[String]>,
) -> Result<Classified<T>> {
    let bad = |m: String| Err(Error::Integrity(m));
    if resp.classes.is_empty() {
        return bad("empty class list".into());
    }
    let set: BTreeSet<&String> = resp.classes.iter().collect();
    if set.len() != resp.classes.len() {
        return bad("duplicate class names".into());
    }
    if let Some(expected) = expected {
        let want: BTreeSet<&String> = expected.iter().collect();
        if want != set {
            return bad(format!(
                "class set {:?} differs from expected {:?}",
                resp.classes, expected
            ));
        }
    }
    if resp.labels.len() != n_texts || resp.probs.len() != n_texts {
        return bad(format!(
            "{} texts sent, {} labels and {} probability rows received",
            n_texts,
            resp.labels.len(),
            resp.probs.len()
        ));
    }
    let mut predictions = Vec::with_capacity(n_texts);
    for (i, (label, row)) in resp.labels.into_iter().zip(resp.probs).enumerate() {
        if row.len() != resp.classes.len() {
            return bad(format!(
                "row {i}: {} probabilities for {} classes",
                row.len(),
                resp.classes.len()
            ));
        }
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return bad(format!(
                "row {i}: probabilities must be finite and non-negative"
            ));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > REMOTE_PROB_TOLERANCE {
            return bad(format!("row {i}: probabilities sum to {sum}"));
        }
        let Some(li) = resp.classes.iter().position(|c| *c == label) else {
            return bad(format!("row {i}: label {label:?} not in class list"));
        };
        let max = row.iter().copied().fold(0.0, f64::max);
        if row[li] < max {
            return bad(format!(
                "row {i}: label {label:?} is not the most probable class"
            ));
        }
        predictions.push(Prediction {
            label,
            probs: row.into_iter().map(T::of).collect(),
        });
    }
    Ok(Classified {
        classes: resp.classes,
        predictions,
    })
}

/// Client for a remote model behind `POST /v1/classify`.
#[derive(Debug, Clone)]
pub struct HttpClassifier {
    client: JsonClient,
    expected: Option<Vec<String>>,
}

impl HttpClassifier {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self::with_retry(base_url, RetryPolicy::default())
    }

    pub fn with_retry(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        HttpClassifier {
            client: JsonClient::with_retry(base_url, retry),
            expected: None,
        }
    }

    /// Rejects responses whose class set differs from `classes`.
    pub fn expecting(mut self, classes: Vec<String>) -> Self {
        self.expected = Some(classes);
        self
    }
}

impl<T: Real> Classifier<T> for HttpClassifier {
    fn name(&self) -> &str {
        self.client.base_url()
    }

    fn classify(&self, texts: &[&str]) -> Result<Classified<T>> {
        if texts.is_empty() {
            return Err(Error::Precondition("no texts to classify".into()));
        }
        let resp: ClassifyResponse = self.client.post(
            "/v1/classify",
            &ClassifyRequest {
                texts: texts.to_vec(),
            },
        )?;
        validate_response(resp, texts.len(), self.expected.as_deref())
    }
}

pub fn remote_classify<T: Real>(
    client: &HttpClassifier,
    texts: &[&str],
) -> Result<Vec<Prediction<T>>> {
    Classifier::<T>::classify(client, texts).map(|c| c.predictions)
}

/// Area under the ROC curve by the trapezoid rule over distinct thresholds.
///
/// Counts are kept as integers (each trapezoid doubled), so the result is
/// exactly `(2 * wins + ties) / (2 * P * N)` over positive/negative pairs.
pub fn roc_auc_binary<T: Real>(scores: &[T], positives: &[bool]) -> Result<T> {
    if scores.len() != positives.len() {
        return Err(Error::Precondition(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::param("scores", "NaN score"));
    }
    let p = positives.iter().filter(|b| **b).count() as u128;
    let n = positives.len() as u128 - p;
    if p == 0 || n == 0 {
        return Err(Error::Undefined(
            "ROC-AUC needs both positive and negative examples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("NaN excluded"));
    let (mut tp, mut area2) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let (mut dtp, mut dfp) = (0u128, 0u128);
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if positives[order[i]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        area2 += dfp * (2 * tp + dtp);
        tp += dtp;
    }
    Ok(T::of(area2 as f64) / T::of((2 * p * n) as f64))
}

/// Precision, recall and F1 on the percent scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores<T> {
    pub class: String,
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub support: u64,
    /// The class was never predicted, so precision is reported as 0.
    pub zero_division: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Average<T> {
    pub precision: T,
    pub recall: T,
    pub f1: T,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Serialize", deserialize = "T: Deserialize<'de>"))]
pub struct EvalReport<T> {
    pub classes: Vec<String>,
    pub per_class: Vec<ClassScores<T>>,
    /// Percent.
    pub accuracy: T,
    pub macro_avg: Average<T>,
    pub weighted_avg: Average<T>,
    /// `confusion[true][pred]`, in class order.
    pub confusion: Vec<Vec<u64>>,
    /// One-vs-rest AUC as a fraction; `None` where the class is absent from
    /// the gold labels or is the only one present.
    pub roc_auc: Vec<Option<T>>,
    pub total: u64,
}

pub fn evaluate<T: Real>(
    predictions: &[Prediction<T>],
    golds: &[String],
    classes: &[String],
) -> Result<EvalReport<T>> {
    if predictions.len() != golds.len() {
        return Err(Error::Precondition(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if classes.is_empty() {
        return Err(Error::Precondition("empty class list".into()));
    }
    let index = |name: &str, what: &str| {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Precondition(format!("{what} label {name:?} not in class list")))
    };
    let k = classes.len();
    let mut confusion = vec![vec![0u64; k]; k];
    for (pred, gold) in predictions.iter().zip(golds) {
        if pred.probs.len() != k {
            return Err(Error::Precondition(format!(
                "prediction has {} probabilities for {k} classes",
                pred.probs.len()
            )));
        }
        confusion[index(gold, "gold")?][index(&pred.label, "predicted")?] += 1;
    }
    let total = golds.len() as u64;
    let pct = |num: u64, den: u64| T::of(num as f64) / T::of(den as f64) * T::hundred();

    let mut per_class = Vec::with_capacity(k);
    for (c, class) in classes.iter().enumerate() {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
        let precision = if predicted == 0 {
            T::zero()
        } else {
            pct(tp, predicted)
        };
        let recall = if support == 0 {
            T::zero()
        } else {
            pct(tp, support)
        };
        per_class.push(ClassScores {
            class: class.clone(),
            precision,
            recall,
            f1: harmonic(precision, recall),
            support,
            zero_division: predicted == 0,
        });
    }
    let kt = T::of_usize(k);
    let macro_avg = Average {
        precision: per_class.iter().map(|s| s.precision).sum::<T>() / kt,
        recall: per_class.iter().map(|s| s.recall).sum::<T>() / kt,
        f1: per_class.iter().map(|s| s.f1).sum::<T>() / kt,
        support: total,
    };
    let weighted = |f: fn(&ClassScores<T>) -> T| {
        if total == 0 {
            T::zero()
        } else {
            per_class
                .iter()
                .map(|s| f(s) * T::of(s.support as f64))
                .sum::<T>()
                / T::of(total as f64)
        }
    };
    let weighted_avg = Average {
        precision: weighted(|s| s.precision),
        recall: weighted(|s| s.recall),
        f1: weighted(|s| s.f1),
        support: total,
    };
    let trace: u64 = (0..k).map(|c| confusion[c][c]).sum();
    let accuracy = if total == 0 {
        T::zero()
    } else {
        pct(trace, total)
    };

    let mut roc_auc = Vec::with_capacity(k);
    for (c, class) in classes.iter().enumerate() {
        let scores: Vec<T> = predictions.iter().map(|p| p.probs[c]).collect();
        let positives: Vec<bool> = golds.iter().map(|g| g == class).collect();
        roc_auc.push(match roc_auc_binary(&scores, &positives) {
            Ok(a) => Some(a),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        });
    }

    Ok(EvalReport {
        classes: classes.to_vec(),
        per_class,
        accuracy,
        macro_avg,
        weighted_avg,
        confusion,
        roc_auc,
        total,
    })
}

fn num<T: Real>(v: T) -> Value {
    json!(v.as_f64())
}

fn avg_json<T: Real>(a: &Average<T>) -> Value {
    json!({ "precision": num(a.precision), "recall": num(a.recall), "f1-score": num(a.f1), "support": a.support })
}

impl<T: Real> EvalReport<T> {
    /// Report in the published table layout: one row per class, then macro
    /// and weighted averages and accuracy, plus `confusion` and `roc_auc`
    /// maps keyed by class name.
    pub fn to_table_json(&self) -> Value {
        let rows: Vec<Value> = self
            .per_class
            .iter()
            .map(|s| {
                json!({
                    "class": s.class,
                    "precision": num(s.precision),
                    "recall": num(s.recall),
                    "f1-score": num(s.f1),
                    "support": s.support,
                })
            })
            .collect();
        let mut confusion = Map::new();
        for (c, class) in self.classes.iter().enumerate() {
            let row: Map<String, Value> = self
                .classes
                .iter()
                .zip(&self.confusion[c])
                .map(|(p, n)| (p.clone(), json!(n)))
                .collect();
            confusion.insert(class.clone(), Value::Object(row));
        }
        let roc: Map<String, Value> = self
            .classes
            .iter()
            .zip(&self.roc_auc)
            .map(|(c, a)| (c.clone(), a.map(num).unwrap_or(Value::Null)))
            .collect();
        let zero_division: Vec<&str> = self
            .per_class
            .iter()
            .filter(|s| s.zero_division)
            .map(|s| s.class.as_str())
            .collect();
        json!({
            "classes": self.classes,
            "rows": rows,
            "macro avg": avg_json(&self.macro_avg),
            "weighted avg": avg_json(&self.weighted_avg),
            "accuracy": num(self.accuracy),
            "total": self.total,
            "confusion": confusion,
            "roc_auc": roc,
            "zero_division": zero_division,
        })
    }

    /// Plain-text classification report.
    pub fn render(&self) -> String {
        let width = self
            .classes
            .iter()
            .map(|c| c.chars().count())
            .chain([12])
            .max()
            .unwrap_or(12);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>9}  {:>9}  {:>9}",
            "Class", "Precision", "Recall", "F1-Score", "Support"
        );
        let line = |out: &mut String, name: &str, p: T, r: T, f: T, s: u64| {
            let _ = writeln!(
                out,
                "{name:<width$}  {:>9.2}  {:>9.2}  {:>9.2}  {s:>9}",
                p.as_f64(),
                r.as_f64(),
                f.as_f64()
            );
        };
        for s in &self.per_class {
            line(&mut out, &s.class, s.precision, s.recall, s.f1, s.support);
        }
        let m = &self.macro_avg;
        line(
            &mut out,
            "Macro Avg",
            m.precision,
            m.recall,
            m.f1,
            m.support,
        );
        let w = &self.weighted_avg;
        line(
            &mut out,
            "Weighted Avg",
            w.precision,
            w.recall,
            w.f1,
            w.support,
        );
        let _ = writeln!(
            out,
            "{:<width$}  {:>.2}%",
            "Accuracy",
            self.accuracy.as_f64()
        );
        out
    }
}

/// Structural check of a report produced by [`EvalReport::to_table_json`].
pub fn validate_table_json(report: &Value) -> Result<()> {
    let bad = |m: &str| Err(Error::Schema(m.to_owned()));
    let Some(classes) = report["classes"].as_array() else {
        return bad("missing classes");
    };
    let classes: Vec<&str> = classes.iter().filter_map(Value::as_str).collect();
    let Some(rows) = report["rows"].as_array() else {
        return bad("missing rows");
    };
    if rows.len() != classes.len() {
        return bad("one row per class expected");
    }
    let is_prf = |v: &Value| {
        ["precision", "recall", "f1-score"]
            .iter()
            .all(|k| v[k].as_f64().is_some_and(|x| (0.0..=100.0).contains(&x)))
            && v["support"].as_u64().is_some()
    };
    for (row, class) in rows.iter().zip(&classes) {
        if row["class"].as_str() != Some(class) || !is_prf(row) {
            return bad("malformed class row");
        }
    }
    if !is_prf(&report["macro avg"]) || !is_prf(&report["weighted avg"]) {
        return bad("malformed average row");
    }
    let total = report["total"].as_u64();
    let supports: u64 = rows.iter().filter_map(|r| r["support"].as_u64()).sum();
    if total != Some(supports) || report["weighted avg"]["support"].as_u64() != total {
        return bad("supports do not add up to total");
    }
    if !report["accuracy"]
        .as_f64()
        .is_some_and(|a| (0.0..=100.0).contains(&a))
    {
        return bad("accuracy out of range");
    }
    for class in &classes {
        let row = &report["confusion"][*class];
        let Some(row) = row.as_object() else {
            return bad("confusion map incomplete");
        };
        if row.len() != classes.len() || row.values().any(|v| v.as_u64().is_none()) {
            return bad("confusion row malformed");
        }
        let auc = &report["roc_auc"][*class];
        if !(auc.is_null() || auc.as_f64().is_some_and(|a| (0.0..=1.0).contains(&a))) {
            return bad("roc_auc out of range");
        }
    }
    Ok(())
}
