//! SLM annotations: turning classifier logits into (label, confidence) pairs,
//! and aggregating several annotators by majority or confidence-weighted vote.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::backend::LogitVector;
use crate::dataset::LabelSpace;
use crate::Error;

/// How a winning logit becomes a confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceMode {
    /// Logistic squash of the winning logit alone. The reference setting.
    Sigmoid,
    /// Winning class probability under a softmax over all logits.
    Softmax,
}

impl fmt::Display for ConfidenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfidenceMode::Sigmoid => write!(f, "sigmoid"),
            ConfidenceMode::Softmax => write!(f, "softmax"),
        }
    }
}

// Confidences live in the open interval (0, 1): a saturated logit must not
// round the stored value up to a certainty the model never expressed.
const CONFIDENCE_FLOOR: f64 = 1e-12;
const CONFIDENCE_CEIL: f64 = 1.0 - 1e-12;

/// One SLM's verdict on one example. `model_id` is the prompt-facing model
/// name, not the backend id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlmAnnotation {
    pub model_id: String,
    pub predicted_label: String,
    pub confidence: f64,
}

/// Annotations from an ensemble, in ensemble order. Model ids are unique;
/// the empty set stands for "no ensemble" and renders nothing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    annotations: Vec<SlmAnnotation>,
}

impl AnnotationSet {
    pub fn new(annotations: Vec<SlmAnnotation>) -> Result<Self, Error> {
        let mut seen = BTreeSet::new();
        for a in &annotations {
            if !seen.insert(a.model_id.as_str()) {
                return Err(Error::Invalid(format!(
                    "duplicate model id `{}` in annotation set",
                    a.model_id
                )));
            }
            if !(a.confidence > 0.0 && a.confidence < 1.0) {
                return Err(Error::Invalid(format!(
                    "model `{}`: confidence {} is outside (0, 1)",
                    a.model_id, a.confidence
                )));
            }
        }
        Ok(AnnotationSet { annotations })
    }

    pub fn empty() -> Self {
        AnnotationSet {
            annotations: Vec::new(),
        }
    }

    pub fn annotations(&self) -> &[SlmAnnotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    /// Ensemble sizes exercised in the reference experiments.
    pub fn is_standard_ensemble_size(&self) -> bool {
        (1..=5).contains(&self.annotations.len())
    }

    pub fn predicted_labels(&self) -> Vec<&str> {
        self.annotations
            .iter()
            .map(|a| a.predicted_label.as_str())
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamp_confidence(c: f64) -> f64 {
    c.clamp(CONFIDENCE_FLOOR, CONFIDENCE_CEIL)
}

/// Turn a logit vector into an annotation. The predicted label is the argmax
/// (ties resolve to the lowest index); confidence is the winning logit
/// squashed per `mode`, clamped into (0, 1).
pub fn annotate(
    logits: &LogitVector,
    label_space: &LabelSpace,
    model_id: &str,
    mode: ConfidenceMode,
) -> Result<SlmAnnotation, Error> {
    let values = logits.values();
    if values.len() != label_space.len() {
        return Err(Error::Invalid(format!(
            "model `{model_id}`: {} logits for {} labels [{}]",
            values.len(),
            label_space.len(),
            label_space.describe()
        )));
    }
    let winner = logits.argmax();
    let confidence = match mode {
        ConfidenceMode::Sigmoid => sigmoid(values[winner]),
        ConfidenceMode::Softmax => {
            // Stabilized: exp of (x - max) so large logits cannot overflow.
            let max = values[winner];
            let denom: f64 = values.iter().map(|v| (v - max).exp()).sum();
            1.0 / denom
        }
    };
    Ok(SlmAnnotation {
        model_id: model_id.to_string(),
        predicted_label: label_space.labels()[winner].clone(),
        confidence: clamp_confidence(confidence),
    })
}

/// Unweighted vote over predicted labels. The unique mode wins; when the top
/// count is shared, the last prediction in ensemble order is used.
pub fn majority_vote<S: AsRef<str>>(predictions: &[S]) -> Result<String, Error> {
    if predictions.is_empty() {
        return Err(Error::Invalid("majority vote over zero predictions".into()));
    }
    let mut tally: Vec<(&str, usize)> = Vec::new();
    for p in predictions {
        let label = p.as_ref();
        match tally.iter_mut().find(|(l, _)| *l == label) {
            Some((_, n)) => *n += 1,
            None => tally.push((label, 1)),
        }
    }
    let top = tally.iter().map(|(_, n)| *n).max().unwrap();
    let leaders: Vec<&str> = tally
        .iter()
        .filter(|(_, n)| *n == top)
        .map(|(l, _)| *l)
        .collect();
    if leaders.len() == 1 {
        return Ok(leaders[0].to_string());
    }
    Ok(predictions.last().unwrap().as_ref().to_string())
}

/// Confidence-weighted vote: each label's score is the sum of the confidences
/// of the annotators that predicted it. Exact score ties resolve to the label
/// whose last supporting annotator comes latest in ensemble order.
pub fn weighted_vote(annotations: &AnnotationSet) -> Result<String, Error> {
    if annotations.is_empty() {
        return Err(Error::Invalid("weighted vote over zero annotations".into()));
    }
    // (label, summed confidence, index of last supporter)
    let mut scores: Vec<(&str, f64, usize)> = Vec::new();
    for (idx, a) in annotations.annotations().iter().enumerate() {
        let label = a.predicted_label.as_str();
        match scores.iter_mut().find(|(l, _, _)| *l == label) {
            Some((_, sum, last)) => {
                *sum += a.confidence;
                *last = idx;
            }
            None => scores.push((label, a.confidence, idx)),
        }
    }
    let best = scores
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)))
        .unwrap();
    Ok(best.0.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn binary_space() -> LabelSpace {
        LabelSpace::new(["positive", "negative"]).unwrap()
    }

    fn annotation(model_id: &str, label: &str, confidence: f64) -> SlmAnnotation {
        SlmAnnotation {
            model_id: model_id.to_string(),
            predicted_label: label.to_string(),
            confidence,
        }
    }

    fn set(annotations: Vec<SlmAnnotation>) -> AnnotationSet {
        AnnotationSet::new(annotations).unwrap()
    }

    #[test]
    fn annotate_takes_the_argmax_label() {
        let logits = LogitVector::new(vec![-1.2, 3.4]).unwrap();
        let a = annotate(&logits, &binary_space(), "m", ConfidenceMode::Sigmoid).unwrap();
        assert_eq!(a.predicted_label, "negative");
    }

    #[test]
    fn annotate_breaks_ties_toward_the_lower_index() {
        let logits = LogitVector::new(vec![0.5, 0.5]).unwrap();
        let a = annotate(&logits, &binary_space(), "m", ConfidenceMode::Sigmoid).unwrap();
        assert_eq!(a.predicted_label, "positive");
    }

    #[test]
    fn sigmoid_confidence_of_ln9_is_nine_tenths() {
        // sigmoid(ln 9) = 9/10 exactly; checked against the closed form.
        let x = 9.0_f64.ln();
        let logits = LogitVector::new(vec![x, 0.0]).unwrap();
        let a = annotate(&logits, &binary_space(), "m", ConfidenceMode::Sigmoid).unwrap();
        assert!((a.confidence - 0.9).abs() < 1e-12, "got {}", a.confidence);
    }

    #[test]
    fn softmax_confidence_sums_complementary_for_binary() {
        let logits = LogitVector::new(vec![2.0, -1.0]).unwrap();
        let space = binary_space();
        let a = annotate(&logits, &space, "m", ConfidenceMode::Softmax).unwrap();
        let flipped = LogitVector::new(vec![-1.0, 2.0]).unwrap();
        let b = annotate(&flipped, &space, "m", ConfidenceMode::Softmax).unwrap();
        // Same gap, same winning probability; independent direct evaluation.
        let expected = (3.0_f64).exp() / (1.0 + (3.0_f64).exp());
        assert!((a.confidence - expected).abs() < 1e-12);
        assert!((b.confidence - expected).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_inside_the_open_interval() {
        let logits = LogitVector::new(vec![1e6, -1e6]).unwrap();
        let space = binary_space();
        for mode in [ConfidenceMode::Sigmoid, ConfidenceMode::Softmax] {
            let a = annotate(&logits, &space, "m", mode).unwrap();
            assert!(a.confidence > 0.0 && a.confidence < 1.0);
        }
    }

    #[test]
    fn annotate_rejects_length_mismatch() {
        let logits = LogitVector::new(vec![0.1, 0.2, 0.3]).unwrap();
        assert!(annotate(&logits, &binary_space(), "m", ConfidenceMode::Sigmoid).is_err());
    }

    #[test]
    fn majority_vote_picks_the_unique_mode() {
        let v = majority_vote(&["a", "b", "a"]).unwrap();
        assert_eq!(v, "a");
    }

    #[test]
    fn majority_vote_tie_falls_back_to_last_prediction() {
        assert_eq!(majority_vote(&["a", "b"]).unwrap(), "b");
        assert_eq!(majority_vote(&["b", "a", "b", "a"]).unwrap(), "a");
    }

    #[test]
    fn majority_vote_rejects_empty_input() {
        assert!(majority_vote::<&str>(&[]).is_err());
    }

    #[test]
    fn weighted_vote_sums_confidences_per_label() {
        // One confident dissenter loses to two moderate agreers: 0.9 < 1.2.
        let s = set(vec![
            annotation("m1", "positive", 0.9),
            annotation("m2", "negative", 0.6),
            annotation("m3", "negative", 0.6),
        ]);
        assert_eq!(weighted_vote(&s).unwrap(), "negative");
    }

    #[test]
    fn weighted_vote_tie_goes_to_the_last_supporter() {
        let s = set(vec![
            annotation("m1", "positive", 0.5),
            annotation("m2", "negative", 0.5),
        ]);
        assert_eq!(weighted_vote(&s).unwrap(), "negative");
        let s = set(vec![
            annotation("m1", "negative", 0.5),
            annotation("m2", "positive", 0.5),
        ]);
        assert_eq!(weighted_vote(&s).unwrap(), "positive");
    }

    #[test]
    fn weighted_vote_single_annotator_wins_outright() {
        let s = set(vec![annotation("m1", "positive", 0.51)]);
        assert_eq!(weighted_vote(&s).unwrap(), "positive");
    }

    #[test]
    fn annotation_set_rejects_duplicate_model_ids() {
        let err = AnnotationSet::new(vec![
            annotation("m", "positive", 0.6),
            annotation("m", "negative", 0.7),
        ]);
        assert!(err.is_err());
    }

    #[test]
    fn annotation_set_rejects_out_of_range_confidence() {
        assert!(AnnotationSet::new(vec![annotation("m", "positive", 1.0)]).is_err());
        assert!(AnnotationSet::new(vec![annotation("m", "positive", 0.0)]).is_err());
    }

    #[test]
    fn standard_ensemble_sizes_are_one_through_five() {
        assert!(!AnnotationSet::empty().is_standard_ensemble_size());
        let annotations = (0..6)
            .map(|i| annotation(&format!("m{i}"), "positive", 0.6))
            .collect::<Vec<_>>();
        assert!(set(annotations[..5].to_vec()).is_standard_ensemble_size());
        assert!(!set(annotations.clone()).is_standard_ensemble_size());
    }
}
