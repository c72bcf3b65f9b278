//! Accuracy, per-class accuracy, confusion matrix and per-image explanations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::pki::Prediction;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub total: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `NaN`-free: classes without samples report 0.
    pub per_class_accuracy: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_labels(classes: &[String], truth: &[usize], predicted: &[usize]) -> Result<Self> {
        let n = classes.len();
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut confusion = vec![vec![0usize; n]; n];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= n || p >= n {
                return Err(Error::LabelOutOfRange { label: t.max(p), num_classes: n });
            }
            confusion[t][p] += 1;
        }
        let correct = (0..n).map(|i| confusion[i][i]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let total: usize = row.iter().sum();
                if total == 0 {
                    0.0
                } else {
                    row[i] as f64 / total as f64
                }
            })
            .collect();
        let total = truth.len();
        Ok(Self {
            classes: classes.to_vec(),
            total,
            correct,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            per_class_accuracy,
            confusion,
        })
    }
}

/// Per-image record written by `eval --explain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub path: String,
    pub label: usize,
    pub predicted: usize,
    pub logits: Vec<f64>,
    /// `P^att`; empty when the model has no aggregation block.
    pub part_attention: Vec<f64>,
}

/// Mean `P^att` per true class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassContribution {
    pub class: String,
    pub count: usize,
    pub mean_part_attention: Vec<f64>,
}

pub fn check_classes(model_classes: &[String], data: &Dataset) -> Result<()> {
    if model_classes != data.classes.as_slice() {
        return Err(Error::ClassMismatch(format!(
            "checkpoint classes {:?} differ from dataset classes {:?}",
            model_classes, data.classes
        )));
    }
    Ok(())
}

/// Runs the model in inference mode over `data`.
pub fn evaluate(
    model: &Model,
    classes: &[String],
    data: &Dataset,
    batch: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    check_classes(classes, data)?;
    let mut predictions = Vec::with_capacity(data.len());
    for chunk in data.images.chunks(batch.max(1)) {
        predictions.extend(model.predict(&chunk.iter().collect::<Vec<_>>())?);
    }
    let predicted: Vec<usize> = predictions.iter().map(|p| p.label).collect();
    Ok((EvalReport::from_labels(classes, &data.labels, &predicted)?, predictions))
}

pub fn explanations(data: &Dataset, predictions: &[Prediction]) -> Vec<Explanation> {
    data.paths
        .iter()
        .zip(&data.labels)
        .zip(predictions)
        .map(|((path, &label), p)| Explanation {
            path: path.display().to_string(),
            label,
            predicted: p.label,
            logits: p.logits.clone(),
            part_attention: p.part_scores.clone(),
        })
        .collect()
}

pub fn class_contributions(classes: &[String], explanations: &[Explanation]) -> Vec<ClassContribution> {
    classes
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let rows: Vec<&Explanation> = explanations.iter().filter(|e| e.label == k).collect();
            let width = rows.first().map(|e| e.part_attention.len()).unwrap_or(0);
            let mut mean = vec![0.0; width];
            for e in &rows {
                for (m, v) in mean.iter_mut().zip(&e.part_attention) {
                    *m += v / rows.len() as f64;
                }
            }
            ClassContribution { class: name.clone(), count: rows.len(), mean_part_attention: mean }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn oracle_predictions_score_one() {
        let truth: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = EvalReport::from_labels(&names(4), &truth, &truth).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class_accuracy.iter().all(|&a| a == 1.0));
        assert_eq!(r.confusion[2][2], 10);
    }

    #[test]
    fn uniform_guessing_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let truth: Vec<usize> = (0..10_000).map(|i| i % 4).collect();
        let guess: Vec<usize> = (0..10_000).map(|_| rng.random_range(0..4)).collect();
        let r = EvalReport::from_labels(&names(4), &truth, &guess).unwrap();
        assert!((r.accuracy - 0.25).abs() <= 0.02, "{}", r.accuracy);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 10_000);
    }

    #[test]
    fn class_mismatch_is_an_error() {
        let data = Dataset { classes: names(3), images: vec![], labels: vec![], paths: vec![] };
        assert!(matches!(check_classes(&names(4), &data), Err(Error::ClassMismatch(_))));
    }
}
