//! Bayes-rule prediction from per-class marginal likelihoods and
//! dataset-level evaluation. Class priors are equal by construction.

use rayon::prelude::*;

use crate::data::normalize_apply;
use crate::error::{MogpError, Result};
use crate::model::{Dataset, Instance, ModelBundle};
use crate::train::g_score;

/// Outcome of classifying one instance.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Index of the winning class (lowest index on exact ties).
    pub predicted_class: usize,
    /// g-score of every class under the model's stored scaling.
    pub scores: Vec<f64>,
    /// Margin of the winner: −g_pred + max over rival scores (the hard-max
    /// limit of the misclassification measure; negative when the winner is
    /// clearly ahead, −∞ for a single-class model).
    pub margin: f64,
}

/// Score an instance under every class and pick the best. Normalization
/// stored in the model is applied first, so callers pass raw instances.
pub fn predict(inst: &Instance, model: &ModelBundle) -> Result<Prediction> {
    model.validate()?;
    if inst.output_dim() != model.output_dim() {
        return Err(MogpError::Dim(format!(
            "instance has D={} but model expects D={}",
            inst.output_dim(),
            model.output_dim()
        )));
    }
    let scored;
    let inst = match &model.normalization {
        Some(stats) => {
            scored = normalize_apply(inst, stats)?;
            &scored
        }
        None => inst,
    };
    let scores: Result<Vec<f64>> = model
        .per_class
        .iter()
        .enumerate()
        .map(|(c, theta)| {
            g_score(inst, theta, &model.kernel, model.approx, model.scaling.a, model.scaling.b)
                .map_err(|e| e.with_context(&format!("class '{}'", model.class_names[c])))
        })
        .collect();
    let scores = scores?;
    let mut best = 0;
    for (c, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = c;
        }
    }
    let rival_max = scores
        .iter()
        .enumerate()
        .filter(|(c, _)| *c != best)
        .map(|(_, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Prediction { predicted_class: best, scores: scores.clone(), margin: -scores[best] + rival_max })
}

/// Accuracy, confusion counts and per-class accuracy of a labeled dataset.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Fraction of instances whose argmax class matches the label.
    pub accuracy: f64,
    /// Rows are true classes (model order), columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_accuracy: Vec<f64>,
    /// Model-order class names, for rendering.
    pub class_names: Vec<String>,
}

/// Evaluate a labeled dataset. Dataset classes are matched to model classes
/// by name; instances of unknown classes are a data error.
pub fn evaluate(model: &ModelBundle, ds: &Dataset) -> Result<EvalReport> {
    model.validate()?;
    let m = model.n_classes();
    let class_index = |name: &str| -> Result<usize> {
        model
            .class_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| MogpError::Data(format!("dataset class '{name}' not in model")))
    };

    let mut confusion = vec![vec![0usize; m]; m];
    let jobs: Vec<(usize, &Instance)> = ds
        .classes
        .iter()
        .map(|c| Ok::<usize, MogpError>(class_index(&c.name)?))
        .collect::<Result<Vec<usize>>>()?
        .into_iter()
        .zip(&ds.classes)
        .flat_map(|(truth, c)| c.instances.iter().map(move |i| (truth, i)))
        .collect();

    let predictions: Result<Vec<(usize, usize)>> = jobs
        .par_iter()
        .map(|(truth, inst)| Ok((*truth, predict(inst, model)?.predicted_class)))
        .collect();
    for (truth, pred) in predictions? {
        confusion[truth][pred] += 1;
    }

    let total: usize = confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
    let correct: usize = (0..m).map(|i| confusion[i][i]).sum();
    let accuracy = if total > 0 { correct as f64 / total as f64 } else { 0.0 };
    let per_class_accuracy = (0..m)
        .map(|i| {
            let row: usize = confusion[i].iter().sum();
            if row > 0 {
                confusion[i][i] as f64 / row as f64
            } else {
                0.0
            }
        })
        .collect();
    Ok(EvalReport { accuracy, confusion, per_class_accuracy, class_names: model.class_names.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Approx, ClassData, GScaling, KernelConfig, KernelMode};
    use crate::testutil::{random_instance, random_theta};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_class_model(rng: &mut ChaCha8Rng) -> ModelBundle {
        let cfg = KernelConfig { q: 1, mode: KernelMode::Convolved, input_dim: 1 };
        ModelBundle {
            per_class: (0..2).map(|_| random_theta(rng, &cfg, 1, None)).collect(),
            class_names: vec!["a".into(), "b".into()],
            kernel: cfg,
            approx: Approx::Exact,
            scaling: GScaling::default(),
            normalization: None,
        }
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = two_class_model(&mut rng);
        // Identical parameters: scores tie exactly.
        model.per_class[1] = model.per_class[0].clone();
        let inst = random_instance(&mut rng, 1, 1, 5);
        let pred = predict(&inst, &model).unwrap();
        assert_eq!(pred.scores[0], pred.scores[1]);
        assert_eq!(pred.predicted_class, 0);
        assert_eq!(pred.margin, 0.0);
    }

    #[test]
    fn argmax_invariant_to_uniform_affine_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = two_class_model(&mut rng);
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 1, 1, 6);
            let p1 = predict(&inst, &model).unwrap();
            let mut scaled = model.clone();
            scaled.scaling = GScaling { a: 0.01, b: 5.0 };
            let p2 = predict(&inst, &scaled).unwrap();
            assert_eq!(p1.predicted_class, p2.predicted_class);
        }
    }

    #[test]
    fn predicted_class_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = two_class_model(&mut rng);
        let inst = random_instance(&mut rng, 1, 1, 5);
        let pred = predict(&inst, &model).unwrap();
        let argmax = if pred.scores[0] >= pred.scores[1] { 0 } else { 1 };
        assert_eq!(pred.predicted_class, argmax);
        assert!(pred.margin <= 0.0 || pred.scores[0] == pred.scores[1]);
    }

    #[test]
    fn prediction_invariant_to_point_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = two_class_model(&mut rng);
        let inst = random_instance(&mut rng, 1, 1, 6);
        let base = predict(&inst, &model).unwrap();
        let perm = [5usize, 2, 0, 4, 1, 3];
        let shuffled = Instance::new(
            nalgebra::DMatrix::from_fn(1, 6, |r, j| inst.inputs[(r, perm[j])]),
            nalgebra::DMatrix::from_fn(1, 6, |r, j| inst.outputs[(r, perm[j])]),
        )
        .unwrap();
        let moved = predict(&shuffled, &model).unwrap();
        assert_eq!(base.predicted_class, moved.predicted_class);
        for (a, b) in base.scores.iter().zip(&moved.scores) {
            assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn single_class_dataset_fills_one_confusion_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = two_class_model(&mut rng);
        let ds = Dataset {
            classes: vec![ClassData {
                name: "b".into(),
                instances: (0..4).map(|_| random_instance(&mut rng, 1, 1, 5)).collect(),
            }],
            input_dim: 1,
            output_dim: 1,
        };
        let report = evaluate(&model, &ds).unwrap();
        let row0: usize = report.confusion[0].iter().sum();
        let row1: usize = report.confusion[1].iter().sum();
        assert_eq!(row0, 0);
        assert_eq!(row1, 4);
        let total: usize = report.confusion.iter().flatten().sum();
        let trace = report.confusion[0][0] + report.confusion[1][1];
        assert!((report.accuracy - trace as f64 / total as f64).abs() < 1e-15);
    }

    #[test]
    fn unknown_class_name_is_a_data_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = two_class_model(&mut rng);
        let ds = Dataset {
            classes: vec![ClassData { name: "zzz".into(), instances: vec![random_instance(&mut rng, 1, 1, 4)] }],
            input_dim: 1,
            output_dim: 1,
        };
        assert!(matches!(evaluate(&model, &ds).unwrap_err(), MogpError::Data(_)));
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = two_class_model(&mut rng);
        let inst = random_instance(&mut rng, 1, 3, 4);
        assert!(matches!(predict(&inst, &model).unwrap_err(), MogpError::Dim(_)));
    }
}
