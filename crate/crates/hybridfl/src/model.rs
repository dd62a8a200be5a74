//! Differentiable objectives over flat parameter vectors.
//!
//! All protocol algebra (deltas, corrections, aggregation) is plain vector
//! arithmetic, so parameters live in one flat vector per model. The layout
//! is fixed per objective kind: each layer's weight matrix row-major,
//! followed by its biases, layers in forward order.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};

/// Flat parameter vector, the optimization variable.
///
/// Construction checks that every entry is finite, so a `ModelVector` can
/// always be fed back into loss/gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVector {
    values: Array1<f64>,
}

impl ModelVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteModel(format!("entry {i} is {v}")));
        }
        Ok(ModelVector { values })
    }

    pub fn zeros(dim: usize) -> Self {
        ModelVector {
            values: Array1::zeros(dim),
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        Self::new(Array1::from_vec(values))
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array1<f64> {
        self.values
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    /// Multinomial logistic regression: weights `(classes x input)` then
    /// per-class biases.
    LogisticRegression,
    /// One hidden tanh layer: `W1 (hidden x input)`, `b1`, `W2
    /// (classes x hidden)`, `b2`.
    MlpOneHidden { hidden_width: usize },
    /// Linear least squares on the integer labels, no bias. Used for
    /// quadratic micro-problems where closed-form trajectories exist.
    LeastSquares,
}

/// A dataset-restricted differentiable objective: mean cross-entropy (or
/// squared error for [`ObjectiveKind::LeastSquares`]) plus an optional
/// `l2_reg/2 * ||x||^2` term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub kind: ObjectiveKind,
    pub input_dim: usize,
    pub num_classes: usize,
    pub l2_reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchKind {
    Full,
    Minibatch,
}

/// Batch selection for a gradient evaluation. Minibatches draw uniformly
/// without replacement from the dataset using the supplied generator.
pub enum Batch<'a> {
    Full,
    Minibatch { size: usize, rng: &'a mut ChaCha8Rng },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub vector: Array1<f64>,
    pub sample_count: usize,
    pub batch_kind: BatchKind,
}

impl GradientEstimate {
    pub fn is_finite(&self) -> bool {
        self.vector.iter().all(|v| v.is_finite())
    }
}

impl Objective {
    pub fn logistic_regression(input_dim: usize, num_classes: usize) -> Self {
        Objective {
            kind: ObjectiveKind::LogisticRegression,
            input_dim,
            num_classes,
            l2_reg: 0.0,
        }
    }

    pub fn mlp_one_hidden(input_dim: usize, hidden_width: usize, num_classes: usize) -> Self {
        Objective {
            kind: ObjectiveKind::MlpOneHidden { hidden_width },
            input_dim,
            num_classes,
            l2_reg: 0.0,
        }
    }

    pub fn least_squares(input_dim: usize) -> Self {
        Objective {
            kind: ObjectiveKind::LeastSquares,
            input_dim,
            num_classes: 1,
            l2_reg: 0.0,
        }
    }

    pub fn with_l2(mut self, l2_reg: f64) -> Self {
        self.l2_reg = l2_reg;
        self
    }

    /// Parameter count; a deterministic function of the objective shape.
    pub fn param_dim(&self) -> usize {
        match self.kind {
            ObjectiveKind::LogisticRegression => self.num_classes * (self.input_dim + 1),
            ObjectiveKind::MlpOneHidden { hidden_width } => {
                hidden_width * (self.input_dim + 1) + self.num_classes * (hidden_width + 1)
            }
            ObjectiveKind::LeastSquares => self.input_dim,
        }
    }

    fn validate(&self, x: &ModelVector, data: &LabeledDataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.input_dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: data.input_dim(),
            });
        }
        if x.dim() != self.param_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.param_dim(),
                actual: x.dim(),
            });
        }
        if !matches!(self.kind, ObjectiveKind::LeastSquares)
            && data.num_classes() > self.num_classes
        {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes,
                actual: data.num_classes(),
            });
        }
        Ok(())
    }

    /// Class scores for every sample, shape `(n, num_classes)` (a single
    /// column for least squares).
    fn scores(&self, x: &ModelVector, data: &LabeledDataset) -> Array2<f64> {
        let p = x.values();
        match self.kind {
            ObjectiveKind::LogisticRegression => {
                let (c, d) = (self.num_classes, self.input_dim);
                let w = Array2::from_shape_vec((c, d), p.slice(ndarray::s![..c * d]).to_vec())
                    .expect("validated shape");
                let b = p.slice(ndarray::s![c * d..]);
                data.features().dot(&w.t()) + &b
            }
            ObjectiveKind::MlpOneHidden { hidden_width } => {
                let (h, d, c) = (hidden_width, self.input_dim, self.num_classes);
                let w1 = Array2::from_shape_vec((h, d), p.slice(ndarray::s![..h * d]).to_vec())
                    .expect("validated shape");
                let b1 = p.slice(ndarray::s![h * d..h * d + h]);
                let off = h * d + h;
                let w2 =
                    Array2::from_shape_vec((c, h), p.slice(ndarray::s![off..off + c * h]).to_vec())
                        .expect("validated shape");
                let b2 = p.slice(ndarray::s![off + c * h..]);
                let hidden = (data.features().dot(&w1.t()) + &b1).mapv(f64::tanh);
                hidden.dot(&w2.t()) + &b2
            }
            ObjectiveKind::LeastSquares => {
                let preds = data.features().dot(p);
                preds.insert_axis(ndarray::Axis(1))
            }
        }
    }

    /// Mean loss over `data`; deterministic for fixed inputs.
    pub fn loss(&self, x: &ModelVector, data: &LabeledDataset) -> Result<f64> {
        self.validate(x, data)?;
        let data_loss = match self.kind {
            ObjectiveKind::LeastSquares => {
                let residuals = data.features().dot(x.values())
                    - &data.labels().iter().map(|&l| l as f64).collect::<Array1<f64>>();
                residuals.dot(&residuals) / (2.0 * data.len() as f64)
            }
            _ => {
                let scores = self.scores(x, data);
                let mut total = 0.0;
                for (row, &label) in scores.rows().into_iter().zip(data.labels()) {
                    total += log_sum_exp(row) - row[label];
                }
                total / data.len() as f64
            }
        };
        Ok(data_loss + 0.5 * self.l2_reg * x.values().dot(x.values()))
    }

    /// Gradient of [`Objective::loss`]. `Batch::Full` is the exact mean
    /// gradient; a minibatch of the full size degenerates to it exactly.
    pub fn gradient(
        &self,
        x: &ModelVector,
        data: &LabeledDataset,
        batch: Batch<'_>,
    ) -> Result<GradientEstimate> {
        self.validate(x, data)?;
        match batch {
            Batch::Full => Ok(GradientEstimate {
                vector: self.full_gradient(x, data),
                sample_count: data.len(),
                batch_kind: BatchKind::Full,
            }),
            Batch::Minibatch { size, rng } => {
                if size == 0 || size > data.len() {
                    return Err(Error::InvalidBatchSize {
                        size,
                        available: data.len(),
                    });
                }
                let mut indices = rand::seq::index::sample(rng, data.len(), size).into_vec();
                indices.sort_unstable();
                let subset = data.subset(&indices);
                Ok(GradientEstimate {
                    vector: self.full_gradient(x, &subset),
                    sample_count: size,
                    batch_kind: BatchKind::Minibatch,
                })
            }
        }
    }

    fn full_gradient(&self, x: &ModelVector, data: &LabeledDataset) -> Array1<f64> {
        let n = data.len() as f64;
        let p = x.values();
        let mut grad = match self.kind {
            ObjectiveKind::LogisticRegression => {
                let residual = self.softmax_residual(x, data); // (n, c), already / n
                let dw = residual.t().dot(data.features()); // (c, d)
                let db = residual.sum_axis(ndarray::Axis(0)); // (c,)
                flatten(&[dw.into_raw_vec_and_offset().0, db.to_vec()])
            }
            ObjectiveKind::MlpOneHidden { hidden_width } => {
                let (h, d, c) = (hidden_width, self.input_dim, self.num_classes);
                let w1 = Array2::from_shape_vec((h, d), p.slice(ndarray::s![..h * d]).to_vec())
                    .expect("validated shape");
                let b1 = p.slice(ndarray::s![h * d..h * d + h]);
                let off = h * d + h;
                let w2 =
                    Array2::from_shape_vec((c, h), p.slice(ndarray::s![off..off + c * h]).to_vec())
                        .expect("validated shape");

                let hidden = (data.features().dot(&w1.t()) + &b1).mapv(f64::tanh);
                let residual = {
                    let scores = hidden.dot(&w2.t())
                        + &p.slice(ndarray::s![off + c * h..]);
                    softmax_residual_from_scores(&scores, data.labels())
                };
                let dw2 = residual.t().dot(&hidden);
                let db2 = residual.sum_axis(ndarray::Axis(0));
                let back = residual.dot(&w2) * &hidden.mapv(|a| 1.0 - a * a);
                let dw1 = back.t().dot(data.features());
                let db1 = back.sum_axis(ndarray::Axis(0));
                flatten(&[
                    dw1.into_raw_vec_and_offset().0,
                    db1.to_vec(),
                    dw2.into_raw_vec_and_offset().0,
                    db2.to_vec(),
                ])
            }
            ObjectiveKind::LeastSquares => {
                let residuals = data.features().dot(p)
                    - &data.labels().iter().map(|&l| l as f64).collect::<Array1<f64>>();
                data.features().t().dot(&residuals) / n
            }
        };
        if self.l2_reg != 0.0 {
            grad = grad + &(p * self.l2_reg);
        }
        grad
    }

    /// `(softmax(scores) - onehot(labels)) / n` for the classification kinds.
    fn softmax_residual(&self, x: &ModelVector, data: &LabeledDataset) -> Array2<f64> {
        let scores = self.scores(x, data);
        softmax_residual_from_scores(&scores, data.labels())
    }

    /// Max over coordinates of
    /// `|analytic - central difference| / (|analytic| + step)`.
    pub fn finite_diff_check(
        &self,
        x: &ModelVector,
        data: &LabeledDataset,
        step: f64,
    ) -> Result<f64> {
        if !(step > 0.0) {
            return Err(Error::NonPositiveStep(step));
        }
        let analytic = self.gradient(x, data, Batch::Full)?.vector;
        let mut worst: f64 = 0.0;
        let mut probe = x.values().clone();
        for i in 0..probe.len() {
            let original = probe[i];
            probe[i] = original + step;
            let plus = self.loss(&ModelVector { values: probe.clone() }, data)?;
            probe[i] = original - step;
            let minus = self.loss(&ModelVector { values: probe.clone() }, data)?;
            probe[i] = original;
            let central = (plus - minus) / (2.0 * step);
            worst = worst.max((analytic[i] - central).abs() / (analytic[i].abs() + step));
        }
        Ok(worst)
    }

    /// Fraction of samples whose argmax score equals the label, ties broken
    /// toward the lowest class index.
    pub fn accuracy(&self, x: &ModelVector, data: &LabeledDataset) -> Result<f64> {
        self.validate(x, data)?;
        let scores = self.scores(x, data);
        let mut correct = 0usize;
        for (row, &label) in scores.rows().into_iter().zip(data.labels()) {
            let mut best = 0;
            for (c, &score) in row.iter().enumerate() {
                if score > row[best] {
                    best = c;
                }
            }
            if best == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

fn flatten(parts: &[Vec<f64>]) -> Array1<f64> {
    let mut out = Vec::with_capacity(parts.iter().map(Vec::len).sum());
    for part in parts {
        out.extend_from_slice(part);
    }
    Array1::from_vec(out)
}

/// Numerically stable `ln(sum(exp(v)))`.
fn log_sum_exp(values: ndarray::ArrayView1<'_, f64>) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn softmax_residual_from_scores(scores: &Array2<f64>, labels: &[usize]) -> Array2<f64> {
    let n = scores.nrows() as f64;
    let mut residual = scores.clone();
    for (mut row, &label) in residual.rows_mut().into_iter().zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
        row[label] -= 1.0;
        row.mapv_inplace(|v| v / n);
    }
    residual
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use itertools::Itertools;
    use ndarray::Array2;
    use rand::SeedableRng;

    fn dataset(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> LabeledDataset {
        let rows = features.len();
        let cols = features[0].len();
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        LabeledDataset::new(
            Array2::from_shape_vec((rows, cols), flat).unwrap(),
            labels,
            num_classes,
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_on_balanced_two_class_data_gives_ln2() {
        let data = dataset(vec![vec![1.0, 2.0], vec![3.0, -1.0]], vec![0, 1], 2);
        let obj = Objective::logistic_regression(2, 2);
        let loss = obj.loss(&ModelVector::zeros(obj.param_dim()), &data).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-15, "loss = {loss}");
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LabeledDataset::new(Array2::zeros((0, 2)), vec![], 2).unwrap();
        let obj = Objective::logistic_regression(2, 2);
        let err = obj.loss(&ModelVector::zeros(obj.param_dim()), &data).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn hand_evaluated_two_class_logits() {
        // One sample with feature 1.0; weights chosen so the logits are
        // (2, 0) and the true class is 0: loss = ln(1 + e^-2).
        let data = dataset(vec![vec![1.0]], vec![0], 2);
        let obj = Objective::logistic_regression(1, 2);
        let x = ModelVector::from_vec(vec![2.0, 0.0, 0.0, 0.0]).unwrap();
        let loss = obj.loss(&x, &data).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-15, "loss = {loss}");
        assert!((loss - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_names_both_dims() {
        let data = dataset(vec![vec![1.0, 2.0, 3.0]], vec![0], 2);
        let obj = Objective::logistic_regression(2, 2);
        let err = obj.loss(&ModelVector::zeros(obj.param_dim()), &data).unwrap_err();
        match err {
            Error::DimensionMismatch { expected: 2, actual: 3 } => {}
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn mirrored_classes_give_zero_gradient_at_origin() {
        let data = dataset(
            vec![vec![1.0, -2.0], vec![1.0, -2.0], vec![0.5, 3.0], vec![0.5, 3.0]],
            vec![0, 1, 0, 1],
            2,
        );
        let obj = Objective::logistic_regression(2, 2);
        let g = obj
            .gradient(&ModelVector::zeros(obj.param_dim()), &data, Batch::Full)
            .unwrap();
        assert!(g.vector.iter().all(|v| v.abs() < 1e-16), "{:?}", g.vector);
    }

    #[test]
    fn degenerate_minibatch_equals_full_gradient() {
        let data = generate_synthetic(3, 4, 20, 2.0, 1).unwrap();
        let obj = Objective::logistic_regression(4, 3);
        let x = random_model(&obj, 5);
        let full = obj.gradient(&x, &data, Batch::Full).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mini = obj
            .gradient(&x, &data, Batch::Minibatch { size: 20, rng: &mut rng })
            .unwrap();
        assert_eq!(full.vector, mini.vector);
        assert_eq!(mini.batch_kind, BatchKind::Minibatch);
    }

    #[test]
    fn minibatch_size_bounds_are_enforced() {
        let data = generate_synthetic(2, 2, 6, 1.0, 2).unwrap();
        let obj = Objective::logistic_regression(2, 2);
        let x = ModelVector::zeros(obj.param_dim());
        for size in [0usize, 7] {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let err = obj
                .gradient(&x, &data, Batch::Minibatch { size, rng: &mut rng })
                .unwrap_err();
            assert!(matches!(err, Error::InvalidBatchSize { .. }));
        }
    }

    fn random_model(obj: &Objective, seed: u64) -> ModelVector {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = (0..obj.param_dim())
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                0.5 * v
            })
            .collect();
        ModelVector::from_vec(values).unwrap()
    }

    #[test]
    fn finite_differences_agree_for_logistic() {
        let data = generate_synthetic(2, 2, 15, 1.5, 3).unwrap();
        let obj = Objective::logistic_regression(2, 2); // d = 6
        let x = random_model(&obj, 7);
        let err = obj.finite_diff_check(&x, &data, 1e-5).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn finite_differences_agree_for_mlp_and_least_squares() {
        let data = generate_synthetic(3, 4, 25, 2.0, 4).unwrap();
        let mlp = Objective::mlp_one_hidden(4, 6, 3).with_l2(0.01);
        let x = random_model(&mlp, 8);
        let err = mlp.finite_diff_check(&x, &data, 1e-5).unwrap();
        assert!(err <= 1e-5, "mlp relative error {err}");

        let ls = Objective::least_squares(4);
        let x = random_model(&ls, 9);
        let err = ls.finite_diff_check(&x, &data, 1e-5).unwrap();
        assert!(err <= 1e-5, "least-squares relative error {err}");
    }

    #[test]
    fn finite_diff_check_is_independent_of_start_point() {
        let data = generate_synthetic(2, 3, 12, 1.0, 6).unwrap();
        let obj = Objective::logistic_regression(3, 2);
        let mut shifted = random_model(&obj, 10).into_values();
        shifted[2] += 3.0;
        let x = ModelVector::new(shifted).unwrap();
        let err = obj.finite_diff_check(&x, &data, 1e-5).unwrap();
        assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn zero_step_is_rejected() {
        let data = generate_synthetic(2, 2, 8, 1.0, 6).unwrap();
        let obj = Objective::logistic_regression(2, 2);
        let err = obj
            .finite_diff_check(&ModelVector::zeros(obj.param_dim()), &data, 0.0)
            .unwrap_err();
        assert!(matches!(err, Error::NonPositiveStep(_)));
    }

    #[test]
    fn unbiasedness_over_all_minibatches_by_enumeration() {
        let data = generate_synthetic(2, 3, 5, 1.0, 17).unwrap();
        let obj = Objective::logistic_regression(3, 2);
        let x = random_model(&obj, 18);
        let full = obj.gradient(&x, &data, Batch::Full).unwrap().vector;
        for b in [2usize, 3] {
            let subsets: Vec<Vec<usize>> = (0..5).combinations(b).collect();
            let mut mean = Array1::zeros(obj.param_dim());
            for subset in &subsets {
                let sub = data.subset(subset);
                mean = mean + obj.gradient(&x, &sub, Batch::Full).unwrap().vector;
            }
            mean /= subsets.len() as f64;
            let worst = (&mean - &full)
                .iter()
                .map(|v| v.abs())
                .fold(0.0f64, f64::max);
            assert!(worst <= 1e-12, "b = {b}: max deviation {worst}");
        }
    }

    #[test]
    fn minibatch_gradient_is_deterministic_per_seed() {
        let data = generate_synthetic(3, 4, 30, 1.0, 20).unwrap();
        let obj = Objective::logistic_regression(4, 3);
        let x = random_model(&obj, 21);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(1234);
            obj.gradient(&x, &data, Batch::Minibatch { size: 7, rng: &mut rng })
                .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a
            .vector
            .iter()
            .zip(b.vector.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn small_gradient_step_decreases_loss() {
        let data = generate_synthetic(3, 4, 40, 2.0, 30).unwrap();
        for obj in [
            Objective::logistic_regression(4, 3),
            Objective::mlp_one_hidden(4, 5, 3),
        ] {
            let x = random_model(&obj, 31);
            let g = obj.gradient(&x, &data, Batch::Full).unwrap().vector;
            let norm = g.dot(&g).sqrt();
            assert!(norm > 0.0);
            let stepped = ModelVector::new(x.values() - &(g * (1e-4 / norm))).unwrap();
            let before = obj.loss(&x, &data).unwrap();
            let after = obj.loss(&stepped, &data).unwrap();
            assert!(after < before, "{before} -> {after}");
        }
    }

    #[test]
    fn accuracy_at_zero_predicts_lowest_class() {
        let data = dataset(
            vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]],
            vec![0, 0, 1, 0],
            2,
        );
        let obj = Objective::logistic_regression(1, 2);
        let acc = obj.accuracy(&ModelVector::zeros(obj.param_dim()), &data).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn single_correct_point_has_full_accuracy() {
        let data = dataset(vec![vec![1.0]], vec![1], 2);
        let obj = Objective::logistic_regression(1, 2);
        // class-1 weight bigger, so the sample lands on class 1
        let x = ModelVector::from_vec(vec![0.0, 5.0, 0.0, 0.0]).unwrap();
        assert_eq!(obj.accuracy(&x, &data).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_per_sample_argmax_oracle() {
        let data = generate_synthetic(4, 3, 50, 1.5, 40).unwrap();
        let obj = Objective::logistic_regression(3, 4);
        let x = random_model(&obj, 41);
        // independent oracle: raw dot products per sample
        let w: Vec<Vec<f64>> = (0..4)
            .map(|c| (0..3).map(|j| x.values()[c * 3 + j]).collect())
            .collect();
        let b: Vec<f64> = (0..4).map(|c| x.values()[12 + c]).collect();
        let mut correct = 0;
        for i in 0..data.len() {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for c in 0..4 {
                let score: f64 = (0..3)
                    .map(|j| w[c][j] * data.features()[[i, j]])
                    .sum::<f64>()
                    + b[c];
                if score > best_score {
                    best_score = score;
                    best = c;
                }
            }
            if best == data.labels()[i] {
                correct += 1;
            }
        }
        let expected = correct as f64 / data.len() as f64;
        assert_eq!(obj.accuracy(&x, &data).unwrap(), expected);
    }

    #[test]
    fn least_squares_quadratic_gradient() {
        // f(w) = w^2 / 2 via a single sample with feature 1 and target 0.
        let data = dataset(vec![vec![1.0]], vec![0], 1);
        let obj = Objective::least_squares(1);
        let x = ModelVector::from_vec(vec![3.0]).unwrap();
        assert!((obj.loss(&x, &data).unwrap() - 4.5).abs() < 1e-15);
        let g = obj.gradient(&x, &data, Batch::Full).unwrap();
        assert!((g.vector[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn param_dims_follow_layout() {
        assert_eq!(Objective::logistic_regression(20, 10).param_dim(), 210);
        assert_eq!(Objective::mlp_one_hidden(8, 16, 3).param_dim(), 16 * 9 + 3 * 17);
        assert_eq!(Objective::least_squares(7).param_dim(), 7);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(12))]

            #[test]
            fn gradients_match_finite_differences(
                seed in 0u64..1000,
                classes in 2usize..4,
                input_dim in 1usize..5,
            ) {
                let data = generate_synthetic(classes, input_dim, 12, 1.0, seed).unwrap();
                let obj = Objective::logistic_regression(input_dim, classes);
                let x = random_model(&obj, seed.wrapping_add(1));
                let err = obj.finite_diff_check(&x, &data, 1e-5).unwrap();
                prop_assert!(err <= 1e-5, "relative error {}", err);
            }

            #[test]
            fn full_gradient_is_deterministic(seed in 0u64..1000) {
                let data = generate_synthetic(2, 3, 10, 1.0, seed).unwrap();
                let obj = Objective::logistic_regression(3, 2);
                let x = random_model(&obj, seed);
                let a = obj.gradient(&x, &data, Batch::Full).unwrap();
                let b = obj.gradient(&x, &data, Batch::Full).unwrap();
                prop_assert!(a.vector.iter().zip(b.vector.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
