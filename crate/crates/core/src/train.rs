//! Optimisation, evaluation and gradient checking.

use std::collections::BTreeMap;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Clip;
use crate::model::{
    self, loss_and_grads, predict, InitConfig, ModelConfig, ModelError, ModelParams, Objective,
};
use crate::params::Parameters;
use crate::pooling::SubgroupAssignment;
use crate::tensor::{MathError, Shape, Vector};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("gradient for `{name}` has shape {got}, parameter has {expected}")]
    GradShape {
        name: String,
        expected: Shape,
        got: Shape,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    /// `param` is the offending tensor, or for forward-pass failures the
    /// tensor with the largest magnitude.
    #[error("non-finite {what} at `{param}` ({stage} stage, epoch {epoch})")]
    NonFinite {
        what: String,
        param: String,
        stage: Stage,
        epoch: usize,
    },
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    /// Evaluate and emit accuracies every this many epochs (0 = never).
    pub eval_every: usize,
    pub init: InitConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs_stage1: 20,
            epochs_stage2: 80,
            seed: 7,
            eval_every: 1,
            init: InitConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }
}

/// ADAM moment estimates keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

/// Bias-corrected ADAM update for every parameter named in `grads`.
/// Parameters without a gradient entry are left untouched.
pub fn adam_step<P: Parameters>(
    params: &mut P,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, shape) in params.named_shapes() {
        if let Some(g) = grads.get(&name) {
            if g.len() != shape.len() {
                return Err(TrainError::GradShape {
                    name,
                    expected: shape,
                    got: Shape::vector(g.len()),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, lr, eps) = (config.beta1, config.beta2, config.learning_rate, config.epsilon);
    params.visit_mut("", &mut |name, shape, data| {
        let Some(g) = grads.get(name) else {
            return;
        };
        let m = state
            .first
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; shape.len()]);
        for (mi, gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
        }
        let v = state
            .second
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; shape.len()]);
        for (vi, gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
        }
        for ((p, mi), vi) in data.iter_mut().zip(m.iter()).zip(v.iter()) {
            let m_hat = mi / c1;
            let v_hat = vi / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Person LSTM and action head on the person loss only.
    Person,
    /// Every parameter on the joint loss.
    Joint,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Person => "person",
            Stage::Joint => "joint",
        })
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: Stage,
    pub epoch: usize,
    pub loss: f64,
    pub group_accuracy: Option<f64>,
    pub person_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub clips: usize,
    pub group_accuracy: f64,
    pub person_accuracy: f64,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// `None` for classes absent from the dataset.
    pub per_class_accuracy: Vec<Option<f64>>,
}

impl EvalReport {
    /// Builds a report from `(truth, pred)` activity pairs and person-action
    /// hit counts.
    pub fn from_counts(
        classes: usize,
        pairs: impl IntoIterator<Item = (usize, usize)>,
        person_correct: usize,
        person_total: usize,
    ) -> Self {
        let mut confusion = vec![vec![0; classes]; classes];
        let mut clips = 0;
        for (truth, pred) in pairs {
            confusion[truth][pred] += 1;
            clips += 1;
        }
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let total: usize = row.iter().sum();
                (total > 0).then(|| row[k] as f64 / total as f64)
            })
            .collect();
        EvalReport {
            clips,
            group_accuracy: if clips == 0 { 0.0 } else { correct as f64 / clips as f64 },
            person_accuracy: if person_total == 0 {
                0.0
            } else {
                person_correct as f64 / person_total as f64
            },
            confusion,
            per_class_accuracy,
        }
    }

    pub fn confusion_table(&self) -> String {
        let k = self.confusion.len();
        let mut out = String::from("truth\\pred");
        for j in 0..k {
            out.push_str(&format!(" {j:>6}"));
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            out.push_str(&format!("{i:>10}"));
            for c in row {
                out.push_str(&format!(" {c:>6}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate(params: &ModelParams, dataset: &[Clip]) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let preds = dataset
        .par_iter()
        .map(|clip| predict(params, clip))
        .collect::<Result<Vec<_>, _>>()?;
    let mut person_correct = 0;
    let mut person_total = 0;
    for (pred, clip) in preds.iter().zip(dataset) {
        for (ps, ys) in pred.actions.iter().zip(&clip.action_labels) {
            person_correct += ps.iter().zip(ys).filter(|(p, y)| p == y).count();
            person_total += ys.len();
        }
    }
    Ok(EvalReport::from_counts(
        params.config.activity_classes,
        preds.iter().zip(dataset).map(|(p, c)| (c.activity_label, p.activity)),
        person_correct,
        person_total,
    ))
}

/// Mean loss and mean gradient over `batch`. Per-clip work runs in parallel;
/// the reduction is sequential in batch order so results are bitwise stable.
pub fn batch_gradient(
    params: &ModelParams,
    batch: &[&Clip],
    objective: Objective,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let parts = batch
        .par_iter()
        .map(|clip| loss_and_grads(params, clip, objective))
        .collect::<Result<Vec<_>, _>>()?;
    let scale = 1.0 / parts.len() as f64;
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (l, grads) in parts {
        loss += l;
        for (name, g) in grads {
            match total.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    total.insert(name, g);
                }
            }
        }
    }
    total
        .values_mut()
        .for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
    Ok((loss * scale, total))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<EpochRecord>,
    /// Evaluation after each evaluated epoch, aligned with `records` entries
    /// that carry accuracies.
    pub reports: Vec<EvalReport>,
}

fn first_non_finite(values: &BTreeMap<String, Vec<f64>>) -> Option<&str> {
    values
        .iter()
        .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        .map(|(k, _)| k.as_str())
}

fn largest_tensor(params: &ModelParams) -> String {
    let mut best = (String::new(), -1.0);
    params.visit("", &mut |name, _, data| {
        let m = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > best.1 {
            best = (name.to_string(), m);
        }
    });
    best.0
}

/// Runs both stages from a fresh seeded initialisation.
///
/// `eval_set` (or the training set when `None`) is scored every
/// `eval_every` epochs. `on_epoch` sees each record as it is produced.
pub fn train(
    model_config: &ModelConfig,
    config: &TrainConfig,
    train_set: &[Clip],
    eval_set: Option<&[Clip]>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    model_config.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for clip in train_set.iter().chain(eval_set.into_iter().flatten()) {
        clip.check_against(model_config)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = ModelParams::init(model_config, &config.init, &mut rng)?;
    train_from(params, config, train_set, eval_set, &mut rng, &mut on_epoch)
}

/// Trains starting from `params`, drawing batch order from `rng`.
pub fn train_from<R: Rng>(
    mut params: ModelParams,
    config: &TrainConfig,
    train_set: &[Clip],
    eval_set: Option<&[Clip]>,
    rng: &mut R,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let eval_set = eval_set.unwrap_or(train_set);
    let mut records = Vec::new();
    let mut reports = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for (stage, epochs, objective) in [
        (Stage::Person, config.epochs_stage1, Objective::PersonOnly),
        (Stage::Joint, config.epochs_stage2, Objective::Joint),
    ] {
        let mut state = OptimizerState::default();
        for epoch in 1..=epochs {
            order.shuffle(rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&Clip> = chunk.iter().map(|&i| &train_set[i]).collect();
                let (loss, grads) = match batch_gradient(&params, &batch, objective) {
                    Err(TrainError::Model(ModelError::Math(MathError::NonFinite(op)))) => {
                        return Err(TrainError::NonFinite {
                            what: format!("value in {op}"),
                            param: largest_tensor(&params),
                            stage,
                            epoch,
                        })
                    }
                    other => other?,
                };
                if let Some(name) = first_non_finite(&grads) {
                    return Err(TrainError::NonFinite {
                        what: "gradient".into(),
                        param: name.to_string(),
                        stage,
                        epoch,
                    });
                }
                if !loss.is_finite() {
                    return Err(TrainError::NonFinite {
                        what: "loss".into(),
                        param: largest_tensor(&params),
                        stage,
                        epoch,
                    });
                }
                loss_sum += loss * chunk.len() as f64;
                adam_step(&mut params, &grads, &mut state, config)?;
                if let Some(name) = first_non_finite(&params.flatten()) {
                    return Err(TrainError::NonFinite {
                        what: "value".into(),
                        param: name.to_string(),
                        stage,
                        epoch,
                    });
                }
            }
            let evaluated = config.eval_every > 0 && epoch % config.eval_every == 0;
            let report = if evaluated {
                Some(evaluate(&params, eval_set)?)
            } else {
                None
            };
            let record = EpochRecord {
                stage,
                epoch,
                loss: loss_sum / train_set.len() as f64,
                group_accuracy: report.as_ref().map(|r| r.group_accuracy),
                person_accuracy: report.as_ref().map(|r| r.person_accuracy),
            };
            on_epoch(&record);
            records.push(record);
            reports.extend(report);
        }
    }
    Ok(TrainOutcome {
        params,
        records,
        reports,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    v: u32,
    config: ModelConfig,
    params: Vec<TensorRecord>,
}

pub fn checkpoint_to_string(params: &ModelParams) -> String {
    let mut tensors = Vec::new();
    params.visit("", &mut |name, shape, data| {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: [shape.rows, shape.cols],
            data: data.to_vec(),
        })
    });
    let record = CheckpointRecord {
        v: CHECKPOINT_VERSION,
        config: params.config.clone(),
        params: tensors,
    };
    serde_json::to_string(&record).expect("checkpoint serialises")
}

/// Parses a checkpoint; every tensor of the configured model must be present
/// exactly once with the expected shape.
pub fn checkpoint_from_str(text: &str) -> Result<ModelParams> {
    let bad = |m: String| TrainError::Checkpoint(m);
    let record: CheckpointRecord = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    if record.v != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {}", record.v)));
    }
    let mut params = ModelParams::zeros(&record.config)?;
    let mut tensors: BTreeMap<String, TensorRecord> = BTreeMap::new();
    for t in record.params {
        if tensors.contains_key(&t.name) {
            return Err(bad(format!("duplicate tensor `{}`", t.name)));
        }
        tensors.insert(t.name.clone(), t);
    }
    let mut problem = None;
    params.visit_mut("", &mut |name, shape, data| {
        if problem.is_some() {
            return;
        }
        match tensors.remove(name) {
            None => problem = Some(format!("missing tensor `{name}`")),
            Some(t) if t.shape != [shape.rows, shape.cols] || t.data.len() != data.len() => {
                problem = Some(format!(
                    "tensor `{name}` has shape {}x{} with {} values, expected {shape}",
                    t.shape[0],
                    t.shape[1],
                    t.data.len()
                ))
            }
            Some(t) => data.copy_from_slice(&t.data),
        }
    });
    if let Some(p) = problem {
        return Err(bad(p));
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor `{extra}`")));
    }
    params.validate()?;
    Ok(params)
}

pub fn save_checkpoint(path: &std::path::Path, params: &ModelParams) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params) + "\n").map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    checkpoint_from_str(&text)
}

/// Largest relative error between analytic and numeric gradients of one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub scheme: crate::pooling::PoolingScheme,
    pub tolerance: f64,
    pub blocks: Vec<BlockCheck>,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error <= self.tolerance)
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
/// Denominator floor for relative errors of near-zero gradients.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares backpropagated gradients of the joint loss on `clip` with
/// central differences, one tensor at a time.
pub fn gradcheck_instance(params: &ModelParams, clip: &Clip) -> Result<GradcheckReport> {
    let (_, analytic) = loss_and_grads(params, clip, Objective::Joint)?;
    let mut probe = params.clone();
    let flat = params.flatten();
    let mut blocks = Vec::new();
    for (name, shape) in params.named_shapes() {
        let grad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| vec![0.0; shape.len()]);
        let mut worst: f64 = 0.0;
        for (k, (&analytic_k, &original)) in grad.iter().zip(&flat[&name]).enumerate() {
            let mut eval_at = |value: f64| -> Result<f64> {
                set_entry(&mut probe, &name, k, value);
                Ok(model::loss(&probe, clip, Objective::Joint)?)
            };
            let plus = eval_at(original + GRADCHECK_STEP)?;
            let minus = eval_at(original - GRADCHECK_STEP)?;
            set_entry(&mut probe, &name, k, original);
            let numeric = (plus - minus) / (2.0 * GRADCHECK_STEP);
            worst = worst.max(relative_error(analytic_k, numeric));
        }
        blocks.push(BlockCheck {
            name,
            entries: shape.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradcheckReport {
        scheme: params.config.scheme,
        tolerance: GRADCHECK_TOLERANCE,
        blocks,
    })
}

fn set_entry(params: &mut ModelParams, target: &str, k: usize, value: f64) {
    params.visit_mut("", &mut |name, _, data| {
        if name == target {
            data[k] = value;
        }
    });
}

/// Tiny-instance dimensions used by [`gradcheck`].
pub fn gradcheck_config(scheme: crate::pooling::PoolingScheme) -> ModelConfig {
    ModelConfig {
        feature_dim: 3,
        person_hidden: 4,
        group_hidden: 4,
        group_fc_dim: 3,
        attention_hidden: 3,
        action_classes: 3,
        activity_classes: 3,
        subgroups: 2,
        scheme,
        ..ModelConfig::default()
    }
}

/// Random tiny clip with `n` persons and `t` steps drawn from `rng`.
pub fn random_clip<R: Rng>(config: &ModelConfig, n: usize, t: usize, rng: &mut R) -> Clip {
    let persons = (0..n)
        .map(|_| {
            (0..t)
                .map(|_| {
                    Vector::new(
                        (0..config.feature_dim)
                            .map(|_| rng.random_range(-2.0..2.0))
                            .collect(),
                    )
                    .expect("finite")
                })
                .collect()
        })
        .collect();
    Clip {
        id: 0,
        persons,
        action_labels: (0..n)
            .map(|_| (0..t).map(|_| rng.random_range(0..config.action_classes)).collect())
            .collect(),
        activity_label: rng.random_range(0..config.activity_classes),
        subgroups: SubgroupAssignment::contiguous(n, config.subgroups.min(n))
            .expect("n >= 1"),
    }
}

/// Randomises every tensor (heads included) so no gradient is trivially zero.
pub fn randomize<R: Rng>(params: &mut ModelParams, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    params.visit_mut("", &mut |_, _, data| {
        data.iter_mut().for_each(|v| *v = dist.sample(rng));
    });
}

/// Gradient check of the full model on a random `n=2, m=2, T=2` instance.
pub fn gradcheck(model_config: &ModelConfig, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros(model_config)?;
    randomize(&mut params, 0.5, &mut rng);
    let clip = random_clip(model_config, 2, 2, &mut rng);
    gradcheck_instance(&params, &clip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pooling::PoolingScheme;

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Gap)).unwrap();
        randomize(&mut params, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let before = params.clone();
        let zeros: BTreeMap<String, Vec<f64>> = params
            .named_shapes()
            .into_iter()
            .map(|(n, s)| (n, vec![0.0; s.len()]))
            .collect();
        let mut state = OptimizerState::default();
        adam_step(&mut params, &zeros, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
        adam_step(&mut params, &zeros, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(state.step, 2);
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Max)).unwrap();
        let config = TrainConfig::default();
        for g in [0.3, -2.0, 1e-3] {
            let before = params.clone();
            let grads: BTreeMap<String, Vec<f64>> = params
                .named_shapes()
                .into_iter()
                .map(|(n, s)| (n, vec![g; s.len()]))
                .collect();
            let mut state = OptimizerState::default();
            adam_step(&mut params, &grads, &mut state, &config).unwrap();
            // m_hat = g and v_hat = g^2 after one step, so the move is
            // lr * |g| / (|g| + eps).
            let expected = config.learning_rate * g.abs() / (g.abs() + config.epsilon);
            let (a, b) = (before.flatten(), params.flatten());
            for (name, vals) in &a {
                for (x, y) in vals.iter().zip(&b[name]) {
                    assert!(((x - y).abs() - expected).abs() < 1e-15);
                    assert_eq!((x - y).signum(), g.signum());
                }
            }
        }
    }

    #[test]
    fn adam_rejects_bad_shapes() {
        let mut params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Max)).unwrap();
        let mut grads = BTreeMap::new();
        grads.insert("action_head.b".to_string(), vec![1.0]);
        let err = adam_step(&mut params, &grads, &mut OptimizerState::default(), &TrainConfig::default());
        assert!(matches!(err, Err(TrainError::GradShape { .. })));
    }

    #[test]
    fn eval_report_counts() {
        let r = EvalReport::from_counts(3, [(1, 1)], 4, 4);
        assert_eq!(r.group_accuracy, 1.0);
        assert_eq!(r.confusion[1][1], 1);
        assert_eq!(r.confusion.iter().flatten().sum::<usize>(), 1);
        assert_eq!(r.per_class_accuracy, vec![None, Some(1.0), None]);

        let wrong = EvalReport::from_counts(3, [(0, 1), (1, 2), (2, 0)], 0, 6);
        assert_eq!(wrong.group_accuracy, 0.0);
        assert_eq!(wrong.person_accuracy, 0.0);
        for (k, row) in wrong.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 1);
            assert_eq!(row[k], 0);
        }
        assert!(wrong.confusion_table().lines().count() == 4);
    }

    #[test]
    fn evaluate_rejects_empty() {
        let params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Gap)).unwrap();
        assert!(matches!(evaluate(&params, &[]), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!(relative_error(1e-12, 2e-12) < 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Hap)).unwrap();
        randomize(&mut params, 1.0, &mut ChaCha8Rng::seed_from_u64(9));
        let text = checkpoint_to_string(&params);
        assert_eq!(checkpoint_from_str(&text).unwrap(), params);
    }

    #[test]
    fn checkpoint_rejects_tampering() {
        let params = ModelParams::zeros(&gradcheck_config(PoolingScheme::Gap)).unwrap();
        let text = checkpoint_to_string(&params);
        let missing = text.replacen("\"action_head.b\"", "\"action_head.zz\"", 1);
        assert!(matches!(checkpoint_from_str(&missing), Err(TrainError::Checkpoint(_))));
        assert!(checkpoint_from_str(&text[..text.len() / 2]).is_err());
        let version = text.replacen("\"v\":1", "\"v\":9", 1);
        assert!(checkpoint_from_str(&version).is_err());
    }

    #[test]
    fn train_config_validation() {
        for bad in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
