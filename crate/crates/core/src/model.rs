//! The hierarchical temporal model.
//!
//! Per person: features -> shared person LSTM -> `P = h ⊕ x` -> action head.
//! Per timestep: pool the `P`s -> dense+tanh -> group LSTM -> activity head.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Clip;
use crate::layers::{
    ClassifierHead, Dense, DenseVars, HeadVars, LstmParams, LstmVars,
};
use crate::params::{join, Parameters};
use crate::pooling::{
    AttentionParams, AttentionTrace, HapParams, PoolError, PoolingParams, PoolingScheme,
    PoolingVars, SubgroupAssignment, TraceVars,
};
use crate::tensor::{MathError, Shape, Tape, Var, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("clip {id}: {reason}")]
    Clip { id: u64, reason: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Which timesteps contribute a group cross-entropy term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupLoss {
    /// Final timestep only.
    #[default]
    Final,
    /// Mean over all timesteps.
    Every,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub person_hidden: usize,
    pub group_hidden: usize,
    /// Output width of the dense layer feeding the group LSTM.
    pub group_fc_dim: usize,
    pub attention_hidden: usize,
    pub action_classes: usize,
    pub activity_classes: usize,
    pub subgroups: usize,
    pub scheme: PoolingScheme,
    pub lambda: f64,
    pub group_loss: GroupLoss,
    /// HAP only: one person-level attention shared by all subgroups.
    pub share_hap_person_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 12,
            person_hidden: 32,
            group_hidden: 16,
            group_fc_dim: 16,
            attention_hidden: 16,
            action_classes: 5,
            activity_classes: 4,
            subgroups: 2,
            scheme: PoolingScheme::Gap,
            lambda: 2.0,
            group_loss: GroupLoss::Final,
            share_hap_person_attention: false,
        }
    }
}

impl ModelConfig {
    /// Width of a person representation `h ⊕ x`.
    pub fn person_repr_dim(&self) -> usize {
        self.person_hidden + self.feature_dim
    }

    pub fn pooled_dim(&self) -> usize {
        self.scheme
            .output_dim(self.person_repr_dim(), self.subgroups)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("person_hidden", self.person_hidden),
            ("group_hidden", self.group_hidden),
            ("group_fc_dim", self.group_fc_dim),
            ("attention_hidden", self.attention_hidden),
            ("subgroups", self.subgroups),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        for (name, value) in [
            ("action_classes", self.action_classes),
            ("activity_classes", self.activity_classes),
        ] {
            if value < 2 {
                return Err(ModelError::Config(format!("{name} must be at least 2")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(ModelError::Config(format!(
                "lambda must be finite and non-negative, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Initialisation scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Std-dev of the Gaussian used for every LSTM tensor.
    pub lstm_std: f64,
    /// Std-dev of the Gaussian used for attention context vectors.
    pub context_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            lstm_std: 0.1,
            context_std: 0.1,
        }
    }
}

/// All learnable tensors of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub person_lstm: LstmParams,
    pub action_head: ClassifierHead,
    pub pooling: PoolingParams,
    pub group_fc: Dense,
    pub group_lstm: LstmParams,
    pub activity_head: ClassifierHead,
}

/// Parameter-name prefixes of the person branch (trained alone in stage 1).
pub const PERSON_BRANCH: [&str; 2] = ["person_lstm", "action_head"];

pub fn is_person_branch(name: &str) -> bool {
    PERSON_BRANCH
        .iter()
        .any(|p| name.strip_prefix(p).is_some_and(|rest| rest.starts_with('.')))
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.person_repr_dim();
        let a = config.attention_hidden;
        let m = config.subgroups;
        let pooling = match config.scheme {
            PoolingScheme::Max | PoolingScheme::Avg => PoolingParams::None,
            PoolingScheme::Gap => PoolingParams::Gap(AttentionParams::zeros(d, a)),
            PoolingScheme::Hap => {
                let count = if config.share_hap_person_attention { 1 } else { m };
                PoolingParams::Hap(HapParams {
                    person_level: vec![AttentionParams::zeros(d, a); count],
                    subgroup_level: AttentionParams::zeros(d, a),
                    shared_person_level: config.share_hap_person_attention,
                })
            }
            PoolingScheme::SubgroupGap => {
                PoolingParams::SubgroupGap(vec![AttentionParams::zeros(d, a); m])
            }
        };
        Ok(ModelParams {
            config: config.clone(),
            person_lstm: LstmParams::zeros(config.feature_dim, config.person_hidden),
            action_head: ClassifierHead::zeros(config.action_classes, d)?,
            pooling,
            group_fc: Dense::zeros(config.pooled_dim(), config.group_fc_dim),
            group_lstm: LstmParams::zeros(config.group_fc_dim, config.group_hidden),
            activity_head: ClassifierHead::zeros(config.activity_classes, config.group_hidden)?,
        })
    }

    /// LSTM tensors and context vectors ~ N(0, std); attention and dense
    /// weights Xavier-uniform with zero bias; classifier heads zero.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, init: &InitConfig, rng: &mut R) -> Result<Self> {
        let mut params = ModelParams::zeros(config)?;
        let lstm = Normal::new(0.0, init.lstm_std)
            .map_err(|e| ModelError::Config(format!("lstm_std: {e}")))?;
        let context = Normal::new(0.0, init.context_std)
            .map_err(|e| ModelError::Config(format!("context_std: {e}")))?;

        params.visit_mut("", &mut |name, shape, data| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            if name.starts_with("person_lstm.") || name.starts_with("group_lstm.") {
                data.iter_mut().for_each(|v| *v = lstm.sample(rng));
            } else if name.starts_with("pooling.") || name.starts_with("group_fc.") {
                match leaf {
                    "w" => xavier(shape, data, rng),
                    "u" => data.iter_mut().for_each(|v| *v = context.sample(rng)),
                    _ => {}
                }
            }
        });
        Ok(params)
    }

    /// Copies every tensor whose name satisfies `select` from `other`.
    pub fn copy_from(&mut self, other: &ModelParams, select: impl Fn(&str) -> bool) {
        let source = other.flatten();
        self.visit_mut("", &mut |name, _, data| {
            if select(name) {
                if let Some(src) = source.get(name) {
                    data.copy_from_slice(src);
                }
            }
        });
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        Ok(BoundParams {
            person_lstm: self.person_lstm.bind(tape, "person_lstm")?,
            action_head: self.action_head.bind(tape, "action_head")?,
            group: Some(GroupVars {
                pooling: self.pooling.bind(tape, "pooling")?,
                group_fc: self.group_fc.bind(tape, "group_fc")?,
                group_lstm: self.group_lstm.bind(tape, "group_lstm")?,
                activity_head: self.activity_head.bind(tape, "activity_head")?,
            }),
        })
    }

    pub fn bind_person_branch(&self, tape: &mut Tape) -> Result<BoundParams> {
        Ok(BoundParams {
            person_lstm: self.person_lstm.bind(tape, "person_lstm")?,
            action_head: self.action_head.bind(tape, "action_head")?,
            group: None,
        })
    }

    /// Checks that tensor shapes agree with `config`.
    pub fn validate(&self) -> Result<()> {
        let expected = ModelParams::zeros(&self.config)?.named_shapes();
        let actual = self.named_shapes();
        if expected != actual {
            return Err(ModelError::Config(
                "parameter shapes do not match the model config".into(),
            ));
        }
        Ok(())
    }
}

fn xavier<R: Rng + ?Sized>(shape: Shape, data: &mut [f64], rng: &mut R) {
    let limit = (6.0 / (shape.rows + shape.cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite xavier bound");
    data.iter_mut().for_each(|v| *v = dist.sample(rng));
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        self.person_lstm.visit(&join(prefix, "person_lstm"), f);
        self.action_head.visit(&join(prefix, "action_head"), f);
        self.pooling.visit(&join(prefix, "pooling"), f);
        self.group_fc.visit(&join(prefix, "group_fc"), f);
        self.group_lstm.visit(&join(prefix, "group_lstm"), f);
        self.activity_head.visit(&join(prefix, "activity_head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        self.person_lstm.visit_mut(&join(prefix, "person_lstm"), f);
        self.action_head.visit_mut(&join(prefix, "action_head"), f);
        self.pooling.visit_mut(&join(prefix, "pooling"), f);
        self.group_fc.visit_mut(&join(prefix, "group_fc"), f);
        self.group_lstm.visit_mut(&join(prefix, "group_lstm"), f);
        self.activity_head.visit_mut(&join(prefix, "activity_head"), f);
    }
}

pub struct GroupVars {
    pub pooling: PoolingVars,
    pub group_fc: DenseVars,
    pub group_lstm: LstmVars,
    pub activity_head: HeadVars,
}

/// Tape handles for one clip's forward pass.
pub struct BoundParams {
    pub person_lstm: LstmVars,
    pub action_head: HeadVars,
    pub group: Option<GroupVars>,
}

/// Tape handles produced by the person branch, indexed `[person][t]`.
pub struct PersonOutputs {
    pub reprs: Vec<Vec<Var>>,
    pub action_probs: Vec<Vec<Var>>,
}

pub struct GroupOutputs {
    pub activity_probs: Vec<Var>,
    pub traces: Vec<TraceVars>,
}

fn person_track(
    tape: &mut Tape,
    bound: &BoundParams,
    track: &[Vector],
) -> Result<(Vec<Var>, Vec<Var>)> {
    let xs: Vec<Var> = track.iter().map(|x| tape.vector(x)).collect();
    let states = bound.person_lstm.run(tape, &xs)?;
    let mut reprs = Vec::with_capacity(xs.len());
    let mut probs = Vec::with_capacity(xs.len());
    for (state, &x) in states.iter().zip(&xs) {
        let p = tape.concat(&[state.h, x])?;
        probs.push(bound.action_head.classify(tape, p)?);
        reprs.push(p);
    }
    Ok((reprs, probs))
}

pub fn person_outputs(tape: &mut Tape, bound: &BoundParams, clip: &Clip) -> Result<PersonOutputs> {
    let mut reprs = Vec::with_capacity(clip.persons.len());
    let mut action_probs = Vec::with_capacity(clip.persons.len());
    for track in &clip.persons {
        let (r, p) = person_track(tape, bound, track)?;
        reprs.push(r);
        action_probs.push(p);
    }
    Ok(PersonOutputs { reprs, action_probs })
}

pub fn group_outputs(
    tape: &mut Tape,
    group: &GroupVars,
    scheme: PoolingScheme,
    reprs: &[Vec<Var>],
    assignment: &SubgroupAssignment,
) -> Result<GroupOutputs> {
    let steps = reprs.first().map_or(0, |r| r.len());
    let mut state = group.group_lstm.zero_state(tape);
    let mut activity_probs = Vec::with_capacity(steps);
    let mut traces = Vec::new();
    for t in 0..steps {
        let items: Vec<Var> = reprs.iter().map(|r| r[t]).collect();
        let (pooled, trace) = group.pooling.pool(tape, scheme, &items, assignment)?;
        traces.extend(trace);
        let z = group.group_fc.forward(tape, pooled)?;
        state = group.group_lstm.step(tape, state, z)?;
        activity_probs.push(group.activity_head.classify(tape, state.h)?);
    }
    Ok(GroupOutputs {
        activity_probs,
        traces,
    })
}

/// Mean over persons then timesteps of the action cross-entropy.
pub fn person_loss(tape: &mut Tape, action_probs: &[Vec<Var>], labels: &[Vec<usize>]) -> Result<Var> {
    let mut per_step = Vec::new();
    let steps = action_probs.first().map_or(0, |p| p.len());
    if action_probs.is_empty() || steps == 0 {
        return Err(MathError::Empty { op: "person_loss" }.into());
    }
    for t in 0..steps {
        let mut terms = Vec::with_capacity(action_probs.len());
        for (probs, ys) in action_probs.iter().zip(labels) {
            terms.push(tape.cross_entropy(probs[t], ys[t])?);
        }
        let total = tape.sum(&terms)?;
        per_step.push(tape.scale(total, 1.0 / terms.len() as f64));
    }
    let total = tape.sum(&per_step)?;
    Ok(tape.scale(total, 1.0 / steps as f64))
}

pub fn group_loss(
    tape: &mut Tape,
    activity_probs: &[Var],
    label: usize,
    mode: GroupLoss,
) -> Result<Var> {
    let last = *activity_probs
        .last()
        .ok_or(MathError::Empty { op: "group_loss" })?;
    match mode {
        GroupLoss::Final => Ok(tape.cross_entropy(last, label)?),
        GroupLoss::Every => {
            let terms = activity_probs
                .iter()
                .map(|&p| tape.cross_entropy(p, label))
                .collect::<Result<Vec<_>, _>>()?;
            let total = tape.sum(&terms)?;
            Ok(tape.scale(total, 1.0 / terms.len() as f64))
        }
    }
}

/// `L = L_group + lambda * mean person loss`.
pub fn joint_loss_var(
    tape: &mut Tape,
    activity_probs: &[Var],
    action_probs: &[Vec<Var>],
    clip: &Clip,
    lambda: f64,
    mode: GroupLoss,
) -> Result<Var> {
    let group = group_loss(tape, activity_probs, clip.activity_label, mode)?;
    let person = person_loss(tape, action_probs, &clip.action_labels)?;
    let weighted = tape.scale(person, lambda);
    Ok(tape.sum(&[group, weighted])?)
}

/// Value-level joint loss over already computed probabilities.
pub fn joint_loss(
    activity_probs: &[Vector],
    action_probs: &[Vec<Vector>],
    clip: &Clip,
    lambda: f64,
    mode: GroupLoss,
) -> Result<f64> {
    let mut tape = Tape::new();
    let activity: Vec<Var> = activity_probs.iter().map(|p| tape.vector(p)).collect();
    let actions: Vec<Vec<Var>> = action_probs
        .iter()
        .map(|ps| ps.iter().map(|p| tape.vector(p)).collect())
        .collect();
    let loss = joint_loss_var(&mut tape, &activity, &actions, clip, lambda, mode)?;
    Ok(tape.scalar(loss))
}

fn read(tape: &Tape, v: Var) -> Vector {
    Vector::new(tape.value(v).to_vec()).expect("finite forward value")
}

/// Person representations and action probabilities for one track.
pub fn person_forward(params: &ModelParams, track: &[Vector]) -> Result<(Vec<Vector>, Vec<Vector>)> {
    let mut tape = Tape::new();
    let bound = params.bind_person_branch(&mut tape)?;
    for x in track {
        if x.dim() != params.config.feature_dim {
            return Err(MathError::ShapeMismatch {
                op: "person_forward",
                left: Shape::vector(params.config.feature_dim),
                right: x.shape(),
            }
            .into());
        }
    }
    let (reprs, probs) = person_track(&mut tape, &bound, track)?;
    Ok((
        reprs.iter().map(|&v| read(&tape, v)).collect(),
        probs.iter().map(|&v| read(&tape, v)).collect(),
    ))
}

/// Full forward pass recorded on a tape, used by training and inference.
pub struct ClipForward {
    pub tape: Tape,
    pub person: PersonOutputs,
    pub group: GroupOutputs,
}

impl ClipForward {
    pub fn run(params: &ModelParams, clip: &Clip) -> Result<Self> {
        clip.check_against(&params.config)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape)?;
        let person = person_outputs(&mut tape, &bound, clip)?;
        let group_vars = bound.group.as_ref().expect("full binding");
        let group = group_outputs(
            &mut tape,
            group_vars,
            params.config.scheme,
            &person.reprs,
            &clip.subgroups,
        )?;
        Ok(ClipForward {
            tape,
            person,
            group,
        })
    }

    pub fn activity_probs(&self) -> Vec<Vector> {
        self.group
            .activity_probs
            .iter()
            .map(|&v| read(&self.tape, v))
            .collect()
    }

    pub fn action_probs(&self) -> Vec<Vec<Vector>> {
        self.person
            .action_probs
            .iter()
            .map(|ps| ps.iter().map(|&v| read(&self.tape, v)).collect())
            .collect()
    }

    pub fn traces(&self, scheme: PoolingScheme) -> Vec<AttentionTrace> {
        self.group
            .traces
            .iter()
            .map(|t| t.read(&self.tape, scheme))
            .collect()
    }
}

/// Activity probabilities per timestep and attention traces (empty for
/// max and mean pooling).
pub fn group_forward(params: &ModelParams, clip: &Clip) -> Result<(Vec<Vector>, Vec<AttentionTrace>)> {
    let fwd = ClipForward::run(params, clip)?;
    Ok((fwd.activity_probs(), fwd.traces(params.config.scheme)))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub activity: usize,
    /// `[person][t]`.
    pub actions: Vec<Vec<usize>>,
    pub traces: Vec<AttentionTrace>,
    pub activity_probs: Vec<f64>,
}

pub fn predict(params: &ModelParams, clip: &Clip) -> Result<Prediction> {
    let fwd = ClipForward::run(params, clip)?;
    let activity_probs = fwd.activity_probs();
    let last = activity_probs.last().expect("clip has timesteps");
    Ok(Prediction {
        activity: argmax(last.as_slice()),
        actions: fwd
            .action_probs()
            .iter()
            .map(|ps| ps.iter().map(|p| argmax(p.as_slice())).collect())
            .collect(),
        traces: fwd.traces(params.config.scheme),
        activity_probs: last.as_slice().to_vec(),
    })
}

/// What a training step optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Mean person cross-entropy; only the person branch is on the tape.
    PersonOnly,
    /// Group loss plus `lambda` times the person loss.
    Joint,
}

/// Loss and named gradients for one clip.
pub fn loss_and_grads(
    params: &ModelParams,
    clip: &Clip,
    objective: Objective,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    clip.check_against(&params.config)?;
    let mut tape = Tape::new();
    let loss = match objective {
        Objective::PersonOnly => {
            let bound = params.bind_person_branch(&mut tape)?;
            let person = person_outputs(&mut tape, &bound, clip)?;
            person_loss(&mut tape, &person.action_probs, &clip.action_labels)?
        }
        Objective::Joint => {
            let bound = params.bind(&mut tape)?;
            let person = person_outputs(&mut tape, &bound, clip)?;
            let group_vars = bound.group.as_ref().expect("full binding");
            let group = group_outputs(
                &mut tape,
                group_vars,
                params.config.scheme,
                &person.reprs,
                &clip.subgroups,
            )?;
            joint_loss_var(
                &mut tape,
                &group.activity_probs,
                &person.action_probs,
                clip,
                params.config.lambda,
                params.config.group_loss,
            )?
        }
    };
    let value = tape.scalar(loss);
    let grads = tape.backward(loss)?;
    Ok((value, grads.named()))
}

/// Loss only, without a backward pass.
pub fn loss(params: &ModelParams, clip: &Clip, objective: Objective) -> Result<f64> {
    match objective {
        Objective::PersonOnly => {
            clip.check_against(&params.config)?;
            let mut tape = Tape::new();
            let bound = params.bind_person_branch(&mut tape)?;
            let person = person_outputs(&mut tape, &bound, clip)?;
            let l = person_loss(&mut tape, &person.action_probs, &clip.action_labels)?;
            Ok(tape.scalar(l))
        }
        Objective::Joint => {
            let mut fwd = ClipForward::run(params, clip)?;
            let l = joint_loss_var(
                &mut fwd.tape,
                &fwd.group.activity_probs,
                &fwd.person.action_probs,
                clip,
                params.config.lambda,
                params.config.group_loss,
            )?;
            Ok(fwd.tape.scalar(l))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> Vector {
        Vector::new(data.to_vec()).unwrap()
    }

    fn tiny_config(scheme: PoolingScheme) -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            person_hidden: 4,
            group_hidden: 3,
            group_fc_dim: 3,
            attention_hidden: 2,
            action_classes: 3,
            activity_classes: 2,
            subgroups: 2,
            scheme,
            ..ModelConfig::default()
        }
    }

    fn clip(n: usize, t: usize, dx: usize, seed: u64) -> Clip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let persons = (0..n)
            .map(|_| {
                (0..t)
                    .map(|_| v(&(0..dx).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        Clip {
            id: seed,
            persons,
            action_labels: (0..n).map(|i| (0..t).map(|s| (i + s) % 3).collect()).collect(),
            activity_label: 1,
            subgroups: SubgroupAssignment::contiguous(n, n.min(2)).unwrap(),
        }
    }

    #[test]
    fn zero_person_lstm_gives_zero_hidden_half() {
        let params = ModelParams::zeros(&tiny_config(PoolingScheme::Gap)).unwrap();
        let track = vec![v(&[1.0, 2.0, 3.0]), v(&[-1.0, 0.5, 0.0])];
        let (reprs, probs) = person_forward(&params, &track).unwrap();
        for (p, x) in reprs.iter().zip(&track) {
            assert_eq!(p.dim(), 4 + 3);
            assert_eq!(&p.as_slice()[..4], &[0.0; 4]);
            assert_eq!(&p.as_slice()[4..], x.as_slice());
        }
        for p in probs {
            assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(person_forward(&params, &[v(&[1.0])]).is_err());
    }

    #[test]
    fn single_person_gap_has_unit_attention() {
        let config = ModelConfig {
            subgroups: 1,
            ..tiny_config(PoolingScheme::Gap)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(&config, &InitConfig::default(), &mut rng).unwrap();
        let mut c = clip(1, 3, 3, 11);
        c.subgroups = SubgroupAssignment::contiguous(1, 1).unwrap();
        let (probs, traces) = group_forward(&params, &c).unwrap();
        assert_eq!(probs.len(), 3);
        assert_eq!(traces.len(), 3);
        assert!(traces.iter().all(|t| t.person_weights == vec![1.0]));
    }

    #[test]
    fn max_and_avg_agree_on_identical_persons() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let max = ModelParams::init(&tiny_config(PoolingScheme::Max), &InitConfig::default(), &mut rng)
            .unwrap();
        let mut avg = ModelParams::zeros(&tiny_config(PoolingScheme::Avg)).unwrap();
        avg.copy_from(&max, |_| true);
        let mut c = clip(4, 3, 3, 2);
        let track = c.persons[0].clone();
        c.persons.iter_mut().for_each(|p| *p = track.clone());
        let (pm, tm) = group_forward(&max, &c).unwrap();
        let (pa, ta) = group_forward(&avg, &c).unwrap();
        assert!(tm.is_empty() && ta.is_empty());
        for (a, b) in pm.iter().zip(&pa) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn joint_loss_anchors() {
        let uniform_g = v(&[1.0 / 8.0; 8]);
        let uniform_p = v(&[1.0 / 9.0; 9]);
        let mut c = clip(3, 2, 2, 1);
        c.activity_label = 5;
        c.action_labels = vec![vec![8, 0]; 3];
        let activity = vec![uniform_g.clone(); 2];
        let actions = vec![vec![uniform_p.clone(); 2]; 3];
        let l = joint_loss(&activity, &actions, &c, 2.0, GroupLoss::Final).unwrap();
        assert!((l - (8f64.ln() + 2.0 * 9f64.ln())).abs() < 1e-12);
        // 6.4738907...; the commonly quoted 6.473892 is a rounding of this.
        assert!((l - 6.473892).abs() < 2e-6);

        let l0 = joint_loss(&activity, &actions, &c, 0.0, GroupLoss::Final).unwrap();
        assert!((l0 - 8f64.ln()).abs() < 1e-12);
        let l1 = joint_loss(&activity, &actions, &c, 1.0, GroupLoss::Final).unwrap();
        assert!(((l - l1) - (l1 - l0)).abs() < 1e-12);

        c.activity_label = 8;
        assert!(joint_loss(&activity, &actions, &c, 2.0, GroupLoss::Final).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn names_are_unique_and_branch_tagged() {
        for scheme in PoolingScheme::ALL {
            let params = ModelParams::zeros(&tiny_config(scheme)).unwrap();
            let names: Vec<String> = params.named_shapes().into_iter().map(|(n, _)| n).collect();
            let unique: std::collections::BTreeSet<_> = names.iter().collect();
            assert_eq!(unique.len(), names.len());
            assert!(names.iter().any(|n| is_person_branch(n)));
            assert!(names.iter().any(|n| !is_person_branch(n)));
            params.validate().unwrap();
        }
        assert!(!is_person_branch("person_lstmx.w"));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.lambda = -1.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.activity_classes = 1;
        assert!(c.validate().is_err());
        let c = ModelConfig {
            scheme: PoolingScheme::SubgroupGap,
            ..ModelConfig::default()
        };
        assert_eq!(c.pooled_dim(), 2 * (32 + 12));
    }
}
