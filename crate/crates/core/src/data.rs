//! Clips, the synthetic "needle" generator, and JSONL file formats.
//!
//! Clip file: one JSON object per line,
//!
//! ```text
//! {"v":1,"id":3,"T":6,"dx":12,"persons":[[[..dx floats..],..T..],..n..],
//!  "action_labels":[[..T..],..n..],"activity_label":2,"subgroups":[0,0,0,0,1,1,1,1]}
//! ```
//!
//! Trace file: one object per `(clip, timestep)`,
//!
//! ```text
//! {"clip_id":3,"t":0,"alphas":[..n..],"subgroup_alphas":[..m..],"pred":2,"truth":2}
//! ```
//!
//! `subgroup_alphas` is omitted for schemes without a subgroup level. Floats
//! use the shortest decimal form that parses back to the same `f64`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError};
use crate::pooling::{AttentionTrace, PoolingScheme, SubgroupAssignment};
use crate::tensor::Vector;

pub const CLIP_SCHEMA_VERSION: u32 = 1;

/// Action label carried by distractor agents.
pub const BACKGROUND_ACTION: usize = 0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}, field `{field}`: {message}")]
    Field {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("trace export: {0}")]
    Trace(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One labelled sample: `n` tracks of `T` feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: u64,
    /// `[person][t]`.
    pub persons: Vec<Vec<Vector>>,
    /// `[person][t]`.
    pub action_labels: Vec<Vec<usize>>,
    pub activity_label: usize,
    pub subgroups: SubgroupAssignment,
}

impl Clip {
    pub fn persons(&self) -> usize {
        self.persons.len()
    }

    pub fn timesteps(&self) -> usize {
        self.persons.first().map_or(0, |p| p.len())
    }

    pub fn feature_dim(&self) -> usize {
        self.persons
            .first()
            .and_then(|p| p.first())
            .map_or(0, |x| x.dim())
    }

    /// Indices of agents whose action label is not background at `t = 0`.
    pub fn key_agents(&self) -> Vec<usize> {
        self.action_labels
            .iter()
            .enumerate()
            .filter(|(_, ys)| ys.first().is_some_and(|&y| y != BACKGROUND_ACTION))
            .map(|(i, _)| i)
            .collect()
    }

    /// Structural checks that do not depend on a model.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        let n = self.persons.len();
        let t = self.timesteps();
        let dx = self.feature_dim();
        if n == 0 {
            return Err(("persons", "clip has no persons".into()));
        }
        if t == 0 {
            return Err(("persons", "clip has no timesteps".into()));
        }
        for (i, track) in self.persons.iter().enumerate() {
            if track.len() != t {
                return Err(("persons", format!("person {i} has {} timesteps, expected {t}", track.len())));
            }
            if let Some(x) = track.iter().find(|x| x.dim() != dx) {
                return Err(("persons", format!("person {i} has a {}-dim feature, expected {dx}", x.dim())));
            }
        }
        if self.action_labels.len() != n || self.action_labels.iter().any(|ys| ys.len() != t) {
            return Err(("action_labels", format!("expected {n} rows of {t} labels")));
        }
        if self.subgroups.persons() != n {
            return Err((
                "subgroups",
                format!("{} entries for {n} persons", self.subgroups.persons()),
            ));
        }
        Ok(())
    }

    /// Checks dimensions and label ranges against a model configuration.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::Clip { id: self.id, reason };
        self.validate().map_err(|(field, msg)| fail(format!("{field}: {msg}")))?;
        if self.feature_dim() != config.feature_dim {
            return Err(fail(format!(
                "feature dim {} does not match model feature dim {}",
                self.feature_dim(),
                config.feature_dim
            )));
        }
        if self.activity_label >= config.activity_classes {
            return Err(fail(format!(
                "activity label {} out of range for {} classes",
                self.activity_label, config.activity_classes
            )));
        }
        if let Some(y) = self.action_labels.iter().flatten().find(|&&y| y >= config.action_classes) {
            return Err(fail(format!(
                "action label {y} out of range for {} classes",
                config.action_classes
            )));
        }
        if matches!(config.scheme, PoolingScheme::Hap | PoolingScheme::SubgroupGap)
            && self.subgroups.count() != config.subgroups
        {
            return Err(fail(format!(
                "clip has {} subgroups, model expects {}",
                self.subgroups.count(),
                config.subgroups
            )));
        }
        Ok(())
    }
}

/// On-disk form of a clip.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipRecord {
    v: u32,
    id: u64,
    #[serde(rename = "T")]
    t: usize,
    dx: usize,
    persons: Vec<Vec<Vec<f64>>>,
    action_labels: Vec<Vec<usize>>,
    activity_label: usize,
    subgroups: Vec<usize>,
}

impl ClipRecord {
    fn from_clip(clip: &Clip) -> Self {
        ClipRecord {
            v: CLIP_SCHEMA_VERSION,
            id: clip.id,
            t: clip.timesteps(),
            dx: clip.feature_dim(),
            persons: clip
                .persons
                .iter()
                .map(|track| track.iter().map(|x| x.as_slice().to_vec()).collect())
                .collect(),
            action_labels: clip.action_labels.clone(),
            activity_label: clip.activity_label,
            subgroups: clip.subgroups.ids().to_vec(),
        }
    }

    fn into_clip(self, line: usize) -> Result<Clip> {
        let field = |field: &'static str, message: String| DataError::Field {
            line,
            field,
            message,
        };
        if self.v != CLIP_SCHEMA_VERSION {
            return Err(field("v", format!("unsupported schema version {}", self.v)));
        }
        let mut persons = Vec::with_capacity(self.persons.len());
        for track in self.persons {
            let mut xs = Vec::with_capacity(track.len());
            for x in track {
                xs.push(Vector::new(x).map_err(|e| field("persons", e.to_string()))?);
            }
            persons.push(xs);
        }
        let count = self.subgroups.iter().max().map_or(0, |m| m + 1);
        let subgroups = SubgroupAssignment::new(self.subgroups, count)
            .map_err(|e| field("subgroups", e.to_string()))?;
        let clip = Clip {
            id: self.id,
            persons,
            action_labels: self.action_labels,
            activity_label: self.activity_label,
            subgroups,
        };
        clip.validate().map_err(|(f, msg)| field(f, msg))?;
        if clip.timesteps() != self.t {
            return Err(field("T", format!("declared {} but tracks have {}", self.t, clip.timesteps())));
        }
        if clip.feature_dim() != self.dx {
            return Err(field("dx", format!("declared {} but features have {}", self.dx, clip.feature_dim())));
        }
        Ok(clip)
    }
}

pub fn write_clips<W: Write>(out: &mut W, clips: &[Clip]) -> std::io::Result<()> {
    for clip in clips {
        serde_json::to_writer(&mut *out, &ClipRecord::from_clip(clip))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a whole clip stream; any bad line fails the entire read.
pub fn read_clips<R: BufRead>(input: R) -> Result<Vec<Clip>> {
    let mut clips = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ClipRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        clips.push(record.into_clip(line_no)?);
    }
    Ok(clips)
}

pub fn save_clips(path: &Path, clips: &[Clip]) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_clips(&mut out, clips).map_err(io_err(path))?;
    out.flush().map_err(io_err(path))
}

pub fn load_clips(path: &Path) -> Result<Vec<Clip>> {
    let file = File::open(path).map_err(io_err(path))?;
    read_clips(BufReader::new(file))
}

/// One line of a trace export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub clip_id: u64,
    pub t: usize,
    pub alphas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subgroup_alphas: Option<Vec<f64>>,
    pub pred: usize,
    pub truth: usize,
}

/// Attention traces of one clip together with its labels.
#[derive(Debug, Clone)]
pub struct ClipTraces {
    pub clip_id: u64,
    pub traces: Vec<AttentionTrace>,
    pub pred: usize,
    pub truth: usize,
}

pub fn trace_records(scheme: PoolingScheme, clips: &[ClipTraces]) -> Result<Vec<TraceRecord>> {
    if !scheme.is_attentive() {
        return Err(DataError::Trace(format!("scheme {scheme} produces no attention traces")));
    }
    let mut records = Vec::new();
    for clip in clips {
        if clip.traces.is_empty() {
            return Err(DataError::Trace(format!("clip {} has no traces", clip.clip_id)));
        }
        for (t, trace) in clip.traces.iter().enumerate() {
            if trace.scheme != scheme {
                return Err(DataError::Trace(format!(
                    "clip {} carries {} traces, expected {scheme}",
                    clip.clip_id, trace.scheme
                )));
            }
            records.push(TraceRecord {
                clip_id: clip.clip_id,
                t,
                alphas: trace.person_weights.clone(),
                subgroup_alphas: trace.subgroup_weights.clone(),
                pred: clip.pred,
                truth: clip.truth,
            });
        }
    }
    Ok(records)
}

pub fn export_traces(path: &Path, scheme: PoolingScheme, clips: &[ClipTraces]) -> Result<()> {
    let records = trace_records(scheme, clips)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for r in &records {
        serde_json::to_writer(&mut out, r).map_err(|e| DataError::Trace(e.to_string()))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Synthetic needle-task parameters.
///
/// Each clip draws an activity class `c`. `key_agents` randomly placed agents
/// follow `amplitude * dir_c + N(0, signal_std²)` at every timestep and carry
/// action label `1 + c mod (action_classes - 1)`. Every other agent gets
/// `N(0, noise_std²)` features and the background action label. Distractor
/// noise is AR(1) over time with coefficient `noise_persistence`, so its
/// marginal stays `N(0, noise_std²)` while 1.0 freezes it per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub persons: usize,
    pub timesteps: usize,
    pub feature_dim: usize,
    pub action_classes: usize,
    pub activity_classes: usize,
    pub key_agents: usize,
    /// Deal key agents round-robin over subgroups (random position within
    /// each) instead of drawing positions uniformly from the whole clip.
    pub spread_keys: bool,
    pub subgroups: usize,
    pub signal_std: f64,
    pub noise_std: f64,
    pub noise_persistence: f64,
    /// Distractors are centred on `decoy_amplitude * dir_k` for a class `k`
    /// drawn independently of the clip label (0.0 gives plain noise).
    pub decoy_amplitude: f64,
    /// Norm of each class mean direction.
    pub amplitude: f64,
    pub train_clips: usize,
    pub test_clips: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            persons: 8,
            timesteps: 6,
            feature_dim: 12,
            action_classes: 5,
            activity_classes: 4,
            key_agents: 2,
            spread_keys: false,
            subgroups: 2,
            signal_std: 1.0,
            noise_std: 2.0,
            noise_persistence: 0.0,
            decoy_amplitude: 0.0,
            amplitude: 2.0,
            train_clips: 800,
            test_clips: 200,
            seed: 7,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if self.persons == 0 || self.timesteps == 0 || self.feature_dim == 0 {
            return bad("persons, timesteps and feature_dim must be positive".into());
        }
        if self.key_agents == 0 || self.key_agents > self.persons {
            return bad(format!(
                "key_agents must be in 1..={}, got {}",
                self.persons, self.key_agents
            ));
        }
        if self.activity_classes < 2 {
            return bad("activity_classes must be at least 2".into());
        }
        if self.action_classes < 2 {
            return bad("action_classes must be at least 2".into());
        }
        if self.subgroups == 0 || self.subgroups > self.persons {
            return bad(format!("subgroups must be in 1..={}", self.persons));
        }
        for (name, v) in [
            ("signal_std", self.signal_std),
            ("noise_std", self.noise_std),
            ("amplitude", self.amplitude),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive and finite"));
            }
        }
        if !(self.decoy_amplitude >= 0.0 && self.decoy_amplitude.is_finite()) {
            return bad("decoy_amplitude must be non-negative and finite".into());
        }
        if !(0.0..=1.0).contains(&self.noise_persistence) {
            return bad("noise_persistence must lie in [0, 1]".into());
        }
        if self.train_clips + self.test_clips == 0 {
            return bad("no clips requested".into());
        }
        Ok(())
    }

    /// Unit-norm mean direction per activity class, scaled by `amplitude`.
    pub fn class_directions(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.activity_classes)
            .map(|_| {
                let raw: Vec<f64> = (0..self.feature_dim)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                raw.iter().map(|v| self.amplitude * v / norm).collect()
            })
            .collect()
    }

    pub fn key_action(&self, activity: usize) -> usize {
        1 + activity % (self.action_classes - 1)
    }
}

fn generate_clip(config: &GeneratorConfig, directions: &[Vec<f64>], id: u64) -> Clip {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(id);
    let activity = rng.random_range(0..config.activity_classes);

    let assignment = SubgroupAssignment::contiguous(config.persons, config.subgroups)
        .expect("validated subgroup count");
    let mut is_key = vec![false; config.persons];
    if config.spread_keys {
        let mut pools: Vec<Vec<usize>> = (0..assignment.count())
            .map(|j| {
                let mut members = assignment.members(j);
                members.shuffle(&mut rng);
                members
            })
            .collect();
        let mut j = 0;
        for _ in 0..config.key_agents {
            while pools[j].is_empty() {
                j = (j + 1) % pools.len();
            }
            is_key[pools[j].pop().expect("non-empty pool")] = true;
            j = (j + 1) % pools.len();
        }
    } else {
        let mut order: Vec<usize> = (0..config.persons).collect();
        order.shuffle(&mut rng);
        for &i in &order[..config.key_agents] {
            is_key[i] = true;
        }
    }

    let signal = Normal::new(0.0, config.signal_std).expect("validated std");
    let noise = Normal::new(0.0, config.noise_std).expect("validated std");
    let mut persons = Vec::with_capacity(config.persons);
    let mut action_labels = Vec::with_capacity(config.persons);
    for &key in &is_key {
        let rho = config.noise_persistence;
        let fresh = (1.0 - rho * rho).sqrt();
        let mut state: Vec<f64> = Vec::new();
        let decoy: Vec<f64> = if key {
            Vec::new()
        } else {
            let k = rng.random_range(0..config.activity_classes);
            directions[k].iter().map(|m| m * config.decoy_amplitude / config.amplitude).collect()
        };
        let track = (0..config.timesteps)
            .map(|t| {
                let x: Vec<f64> = if key {
                    directions[activity]
                        .iter()
                        .map(|m| m + signal.sample(&mut rng))
                        .collect()
                } else {
                    if t == 0 {
                        state = (0..config.feature_dim).map(|_| noise.sample(&mut rng)).collect();
                    } else {
                        for s in state.iter_mut() {
                            *s = rho * *s + fresh * noise.sample(&mut rng);
                        }
                    }
                    state.iter().zip(&decoy).map(|(s, m)| s + m).collect()
                };
                Vector::new(x).expect("finite sample")
            })
            .collect();
        persons.push(track);
        let label = if key {
            config.key_action(activity)
        } else {
            BACKGROUND_ACTION
        };
        action_labels.push(vec![label; config.timesteps]);
    }

    Clip {
        id,
        persons,
        action_labels,
        activity_label: activity,
        subgroups: assignment,
    }
}

/// Generates `(train, test)`. Clip ids `0..train_clips` are train, the rest test.
pub fn generate(config: &GeneratorConfig) -> Result<(Vec<Clip>, Vec<Clip>)> {
    config.validate()?;
    let directions = config.class_directions();
    let total = (config.train_clips + config.test_clips) as u64;
    let mut clips: Vec<Clip> = (0..total)
        .into_par_iter()
        .map(|id| generate_clip(config, &directions, id))
        .collect();
    let test = clips.split_off(config.train_clips);
    Ok((clips, test))
}
