//! Aggregation of per-person representations into one group vector.
//!
//! Five schemes are supported: element-wise max, mean, global attentive
//! pooling (one softmax over all persons), hierarchical attentive pooling
//! (softmax within each subgroup, then across subgroup vectors) and
//! per-subgroup attentive pooling followed by concatenation.
//!
//! Attention for a set of items `P_1..P_n`:
//!
//! ```text
//! u_i   = tanh(W P_i + b)
//! alpha = softmax(u_i . u_ctx)
//! G     = sum_i alpha_i P_i
//! ```
//!
//! `W`, `b` and `u_ctx` are shared across timesteps.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{
    bind_matrix, bind_vector, join, visit_matrix, visit_matrix_mut, visit_vector,
    visit_vector_mut, Parameters,
};
use crate::tensor::{MathError, Matrix, Shape, Tape, Var, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error(transparent)]
    Math(#[from] MathError),
    #[error("subgroup {0} has no members")]
    EmptySubgroup(usize),
    #[error("subgroup id {id} out of range for {count} subgroups")]
    SubgroupOutOfRange { id: usize, count: usize },
    #[error("assignment covers {assigned} persons but {given} were given")]
    AssignmentLength { assigned: usize, given: usize },
    #[error("{scheme} needs {expected} attention parameter sets, got {got}")]
    ParamCount {
        scheme: PoolingScheme,
        expected: usize,
        got: usize,
    },
    #[error("pooling parameters do not match scheme {0}")]
    SchemeMismatch(PoolingScheme),
}

pub type Result<T, E = PoolError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingScheme {
    Max,
    Avg,
    Gap,
    Hap,
    SubgroupGap,
}

impl PoolingScheme {
    pub const ALL: [PoolingScheme; 5] = [
        PoolingScheme::Max,
        PoolingScheme::Avg,
        PoolingScheme::Gap,
        PoolingScheme::Hap,
        PoolingScheme::SubgroupGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PoolingScheme::Max => "max",
            PoolingScheme::Avg => "avg",
            PoolingScheme::Gap => "gap",
            PoolingScheme::Hap => "hap",
            PoolingScheme::SubgroupGap => "subgroup-gap",
        }
    }

    pub fn is_attentive(self) -> bool {
        !matches!(self, PoolingScheme::Max | PoolingScheme::Avg)
    }

    /// Dimension of the pooled vector for person representations of `dim`.
    pub fn output_dim(self, dim: usize, subgroups: usize) -> usize {
        match self {
            PoolingScheme::SubgroupGap => dim * subgroups,
            _ => dim,
        }
    }
}

impl fmt::Display for PoolingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PoolingScheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PoolingScheme::ALL
            .into_iter()
            .find(|scheme| scheme.name() == s)
            .ok_or_else(|| format!("unknown pooling scheme `{s}` (expected max, avg, gap, hap or subgroup-gap)"))
    }
}

/// Partition of persons into `count` subgroups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubgroupAssignment {
    ids: Vec<usize>,
    count: usize,
}

impl SubgroupAssignment {
    pub fn new(ids: Vec<usize>, count: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= count) {
            return Err(PoolError::SubgroupOutOfRange { id, count });
        }
        if count == 0 {
            return Err(PoolError::EmptySubgroup(0));
        }
        let assignment = SubgroupAssignment { ids, count };
        for j in 0..count {
            if assignment.members(j).is_empty() {
                return Err(PoolError::EmptySubgroup(j));
            }
        }
        Ok(assignment)
    }

    /// Splits `n` persons into `count` contiguous blocks in index order;
    /// earlier blocks take the remainder.
    pub fn contiguous(n: usize, count: usize) -> Result<Self> {
        if count == 0 || count > n {
            return Err(PoolError::EmptySubgroup(n.min(count)));
        }
        let base = n / count;
        let extra = n % count;
        let mut ids = Vec::with_capacity(n);
        for j in 0..count {
            let size = base + usize::from(j < extra);
            ids.extend(std::iter::repeat_n(j, size));
        }
        SubgroupAssignment::new(ids, count)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn persons(&self) -> usize {
        self.ids.len()
    }

    /// Person indices of subgroup `j`, in person order.
    pub fn members(&self, j: usize) -> Vec<usize> {
        self.ids
            .iter()
            .enumerate()
            .filter(|(_, &id)| id == j)
            .map(|(i, _)| i)
            .collect()
    }

    fn check_len(&self, given: usize) -> Result<()> {
        if self.ids.len() != given {
            return Err(PoolError::AssignmentLength {
                assigned: self.ids.len(),
                given,
            });
        }
        Ok(())
    }
}

/// One attention MLP with its learned context vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub weight: Matrix,
    pub bias: Vector,
    pub context: Vector,
}

impl AttentionParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        AttentionParams {
            weight: Matrix::zeros(hidden, input_dim),
            bias: Vector::zeros(hidden),
            context: Vector::zeros(hidden),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<AttentionVars> {
        Ok(AttentionVars {
            weight: bind_matrix(tape, prefix, "w", &self.weight)?,
            bias: bind_vector(tape, prefix, "b", &self.bias)?,
            context: bind_vector(tape, prefix, "u", &self.context)?,
        })
    }
}

impl Parameters for AttentionParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        visit_matrix(&self.weight, prefix, "w", f);
        visit_vector(&self.bias, prefix, "b", f);
        visit_vector(&self.context, prefix, "u", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        visit_matrix_mut(&mut self.weight, prefix, "w", f);
        visit_vector_mut(&mut self.bias, prefix, "b", f);
        visit_vector_mut(&mut self.context, prefix, "u", f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub weight: Var,
    pub bias: Var,
    pub context: Var,
}

impl AttentionVars {
    /// Returns the attended vector and the weight vector over `items`.
    pub fn attend(&self, tape: &mut Tape, items: &[Var]) -> Result<(Var, Var)> {
        if items.is_empty() {
            return Err(MathError::Empty { op: "gap" }.into());
        }
        let mut scores = Vec::with_capacity(items.len());
        for &p in items {
            let wp = tape.matvec(self.weight, p)?;
            let pre = tape.add(wp, self.bias)?;
            let u = tape.tanh(pre);
            scores.push(tape.dot(u, self.context)?);
        }
        let scores = tape.concat(&scores)?;
        let alpha = tape.softmax(scores)?;
        let pooled = tape.weighted_sum(alpha, items)?;
        Ok((pooled, alpha))
    }
}

/// Hierarchical attention: per-subgroup person attention, then attention
/// across subgroup vectors.
///
/// With `shared_person_level`, `person_level` holds a single set used for
/// every subgroup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HapParams {
    pub person_level: Vec<AttentionParams>,
    pub subgroup_level: AttentionParams,
    pub shared_person_level: bool,
}

impl HapParams {
    fn check(&self, subgroups: usize) -> Result<()> {
        let expected = if self.shared_person_level { 1 } else { subgroups };
        if self.person_level.len() != expected {
            return Err(PoolError::ParamCount {
                scheme: PoolingScheme::Hap,
                expected,
                got: self.person_level.len(),
            });
        }
        Ok(())
    }
}

impl Parameters for HapParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        for (j, p) in self.person_level.iter().enumerate() {
            p.visit(&join(prefix, &format!("person.{j}")), f);
        }
        self.subgroup_level.visit(&join(prefix, "subgroup"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        for (j, p) in self.person_level.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &format!("person.{j}")), f);
        }
        self.subgroup_level.visit_mut(&join(prefix, "subgroup"), f);
    }
}

/// Attention weights produced by one pooling call (one timestep).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub scheme: PoolingScheme,
    /// Person weights in person order. Normalised over the whole group for
    /// GAP and within each subgroup otherwise.
    pub person_weights: Vec<f64>,
    /// Subgroup weights, HAP only.
    pub subgroup_weights: Option<Vec<f64>>,
}

fn values(tape: &Tape, v: Var) -> Vec<f64> {
    tape.value(v).to_vec()
}

pub fn max_pool(persons: &[Vector]) -> Result<Vector> {
    let mut tape = Tape::new();
    let items: Vec<Var> = persons.iter().map(|p| tape.vector(p)).collect();
    let out = tape.max(&items)?;
    Ok(Vector::new(values(&tape, out))?)
}

pub fn avg_pool(persons: &[Vector]) -> Result<Vector> {
    let mut tape = Tape::new();
    let items: Vec<Var> = persons.iter().map(|p| tape.vector(p)).collect();
    let out = tape.mean(&items)?;
    Ok(Vector::new(values(&tape, out))?)
}

/// Global attentive pooling. Returns `(G, alpha)` with `alpha` in person order.
pub fn gap(persons: &[Vector], params: &AttentionParams) -> Result<(Vector, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, "gap")?;
    let items: Vec<Var> = persons.iter().map(|p| tape.vector(p)).collect();
    let (g, alpha) = vars.attend(&mut tape, &items)?;
    Ok((Vector::new(values(&tape, g))?, values(&tape, alpha)))
}

pub fn hap(
    persons: &[Vector],
    assignment: &SubgroupAssignment,
    params: &HapParams,
) -> Result<(Vector, AttentionTrace)> {
    let pooling = PoolingParams::Hap(params.clone());
    pool_values(PoolingScheme::Hap, persons, assignment, &pooling)
}

pub fn subgroup_gap_concat(
    persons: &[Vector],
    assignment: &SubgroupAssignment,
    params: &[AttentionParams],
) -> Result<(Vector, AttentionTrace)> {
    let pooling = PoolingParams::SubgroupGap(params.to_vec());
    pool_values(PoolingScheme::SubgroupGap, persons, assignment, &pooling)
}

fn pool_values(
    scheme: PoolingScheme,
    persons: &[Vector],
    assignment: &SubgroupAssignment,
    params: &PoolingParams,
) -> Result<(Vector, AttentionTrace)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, "pooling")?;
    let items: Vec<Var> = persons.iter().map(|p| tape.vector(p)).collect();
    let (g, trace) = vars.pool(&mut tape, scheme, &items, assignment)?;
    let trace = trace.expect("attentive scheme").read(&tape, scheme);
    Ok((Vector::new(values(&tape, g))?, trace))
}

/// Learnable pooling parameters for one scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingParams {
    None,
    Gap(AttentionParams),
    Hap(HapParams),
    SubgroupGap(Vec<AttentionParams>),
}

impl PoolingParams {
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<PoolingVars> {
        Ok(match self {
            PoolingParams::None => PoolingVars::None,
            PoolingParams::Gap(p) => PoolingVars::Gap(p.bind(tape, &join(prefix, "gap"))?),
            PoolingParams::Hap(p) => {
                let prefix = join(prefix, "hap");
                let person = p
                    .person_level
                    .iter()
                    .enumerate()
                    .map(|(j, a)| a.bind(tape, &join(&prefix, &format!("person.{j}"))))
                    .collect::<Result<Vec<_>>>()?;
                let subgroup = p.subgroup_level.bind(tape, &join(&prefix, "subgroup"))?;
                PoolingVars::Hap {
                    person,
                    subgroup,
                    shared: p.shared_person_level,
                }
            }
            PoolingParams::SubgroupGap(ps) => {
                let prefix = join(prefix, "subgroup_gap");
                PoolingVars::SubgroupGap(
                    ps.iter()
                        .enumerate()
                        .map(|(j, a)| a.bind(tape, &join(&prefix, &j.to_string())))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
        })
    }

    /// Checks that these parameters can drive `scheme` with `subgroups` groups.
    pub fn check(&self, scheme: PoolingScheme, subgroups: usize) -> Result<()> {
        match (scheme, self) {
            (PoolingScheme::Max | PoolingScheme::Avg, PoolingParams::None) => Ok(()),
            (PoolingScheme::Gap, PoolingParams::Gap(_)) => Ok(()),
            (PoolingScheme::Hap, PoolingParams::Hap(p)) => p.check(subgroups),
            (PoolingScheme::SubgroupGap, PoolingParams::SubgroupGap(ps)) => {
                if ps.len() != subgroups {
                    return Err(PoolError::ParamCount {
                        scheme,
                        expected: subgroups,
                        got: ps.len(),
                    });
                }
                Ok(())
            }
            _ => Err(PoolError::SchemeMismatch(scheme)),
        }
    }
}

impl Parameters for PoolingParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        match self {
            PoolingParams::None => {}
            PoolingParams::Gap(p) => p.visit(&join(prefix, "gap"), f),
            PoolingParams::Hap(p) => p.visit(&join(prefix, "hap"), f),
            PoolingParams::SubgroupGap(ps) => {
                for (j, p) in ps.iter().enumerate() {
                    p.visit(&join(prefix, &format!("subgroup_gap.{j}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        match self {
            PoolingParams::None => {}
            PoolingParams::Gap(p) => p.visit_mut(&join(prefix, "gap"), f),
            PoolingParams::Hap(p) => p.visit_mut(&join(prefix, "hap"), f),
            PoolingParams::SubgroupGap(ps) => {
                for (j, p) in ps.iter_mut().enumerate() {
                    p.visit_mut(&join(prefix, &format!("subgroup_gap.{j}")), f);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum PoolingVars {
    None,
    Gap(AttentionVars),
    Hap {
        person: Vec<AttentionVars>,
        subgroup: AttentionVars,
        shared: bool,
    },
    SubgroupGap(Vec<AttentionVars>),
}

/// Tape handles of the attention weights for one pooling call.
#[derive(Debug, Clone)]
pub struct TraceVars {
    /// One weight vector per subgroup (a single entry for GAP), paired with
    /// the person indices it covers.
    person: Vec<(Vec<usize>, Var)>,
    subgroup: Option<Var>,
}

impl TraceVars {
    pub fn read(&self, tape: &Tape, scheme: PoolingScheme) -> AttentionTrace {
        let n: usize = self.person.iter().map(|(m, _)| m.len()).sum();
        let mut person_weights = vec![0.0; n];
        for (members, alpha) in &self.person {
            for (&i, &w) in members.iter().zip(tape.value(*alpha)) {
                person_weights[i] = w;
            }
        }
        AttentionTrace {
            scheme,
            person_weights,
            subgroup_weights: self.subgroup.map(|s| values(tape, s)),
        }
    }
}

impl PoolingVars {
    /// Pools `items` (one per person). The trace is `None` for max and mean.
    pub fn pool(
        &self,
        tape: &mut Tape,
        scheme: PoolingScheme,
        items: &[Var],
        assignment: &SubgroupAssignment,
    ) -> Result<(Var, Option<TraceVars>)> {
        match (scheme, self) {
            (PoolingScheme::Max, PoolingVars::None) => Ok((tape.max(items)?, None)),
            (PoolingScheme::Avg, PoolingVars::None) => Ok((tape.mean(items)?, None)),
            (PoolingScheme::Gap, PoolingVars::Gap(att)) => {
                let (g, alpha) = att.attend(tape, items)?;
                let trace = TraceVars {
                    person: vec![((0..items.len()).collect(), alpha)],
                    subgroup: None,
                };
                Ok((g, Some(trace)))
            }
            (PoolingScheme::Hap, PoolingVars::Hap { person, subgroup, shared }) => {
                assignment.check_len(items.len())?;
                let expected = if *shared { 1 } else { assignment.count() };
                if person.len() != expected {
                    return Err(PoolError::ParamCount {
                        scheme,
                        expected,
                        got: person.len(),
                    });
                }
                let (groups, weights) = subgroup_pool(tape, items, assignment, |j| {
                    if *shared {
                        &person[0]
                    } else {
                        &person[j]
                    }
                })?;
                let vectors: Vec<Var> = groups.iter().map(|(g, _)| *g).collect();
                let (g, alpha) = subgroup.attend(tape, &vectors)?;
                let trace = TraceVars {
                    person: weights,
                    subgroup: Some(alpha),
                };
                Ok((g, Some(trace)))
            }
            (PoolingScheme::SubgroupGap, PoolingVars::SubgroupGap(atts)) => {
                assignment.check_len(items.len())?;
                if atts.len() != assignment.count() {
                    return Err(PoolError::ParamCount {
                        scheme,
                        expected: assignment.count(),
                        got: atts.len(),
                    });
                }
                let (groups, weights) = subgroup_pool(tape, items, assignment, |j| &atts[j])?;
                let vectors: Vec<Var> = groups.iter().map(|(g, _)| *g).collect();
                let g = tape.concat(&vectors)?;
                let trace = TraceVars {
                    person: weights,
                    subgroup: None,
                };
                Ok((g, Some(trace)))
            }
            _ => Err(PoolError::SchemeMismatch(scheme)),
        }
    }
}

type SubgroupOutputs = (Vec<(Var, Var)>, Vec<(Vec<usize>, Var)>);

fn subgroup_pool<'a>(
    tape: &mut Tape,
    items: &[Var],
    assignment: &SubgroupAssignment,
    params_for: impl Fn(usize) -> &'a AttentionVars,
) -> Result<SubgroupOutputs> {
    let mut groups = Vec::with_capacity(assignment.count());
    let mut weights = Vec::with_capacity(assignment.count());
    for j in 0..assignment.count() {
        let members = assignment.members(j);
        if members.is_empty() {
            return Err(PoolError::EmptySubgroup(j));
        }
        let subset: Vec<Var> = members.iter().map(|&i| items[i]).collect();
        let (g, alpha) = params_for(j).attend(tape, &subset)?;
        groups.push((g, alpha));
        weights.push((members, alpha));
    }
    Ok((groups, weights))
}
