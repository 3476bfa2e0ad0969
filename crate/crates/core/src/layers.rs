//! LSTM cell, sequence unrolling, dense and softmax classifier layers.
//!
//! Each layer has a value type holding its parameters and a `*Vars` twin
//! holding the corresponding tape handles. The value-level helpers
//! ([`lstm_step`], [`run_person_sequence`], [`ClassifierHead::classify`])
//! run the tape path on a scratch tape so there is a single implementation.

use serde::{Deserialize, Serialize};

use crate::params::{
    bind_matrix, bind_vector, join, visit_matrix, visit_matrix_mut, visit_vector,
    visit_vector_mut, Parameters,
};
use crate::tensor::{MathError, Matrix, Result, Shape, Tape, Var, Vector};

/// One LSTM gate: `W x + U h + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub input: Matrix,
    pub recurrent: Matrix,
    pub bias: Vector,
}

impl Gate {
    fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Gate {
            input: Matrix::zeros(hidden_dim, input_dim),
            recurrent: Matrix::zeros(hidden_dim, hidden_dim),
            bias: Vector::zeros(hidden_dim),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        visit_matrix(&self.input, prefix, "w", f);
        visit_matrix(&self.recurrent, prefix, "u", f);
        visit_vector(&self.bias, prefix, "b", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        visit_matrix_mut(&mut self.input, prefix, "w", f);
        visit_matrix_mut(&mut self.recurrent, prefix, "u", f);
        visit_vector_mut(&mut self.bias, prefix, "b", f);
    }

    fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<GateVars> {
        Ok(GateVars {
            input: bind_matrix(tape, prefix, "w", &self.input)?,
            recurrent: bind_matrix(tape, prefix, "u", &self.recurrent)?,
            bias: bind_vector(tape, prefix, "b", &self.bias)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub input: Var,
    pub recurrent: Var,
    pub bias: Var,
}

impl GateVars {
    fn pre_activation(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let wx = tape.matvec(self.input, x)?;
        let uh = tape.matvec(self.recurrent, h)?;
        let s = tape.add(wx, uh)?;
        tape.add(s, self.bias)
    }
}

/// Vanilla LSTM (input, forget and output gates, no peepholes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub output_gate: Gate,
    pub candidate: Gate,
}

impl LstmParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        LstmParams {
            input_gate: Gate::zeros(input_dim, hidden_dim),
            forget_gate: Gate::zeros(input_dim, hidden_dim),
            output_gate: Gate::zeros(input_dim, hidden_dim),
            candidate: Gate::zeros(input_dim, hidden_dim),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_gate.input.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.input_gate.input.rows()
    }

    fn gates(&self) -> [(&'static str, &Gate); 4] {
        [
            ("input_gate", &self.input_gate),
            ("forget_gate", &self.forget_gate),
            ("output_gate", &self.output_gate),
            ("candidate", &self.candidate),
        ]
    }

    /// Checks that every gate agrees on `hidden_dim` and `input_dim`.
    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden_dim(), self.input_dim());
        for (_, gate) in self.gates() {
            let expected = [Shape::matrix(h, d), Shape::matrix(h, h), Shape::vector(h)];
            let actual = [gate.input.shape(), gate.recurrent.shape(), gate.bias.shape()];
            for (e, a) in expected.into_iter().zip(actual) {
                if e != a {
                    return Err(MathError::ShapeMismatch {
                        op: "lstm",
                        left: e,
                        right: a,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<LstmVars> {
        Ok(LstmVars {
            input_gate: self.input_gate.bind(tape, &join(prefix, "input_gate"))?,
            forget_gate: self.forget_gate.bind(tape, &join(prefix, "forget_gate"))?,
            output_gate: self.output_gate.bind(tape, &join(prefix, "output_gate"))?,
            candidate: self.candidate.bind(tape, &join(prefix, "candidate"))?,
            input_dim: self.input_dim(),
            hidden_dim: self.hidden_dim(),
        })
    }
}

impl Parameters for LstmParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        for (name, gate) in self.gates() {
            gate.visit(&join(prefix, name), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        self.input_gate.visit_mut(&join(prefix, "input_gate"), f);
        self.forget_gate.visit_mut(&join(prefix, "forget_gate"), f);
        self.output_gate.visit_mut(&join(prefix, "output_gate"), f);
        self.candidate.visit_mut(&join(prefix, "candidate"), f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vector,
    pub c: Vector,
}

impl LstmState {
    pub fn zeros(hidden_dim: usize) -> Self {
        LstmState {
            h: Vector::zeros(hidden_dim),
            c: Vector::zeros(hidden_dim),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStateVars {
    pub h: Var,
    pub c: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub input_gate: GateVars,
    pub forget_gate: GateVars,
    pub output_gate: GateVars,
    pub candidate: GateVars,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmVars {
    pub fn zero_state(&self, tape: &mut Tape) -> LstmStateVars {
        let zeros = Vector::zeros(self.hidden_dim);
        LstmStateVars {
            h: tape.vector(&zeros),
            c: tape.vector(&zeros),
        }
    }

    pub fn step(&self, tape: &mut Tape, state: LstmStateVars, x: Var) -> Result<LstmStateVars> {
        let i = self.input_gate.pre_activation(tape, x, state.h)?;
        let i = tape.sigmoid(i);
        let f = self.forget_gate.pre_activation(tape, x, state.h)?;
        let f = tape.sigmoid(f);
        let o = self.output_gate.pre_activation(tape, x, state.h)?;
        let o = tape.sigmoid(o);
        let g = self.candidate.pre_activation(tape, x, state.h)?;
        let g = tape.tanh(g);

        let kept = tape.mul(f, state.c)?;
        let written = tape.mul(i, g)?;
        let c = tape.add(kept, written)?;
        let squashed = tape.tanh(c);
        let h = tape.mul(o, squashed)?;
        Ok(LstmStateVars { h, c })
    }

    /// Unrolls from the zero state; returns one state per input.
    pub fn run(&self, tape: &mut Tape, xs: &[Var]) -> Result<Vec<LstmStateVars>> {
        if xs.is_empty() {
            return Err(MathError::Empty {
                op: "run_person_sequence",
            });
        }
        let mut state = self.zero_state(tape);
        let mut out = Vec::with_capacity(xs.len());
        for &x in xs {
            state = self.step(tape, state, x)?;
            out.push(state);
        }
        Ok(out)
    }
}

fn read_state(tape: &Tape, s: LstmStateVars) -> LstmState {
    LstmState {
        h: Vector::new(tape.value(s.h).to_vec()).expect("finite lstm state"),
        c: Vector::new(tape.value(s.c).to_vec()).expect("finite lstm state"),
    }
}

pub fn lstm_step(params: &LstmParams, state: &LstmState, x: &Vector) -> Result<LstmState> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, "lstm")?;
    for v in [&state.h, &state.c] {
        if v.dim() != params.hidden_dim() {
            return Err(MathError::ShapeMismatch {
                op: "lstm_step",
                left: Shape::vector(params.hidden_dim()),
                right: v.shape(),
            });
        }
    }
    let s = LstmStateVars {
        h: tape.vector(&state.h),
        c: tape.vector(&state.c),
    };
    let x = tape.vector(x);
    let next = vars.step(&mut tape, s, x)?;
    Ok(read_state(&tape, next))
}

pub fn run_person_sequence(params: &LstmParams, xs: &[Vector]) -> Result<Vec<LstmState>> {
    params.validate()?;
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, "lstm")?;
    let inputs: Vec<Var> = xs.iter().map(|x| tape.vector(x)).collect();
    let states = vars.run(&mut tape, &inputs)?;
    Ok(states.into_iter().map(|s| read_state(&tape, s)).collect())
}

/// Fully connected layer followed by `tanh`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vector,
}

impl Dense {
    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output_dim, input_dim),
            bias: Vector::zeros(output_dim),
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<DenseVars> {
        Ok(DenseVars {
            weight: bind_matrix(tape, prefix, "w", &self.weight)?,
            bias: bind_vector(tape, prefix, "b", &self.bias)?,
        })
    }
}

impl Parameters for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        visit_matrix(&self.weight, prefix, "w", f);
        visit_vector(&self.bias, prefix, "b", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        visit_matrix_mut(&mut self.weight, prefix, "w", f);
        visit_vector_mut(&mut self.bias, prefix, "b", f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub weight: Var,
    pub bias: Var,
}

impl DenseVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let wx = tape.matvec(self.weight, x)?;
        let z = tape.add(wx, self.bias)?;
        Ok(tape.tanh(z))
    }
}

/// Softmax classification layer, `softmax(W z + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weight: Matrix,
    pub bias: Vector,
}

impl ClassifierHead {
    pub fn new(weight: Matrix, bias: Vector) -> Result<Self> {
        if weight.rows() != bias.dim() {
            return Err(MathError::ShapeMismatch {
                op: "classifier",
                left: weight.shape(),
                right: bias.shape(),
            });
        }
        if bias.dim() < 2 {
            return Err(MathError::TooFewClasses(bias.dim()));
        }
        Ok(ClassifierHead { weight, bias })
    }

    pub fn zeros(classes: usize, input_dim: usize) -> Result<Self> {
        if classes < 2 {
            return Err(MathError::TooFewClasses(classes));
        }
        Ok(ClassifierHead {
            weight: Matrix::zeros(classes, input_dim),
            bias: Vector::zeros(classes),
        })
    }

    pub fn classes(&self) -> usize {
        self.bias.dim()
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<HeadVars> {
        Ok(HeadVars {
            weight: bind_matrix(tape, prefix, "w", &self.weight)?,
            bias: bind_vector(tape, prefix, "b", &self.bias)?,
        })
    }

    pub fn classify(&self, z: &Vector) -> Result<Vector> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, "head")?;
        let z = tape.vector(z);
        let p = vars.classify(&mut tape, z)?;
        Vector::new(tape.value(p).to_vec())
    }
}

impl Parameters for ClassifierHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64])) {
        visit_matrix(&self.weight, prefix, "w", f);
        visit_vector(&self.bias, prefix, "b", f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64])) {
        visit_matrix_mut(&mut self.weight, prefix, "w", f);
        visit_vector_mut(&mut self.bias, prefix, "b", f);
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

impl HeadVars {
    pub fn logits(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let wz = tape.matvec(self.weight, z)?;
        tape.add(wz, self.bias)
    }

    pub fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let logits = self.logits(tape, z)?;
        tape.softmax(logits)
    }
}

/// `-ln p[label]` with the log floored at [`crate::tensor::LOG_FLOOR`].
pub fn cross_entropy(p: &Vector, label: usize) -> Result<f64> {
    if label >= p.dim() {
        return Err(MathError::LabelOutOfRange {
            label,
            classes: p.dim(),
        });
    }
    Ok(-p.as_slice()[label].max(crate::tensor::LOG_FLOOR).ln())
}
