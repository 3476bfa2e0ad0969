//! Named parameter traversal shared by checkpoints, the optimizer and the
//! gradient checker.

use std::collections::BTreeMap;

use crate::tensor::{Matrix, Result, Shape, Tape, Var, Vector};

/// Something that owns learnable tensors under stable dotted names.
///
/// `visit` and `visit_mut` must enumerate the same names in the same order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f64]));

    fn named_shapes(&self) -> Vec<(String, Shape)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, shape, _| out.push((name.to_string(), shape)));
        out
    }

    fn flatten(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |name, _, data| {
            out.insert(name.to_string(), data.to_vec());
        });
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, shape, _| n += shape.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn visit_matrix(
    m: &Matrix,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Shape, &[f64]),
) {
    f(&join(prefix, name), m.shape(), m.as_slice());
}

pub(crate) fn visit_matrix_mut(
    m: &mut Matrix,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Shape, &mut [f64]),
) {
    let shape = m.shape();
    f(&join(prefix, name), shape, m.as_mut_slice());
}

pub(crate) fn visit_vector(
    v: &Vector,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Shape, &[f64]),
) {
    f(&join(prefix, name), v.shape(), v.as_slice());
}

pub(crate) fn visit_vector_mut(
    v: &mut Vector,
    prefix: &str,
    name: &str,
    f: &mut dyn FnMut(&str, Shape, &mut [f64]),
) {
    let shape = v.shape();
    f(&join(prefix, name), shape, v.as_mut_slice());
}

pub(crate) fn bind_matrix(tape: &mut Tape, prefix: &str, name: &str, m: &Matrix) -> Result<Var> {
    tape.param(join(prefix, name), m.shape(), m.as_slice())
}

pub(crate) fn bind_vector(tape: &mut Tape, prefix: &str, name: &str, v: &Vector) -> Result<Var> {
    tape.param(join(prefix, name), v.shape(), v.as_slice())
}
