//! Hand-written scalar reference model shared by integration tests.

use std::collections::BTreeMap;

use grouppool::data::Clip;
use grouppool::model::ModelConfig;
use grouppool::pooling::{PoolingScheme, SubgroupAssignment};
use grouppool::tensor::Vector;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn scalar_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 1,
        person_hidden: 1,
        group_hidden: 1,
        group_fc_dim: 1,
        attention_hidden: 1,
        action_classes: 2,
        activity_classes: 2,
        subgroups: 1,
        scheme: PoolingScheme::Gap,
        ..ModelConfig::default()
    }
}

/// Scalar LSTM step written out by hand: returns `(h, c)`.
fn lstm(p: &BTreeMap<String, Vec<f64>>, prefix: &str, x: f64, h: f64, c: f64) -> (f64, f64) {
    let gate = |g: &str| {
        let w = p[&format!("{prefix}.{g}.w")][0];
        let u = p[&format!("{prefix}.{g}.u")][0];
        let b = p[&format!("{prefix}.{g}.b")][0];
        w * x + u * h + b
    };
    let i = sigmoid(gate("input_gate"));
    let f = sigmoid(gate("forget_gate"));
    let o = sigmoid(gate("output_gate"));
    let g = gate("candidate").tanh();
    let c2 = f * c + i * g;
    (o * c2.tanh(), c2)
}

fn softmax2(a: f64, b: f64) -> [f64; 2] {
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}

/// Straight-line activity probabilities for two persons and GAP, with every
/// dimension equal to one.
pub fn oracle(p: &BTreeMap<String, Vec<f64>>, xs: [[f64; 2]; 2]) -> Vec<[f64; 2]> {
    let mut person = [(0.0, 0.0); 2];
    let mut group = (0.0, 0.0);
    let mut out = Vec::new();
    for t in 0..2 {
        let mut reps = [[0.0; 2]; 2];
        for i in 0..2 {
            let (h, c) = lstm(p, "person_lstm", xs[i][t], person[i].0, person[i].1);
            person[i] = (h, c);
            reps[i] = [h, xs[i][t]];
        }
        let w = &p["pooling.gap.w"];
        let (b, u) = (p["pooling.gap.b"][0], p["pooling.gap.u"][0]);
        let score = |r: [f64; 2]| u * (w[0] * r[0] + w[1] * r[1] + b).tanh();
        let alpha = softmax2(score(reps[0]), score(reps[1]));
        let pooled = [
            alpha[0] * reps[0][0] + alpha[1] * reps[1][0],
            alpha[0] * reps[0][1] + alpha[1] * reps[1][1],
        ];
        let fc = &p["group_fc.w"];
        let z = (fc[0] * pooled[0] + fc[1] * pooled[1] + p["group_fc.b"][0]).tanh();
        group = lstm(p, "group_lstm", z, group.0, group.1);
        let hw = &p["activity_head.w"];
        let hb = &p["activity_head.b"];
        out.push(softmax2(hw[0] * group.0 + hb[0], hw[1] * group.0 + hb[1]));
    }
    out
}

pub fn scalar_clip(xs: [[f64; 2]; 2]) -> Clip {
    Clip {
        id: 1,
        persons: xs
            .iter()
            .map(|track| track.iter().map(|&x| Vector::new(vec![x]).unwrap()).collect())
            .collect(),
        action_labels: vec![vec![0, 1], vec![1, 1]],
        activity_label: 1,
        subgroups: SubgroupAssignment::contiguous(2, 1).unwrap(),
    }
}
