//! Acceptance harness. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Set `GROUPPOOL_ACCEPTANCE_QUICK=1` to skip the
//! training experiments.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use grouppool::cli::RunConfig;
use grouppool::data::{
    export_traces, generate, load_clips, load_traces, save_clips, Clip, ClipTraces, TraceRecord,
};
use grouppool::model::{group_forward, loss, predict, ModelConfig, ModelParams, Objective};
use grouppool::params::Parameters;
use grouppool::pooling::{
    gap, hap, subgroup_gap_concat, AttentionParams, HapParams, PoolingScheme, SubgroupAssignment,
};
use grouppool::tensor::{Matrix, Vector};
use grouppool::train::{
    self, checkpoint_from_str, checkpoint_to_string, gradcheck, gradcheck_config, random_clip,
    randomize, EvalReport, TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-10;
const INVARIANT_TOL: f64 = 1e-12;
const ANCHOR_TOL: f64 = 1e-9;
const INVARIANT_CASES: usize = 1000;
const EFFECT_MARGIN: f64 = 0.10;
const SUBGROUP_SLACK: f64 = 0.02;
const RUNTIME_LIMIT_S: f64 = 15.0 * 60.0;
const LOCALIZATION_RATIO: f64 = 2.0;
const LOCALIZATION_SHARE: f64 = 0.8;

#[derive(Default)]
struct Report {
    passed: usize,
    failed: usize,
}

impl Report {
    fn check(&mut self, name: &str, pass: bool, detail: impl std::fmt::Display) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if pass {
            self.passed += 1;
        } else {
            self.failed += 1;
        }
    }
}

fn preset_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn preset(scheme: PoolingScheme) -> RunConfig {
    let file = match scheme {
        PoolingScheme::Max => "b1-max.toml",
        PoolingScheme::Avg => "b2-avg.toml",
        PoolingScheme::Gap => "b3-gap.toml",
        PoolingScheme::Hap => "b4-hap.toml",
        PoolingScheme::SubgroupGap => "b5-subgroup-gap.toml",
    };
    let config = RunConfig::load(&preset_dir().join(file)).expect("preset loads");
    assert_eq!(config.model.scheme, scheme, "{file}");
    config
}

fn gradient_fidelity(report: &mut Report) {
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for scheme in PoolingScheme::ALL {
        let r = gradcheck(&gradcheck_config(scheme), 1).expect("gradcheck runs");
        detail.push(format!("{scheme} {:.1e}", r.max_rel_error()));
        worst = worst.max(r.max_rel_error());
    }
    report.check(
        "gradient fidelity",
        worst <= GRAD_TOL,
        format!("max relative error {worst:.2e} <= {GRAD_TOL:.0e} ({})", detail.join(", ")),
    );
}

fn oracle_equivalence(report: &mut Report) {
    let mut worst: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::zeros(&common::scalar_config()).unwrap();
        randomize(&mut params, 0.8, &mut rng);
        let xs = [
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
        ];
        let (probs, _) = group_forward(&params, &common::scalar_clip(xs)).unwrap();
        let expected = common::oracle(&params.flatten(), xs);
        for (got, want) in probs.iter().zip(&expected) {
            for k in 0..2 {
                worst = worst.max((got.as_slice()[k] - want[k]).abs());
            }
        }
    }
    report.check(
        "oracle equivalence",
        worst <= ORACLE_TOL,
        format!("GAP forward vs hand-written oracle, 50 instances, max |diff| {worst:.1e} <= {ORACLE_TOL:.0e}"),
    );
}

fn random_vector<R: Rng>(rng: &mut R, d: usize) -> Vector {
    Vector::new((0..d).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
}

fn random_attention<R: Rng>(rng: &mut R, d: usize, a: usize) -> AttentionParams {
    AttentionParams {
        weight: Matrix::new(a, d, (0..a * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap(),
        bias: random_vector(rng, a),
        context: random_vector(rng, a),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Returns the worst violation over all invariants for one random case.
fn invariant_case<R: Rng>(rng: &mut R) -> f64 {
    let d = rng.random_range(1..5);
    let n = rng.random_range(2..9);
    let hidden = rng.random_range(1..5);
    let att = random_attention(rng, d, hidden);
    let persons: Vec<Vector> = (0..n).map(|_| random_vector(rng, d)).collect();
    let mut worst: f64 = 0.0;

    let (g, alpha) = gap(&persons, &att).unwrap();
    worst = worst.max((alpha.iter().sum::<f64>() - 1.0).abs());
    worst = worst.max(alpha.iter().map(|a| (-a).max(0.0)).fold(0.0, f64::max));
    for k in 0..d {
        let column: Vec<f64> = persons.iter().map(|p| p.as_slice()[k]).collect();
        let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = g.as_slice()[k];
        worst = worst.max((lo - v).max(0.0)).max((v - hi).max(0.0));
    }

    // Permutation equivariance.
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let permuted: Vec<Vector> = order.iter().map(|&i| persons[i].clone()).collect();
    let (g2, alpha2) = gap(&permuted, &att).unwrap();
    worst = worst.max(max_diff(g.as_slice(), g2.as_slice()));
    let expected: Vec<f64> = order.iter().map(|&i| alpha[i]).collect();
    worst = worst.max(max_diff(&alpha2, &expected));

    // Identical persons get uniform weights.
    let same = vec![persons[0].clone(); n];
    let (_, uniform) = gap(&same, &att).unwrap();
    worst = worst.max(uniform.iter().map(|a| (a - 1.0 / n as f64).abs()).fold(0.0, f64::max));

    // HAP is invariant to reordering inside a subgroup.
    let ids: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let assignment = SubgroupAssignment::new(ids, 2).unwrap();
    let params = HapParams {
        person_level: vec![random_attention(rng, d, 3), random_attention(rng, d, 3)],
        subgroup_level: random_attention(rng, d, 3),
        shared_person_level: false,
    };
    let (h, _) = hap(&persons, &assignment, &params).unwrap();
    let mut shuffled = persons.clone();
    if n >= 3 {
        shuffled.swap(0, 2);
    }
    let (h2, _) = hap(&shuffled, &assignment, &params).unwrap();
    worst = worst.max(max_diff(h.as_slice(), h2.as_slice()));

    // SubgroupGAP with shared parameters swaps halves with the subgroups.
    let even = 2 * (n / 2);
    let half = even / 2;
    let contiguous = SubgroupAssignment::contiguous(even, 2).unwrap();
    let shared = vec![att.clone(), att.clone()];
    let (s, _) = subgroup_gap_concat(&persons[..even], &contiguous, &shared).unwrap();
    let mut swapped = persons[half..even].to_vec();
    swapped.extend_from_slice(&persons[..half]);
    let (s2, _) = subgroup_gap_concat(&swapped, &contiguous, &shared).unwrap();
    worst = worst.max(max_diff(&s.as_slice()[..d], &s2.as_slice()[d..]));
    worst = worst.max(max_diff(&s.as_slice()[d..], &s2.as_slice()[..d]));
    worst
}

fn attention_invariants(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let worst = (0..INVARIANT_CASES)
        .map(|_| invariant_case(&mut rng))
        .fold(0.0, f64::max);
    report.check(
        "attention invariant suite",
        worst <= INVARIANT_TOL,
        format!("{INVARIANT_CASES} random cases, max violation {worst:.1e} <= {INVARIANT_TOL:.0e}"),
    );
}

fn loss_anchor(report: &mut Report) {
    // Zero weights give uniform softmax outputs everywhere.
    let config = ModelConfig {
        action_classes: 9,
        activity_classes: 8,
        lambda: 2.0,
        ..gradcheck_config(PoolingScheme::Gap)
    };
    let params = ModelParams::zeros(&config).unwrap();
    let clip = random_clip(&config, 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
    let value = loss(&params, &clip, Objective::Joint).unwrap();
    let exact = 8f64.ln() + 2.0 * 9f64.ln();
    report.check(
        "analytic loss anchor",
        (value - exact).abs() <= ANCHOR_TOL,
        format!("uniform K_g=8, K_p=9, lambda=2: {value:.9} vs ln 8 + 2 ln 9 = {exact:.9}"),
    );
}

fn round_trip(report: &mut Report) {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut ok = true;
    for i in 0..100 {
        let config = gradcheck_config(PoolingScheme::ALL[i % 5]);
        let n = rng.random_range(1..6);
        let t = rng.random_range(1..5);
        let mut clip = random_clip(&config, n, t, &mut rng);
        clip.id = i as u64;
        let path = dir.path().join(format!("{i}.jsonl"));
        save_clips(&path, std::slice::from_ref(&clip)).unwrap();
        ok &= load_clips(&path).unwrap() == vec![clip];

        let mut params = ModelParams::zeros(&config).unwrap();
        randomize(&mut params, rng.random_range(0.01..5.0), &mut rng);
        ok &= checkpoint_from_str(&checkpoint_to_string(&params)).unwrap() == params;
    }
    report.check("round-trip", ok, "100 random clip files and checkpoints reload bit-identically");
}

fn metrics_text(model: &ModelConfig, config: &TrainConfig, data: &[Clip], threads: usize) -> String {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let out = train::train(model, config, data, Some(data), |_| {}).unwrap();
        out.records
            .iter()
            .map(|r| serde_json::to_string(r).unwrap() + "\n")
            .collect()
    })
}

fn determinism(report: &mut Report) {
    let model = ModelConfig {
        person_hidden: 8,
        attention_hidden: 8,
        ..ModelConfig::default()
    };
    let config = TrainConfig {
        epochs_stage1: 1,
        epochs_stage2: 2,
        ..TrainConfig::default()
    };
    let (data, _) = generate(&grouppool::data::GeneratorConfig {
        train_clips: 40,
        test_clips: 0,
        ..Default::default()
    })
    .unwrap();
    let a = metrics_text(&model, &config, &data, 1);
    let b = metrics_text(&model, &config, &data, 1);
    let c = metrics_text(&model, &config, &data, 4);
    report.check(
        "determinism",
        a == b && a == c && !a.is_empty(),
        format!("metrics stream identical across repeated runs and 1 vs 4 threads ({} bytes)", a.len()),
    );
}

fn loss_halving(report: &mut Report, train_set: &[Clip]) {
    let mut config = preset(PoolingScheme::Gap);
    config.train.epochs_stage1 = 0;
    config.train.epochs_stage2 = 30;
    config.train.eval_every = 0;
    let out = train::train(&config.model, &config.train, train_set, None, |_| {}).unwrap();
    let first = out.records.first().unwrap().loss;
    let last = out.records.last().unwrap().loss;
    report.check(
        "training loss halves",
        last <= 0.5 * first,
        format!("GAP joint loss epoch 1 {first:.4} -> epoch 30 {last:.4} (ratio {:.3} <= 0.5)", last / first),
    );
}

#[derive(Serialize)]
struct Baseline {
    scheme: String,
    test_group_accuracy: f64,
    test_person_accuracy: f64,
    seconds: f64,
    per_class_accuracy: Vec<Option<f64>>,
}

fn train_preset(scheme: PoolingScheme, train_set: &[Clip], test_set: &[Clip]) -> (ModelParams, EvalReport, f64) {
    let mut config = preset(scheme);
    config.train.eval_every = 0;
    let start = Instant::now();
    let out = train::train(&config.model, &config.train, train_set, None, |_| {}).unwrap();
    let report = train::evaluate(&out.params, test_set).unwrap();
    (out.params, report, start.elapsed().as_secs_f64())
}

fn localization(report: &mut Report, params: &ModelParams, test_set: &[Clip]) {
    let traces: Vec<ClipTraces> = test_set
        .iter()
        .map(|clip| {
            let p = predict(params, clip).unwrap();
            ClipTraces {
                clip_id: clip.id,
                traces: p.traces,
                pred: p.activity,
                truth: clip.activity_label,
            }
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traces.jsonl");
    export_traces(&path, PoolingScheme::Gap, &traces).unwrap();
    let records = load_traces(&path).unwrap();

    let mut by_clip: BTreeMap<u64, Vec<&TraceRecord>> = BTreeMap::new();
    for r in &records {
        by_clip.entry(r.clip_id).or_default().push(r);
    }
    let clips: BTreeMap<u64, &Clip> = test_set.iter().map(|c| (c.id, c)).collect();
    let (mut correct, mut localized) = (0usize, 0usize);
    for (id, steps) in &by_clip {
        if steps[0].pred != steps[0].truth {
            continue;
        }
        correct += 1;
        let keys = clips[id].key_agents();
        let n = steps[0].alphas.len();
        let (mut key_sum, mut other_sum) = (0.0, 0.0);
        for s in steps {
            for (i, a) in s.alphas.iter().enumerate() {
                if keys.contains(&i) {
                    key_sum += a;
                } else {
                    other_sum += a;
                }
            }
        }
        let key_mean = key_sum / (keys.len() * steps.len()) as f64;
        let other_mean = other_sum / ((n - keys.len()) * steps.len()) as f64;
        if key_mean > LOCALIZATION_RATIO * other_mean {
            localized += 1;
        }
    }
    let share = localized as f64 / correct.max(1) as f64;
    report.check(
        "attention localization",
        correct > 0 && share >= LOCALIZATION_SHARE,
        format!(
            "key/distractor mean weight > {LOCALIZATION_RATIO} in {localized}/{correct} correct test clips ({:.1}% >= {:.0}%)",
            100.0 * share,
            100.0 * LOCALIZATION_SHARE
        ),
    );
}

fn experiments(report: &mut Report) {
    let generator = preset(PoolingScheme::Gap).generator;
    for scheme in PoolingScheme::ALL {
        assert_eq!(preset(scheme).generator, generator, "presets share one dataset");
    }
    let (train_set, test_set) = generate(&generator).unwrap();
    loss_halving(report, &train_set);

    let mut accuracy = BTreeMap::new();
    let mut baselines = Vec::new();
    let mut total = 0.0;
    let mut gap_params = None;
    for scheme in [PoolingScheme::Max, PoolingScheme::Avg, PoolingScheme::Gap, PoolingScheme::SubgroupGap] {
        let (params, eval, seconds) = train_preset(scheme, &train_set, &test_set);
        println!("     {scheme}: test group accuracy {:.3} in {seconds:.0}s", eval.group_accuracy);
        total += seconds;
        accuracy.insert(scheme, eval.group_accuracy);
        baselines.push(Baseline {
            scheme: scheme.to_string(),
            test_group_accuracy: eval.group_accuracy,
            test_person_accuracy: eval.person_accuracy,
            seconds,
            per_class_accuracy: eval.per_class_accuracy.clone(),
        });
        if scheme == PoolingScheme::Gap {
            gap_params = Some(params);
        }
    }
    let out_dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&out_dir).unwrap();
    let baseline_path = out_dir.join("baseline.json");
    std::fs::write(&baseline_path, serde_json::to_string_pretty(&baselines).unwrap()).unwrap();

    let (max, avg) = (accuracy[&PoolingScheme::Max], accuracy[&PoolingScheme::Avg]);
    let (gap_acc, sub) = (accuracy[&PoolingScheme::Gap], accuracy[&PoolingScheme::SubgroupGap]);
    report.check(
        "direction of effect: GAP beats max and avg",
        gap_acc >= max + EFFECT_MARGIN && gap_acc >= avg + EFFECT_MARGIN,
        format!(
            "GAP {:.1}% vs max {:.1}% / avg {:.1}% (margin >= {:.0} points; baselines in {})",
            100.0 * gap_acc,
            100.0 * max,
            100.0 * avg,
            100.0 * EFFECT_MARGIN,
            baseline_path.display()
        ),
    );
    report.check(
        "direction of effect: SubgroupGAP within 2 points of GAP",
        sub >= gap_acc - SUBGROUP_SLACK,
        format!("SubgroupGAP {:.1}% vs GAP {:.1}%", 100.0 * sub, 100.0 * gap_acc),
    );
    report.check(
        "experiment runtime",
        total < RUNTIME_LIMIT_S,
        format!("four presets trained in {total:.0}s < {RUNTIME_LIMIT_S:.0}s"),
    );
    localization(report, gap_params.as_ref().unwrap(), &test_set);
}

fn main() {
    let mut report = Report::default();
    gradient_fidelity(&mut report);
    oracle_equivalence(&mut report);
    attention_invariants(&mut report);
    loss_anchor(&mut report);
    round_trip(&mut report);
    determinism(&mut report);
    if std::env::var_os("GROUPPOOL_ACCEPTANCE_QUICK").is_some() {
        println!("SKIP training experiments (GROUPPOOL_ACCEPTANCE_QUICK set)");
    } else {
        experiments(&mut report);
    }
    println!("acceptance: {} passed, {} failed", report.passed, report.failed);
    if report.failed > 0 {
        std::process::exit(1);
    }
}
