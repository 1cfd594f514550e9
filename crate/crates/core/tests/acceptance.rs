//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs as a plain binary so the lines are always visible.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::{dense_conv, overfit_run};
use cutie_core::data::synth::{synth_generate, SynthSpec};
use cutie_core::data::{split_dataset_by_type, ClassSet};
use cutie_core::gridder::{read_back, AugmentParams, GridShape};
use cutie_core::metrics::{evaluate, oracle_eval, DocPrediction, EvalReport};
use cutie_core::model::gradcheck::{check_model, tiny_config};
use cutie_core::model::{Checkpoint, CutieConfig, CutieModel};
use cutie_core::nn::conv2d;
use cutie_core::nn::gradcheck::{
    check_conv2d, check_dropout, check_embedding, check_global_pool, check_instance_norm, check_masked_xent,
    random_tensor, DEFAULT_STEP,
};
use cutie_core::nn::layers::IdGrid;
use cutie_core::tokenizer::build_vocab_min_count;
use cutie_core::trainer::{argmax_classes, lr_at, predict_all, prepare, Example, TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARAM_TOLERANCE: f64 = 0.05;
const ATROUS_TOLERANCE: f64 = 1e-12;
const GRAD_TOLERANCE: f64 = 1e-4;
const OVERFIT_MAX_STEPS: u64 = 2000;
const DESK_AP: f64 = 0.90;
const DESK_SOFT_AP: f64 = 0.95;
const DESK_STEPS: u64 = 1000;
const DESK_GRID: usize = 32;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn param_count_anchor() -> Outcome {
    let count = |e| {
        let config = CutieConfig {
            embedding_dim: e,
            ..CutieConfig::default()
        };
        CutieModel::<f32>::build(config, 0).unwrap().param_count()
    };
    let sizes = [1, 128, 256, 512];
    let reported = [10.6e6, 13.6e6, 16.6e6, 22.7e6];
    let counts: Vec<usize> = sizes.iter().map(|&e| count(e)).collect();
    let within = counts
        .iter()
        .zip(reported)
        .all(|(&c, r)| (c as f64 - r).abs() / r <= PARAM_TOLERANCE);
    let d_hi = counts[3] - counts[2];
    let d_lo = counts[2] - counts[1];
    outcome(
        within && d_hi == 6_103_040 && d_lo == 3_051_520,
        format!("counts {counts:?}; deltas 256->512 {d_hi}, 128->256 {d_lo}"),
    )
}

fn atrous_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let x = random_tensor(&[n, c, h, w], &mut rng);
        let k = random_tensor(&[o, c, 3, 5], &mut rng);
        let b = random_tensor(&[o], &mut rng);
        let diff = conv2d(&x, &k, &b, 1).unwrap().max_abs_diff(&dense_conv(&x, &k, &b)).unwrap();
        worst = worst.max(diff);
    }
    outcome(worst <= ATROUS_TOLERANCE, format!("max |diff| {worst:.2e} over 50 shapes"))
}

fn gradient_suite() -> Outcome {
    let mut checks: Vec<(String, f64)> = Vec::new();
    for rate in [1usize, 2, 4, 8, 16] {
        let side = (2 * rate + 3).min(40);
        let e = check_conv2d([1, 2, side, 2 * side], 2, (3, 5), rate, rate as u64, DEFAULT_STEP).unwrap();
        checks.push((format!("conv r={rate}"), e));
    }
    checks.push(("instance norm".into(), check_instance_norm([2, 3, 5, 6], 3, DEFAULT_STEP).unwrap()));
    checks.push(("embedding".into(), check_embedding(11, 4, (5, 6), 4, DEFAULT_STEP).unwrap()));
    checks.push(("dropout off".into(), check_dropout([2, 3, 4, 5], 0.9, false, 5, DEFAULT_STEP).unwrap()));
    checks.push(("global pool".into(), check_global_pool([2, 3, 4, 5], 6, DEFAULT_STEP).unwrap()));
    checks.push(("masked xent".into(), check_masked_xent([2, 5, 4, 6], 7, DEFAULT_STEP).unwrap()));
    checks.push(("model 1x8x8".into(), check_model(tiny_config(), (8, 8), 11, DEFAULT_STEP).unwrap()));
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    let detail = checks
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(worst < GRAD_TOLERANCE, detail)
}

fn schedule_table() -> Outcome {
    let c = TrainConfig::default();
    let steps = [0, 14_999, 15_000, 29_999, 30_000, 39_999];
    let want = [1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5];
    let got: Vec<f64> = steps.iter().map(|&s| lr_at(s, &c)).collect();
    outcome(got == want, format!("{got:?}"))
}

fn random_instance(rng: &mut ChaCha8Rng, classes: usize) -> Vec<DocPrediction> {
    let docs = rng.random_range(1..6);
    (0..docs)
        .map(|d| {
            let n = 5;
            let draw = |rng: &mut ChaCha8Rng| -> usize {
                if rng.random_bool(0.5) {
                    0
                } else {
                    rng.random_range(1..classes)
                }
            };
            let truth: Vec<usize> = (0..n).map(|_| draw(rng)).collect();
            let predicted = truth
                .iter()
                .map(|&t| if rng.random_bool(0.3) { draw(rng) } else { t })
                .collect();
            let keys = (0..n).map(|i| (i / 2, i % 2)).collect();
            DocPrediction::new(format!("d{d}"), keys, truth, predicted).unwrap()
        })
        .collect()
}

fn soft_dominates(r: &EvalReport) -> bool {
    r.classes.iter().all(|c| match (c.ap, c.soft_ap) {
        (Some(a), Some(s)) => s >= a,
        (None, None) => true,
        _ => false,
    })
}

fn metric_oracle() -> Outcome {
    let classes = ClassSet::new(["DontCare", "A", "B", "C"].map(String::from).to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut instances: Vec<Vec<DocPrediction>> = (0..100).map(|_| random_instance(&mut rng, 4)).collect();
    let doc = |truth: Vec<usize>, pred: Vec<usize>| {
        let keys = (0..truth.len()).map(|i| (i, 0)).collect();
        DocPrediction::new("edge", keys, truth, pred).unwrap()
    };
    // A class predicted but absent from the ground truth, and a class with no
    // ground truth anywhere.
    instances.push(vec![doc(vec![0, 1, 0, 0, 0], vec![0, 1, 2, 0, 0])]);
    instances.push(vec![doc(vec![0, 1, 1, 0, 0], vec![0, 1, 1, 0, 0])]);
    let mut agree = 0;
    let mut dominated = 0;
    for inst in &instances {
        let fast = evaluate(inst, &classes).unwrap();
        if fast == oracle_eval(inst, &classes).unwrap() {
            agree += 1;
        }
        if soft_dominates(&fast) {
            dominated += 1;
        }
    }
    let n = instances.len();
    outcome(
        agree == n && dominated == n,
        format!("{agree}/{n} equal to oracle, softAP >= AP in {dominated}/{n}"),
    )
}

fn overfit_and_determinism() -> (Outcome, Outcome) {
    let start = Instant::now();
    let a = overfit_run(1, OVERFIT_MAX_STEPS);
    let secs = start.elapsed().as_secs_f64();
    let c6 = outcome(
        a.accuracy == 1.0 && a.finite && a.steps <= OVERFIT_MAX_STEPS && secs < 300.0,
        format!(
            "accuracy {:.4} after {} steps, loss {:.4}, {secs:.0}s",
            a.accuracy, a.steps, a.loss
        ),
    );
    let b = overfit_run(1, OVERFIT_MAX_STEPS);
    let bytes = |ck: &Checkpoint<f32>| {
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        buf
    };
    let (ba, bb) = (bytes(&a.checkpoint), bytes(&b.checkpoint));
    let c9 = outcome(
        ba == bb,
        format!("{} vs {} bytes, identical: {}", ba.len(), bb.len(), ba == bb),
    );
    (c6, c9)
}

struct Desk {
    train: Vec<Example>,
    test: Vec<Example>,
    jittered: Vec<Example>,
    vocab_size: usize,
}

fn desk_data() -> Desk {
    let docs = synth_generate(&SynthSpec::new(800, 42)).unwrap();
    let (train, test) = split_dataset_by_type(&docs, 0.75, 42).unwrap();
    let classes = ClassSet::receipts();
    let vocab = build_vocab_min_count(&train, 20_000, 3).unwrap();
    let mut spec = SynthSpec::new(200, 4242);
    spec.jitter = 6.0;
    spec.line_spacing = (0.8, 2.0);
    let jittered = synth_generate(&spec).unwrap();
    Desk {
        train: prepare(&train, &vocab, &classes),
        test: prepare(&test, &vocab, &classes),
        jittered: prepare(&jittered, &vocab, &classes),
        vocab_size: vocab.len(),
    }
}

fn desk_train(desk: &Desk, augment: bool) -> (CutieModel<f32>, f64) {
    let config = CutieConfig {
        vocab_size: desk.vocab_size,
        embedding_dim: 32,
        trunk_channels: 32,
        shortcut_channels: 32,
        ..CutieConfig::default()
    };
    let train = TrainConfig {
        max_steps: DESK_STEPS,
        batch_size: 8,
        augment,
        grid: AugmentParams {
            mean_rows: DESK_GRID,
            mean_cols: DESK_GRID,
            sigma: 4.0,
            min: 24,
            max: 48,
        },
        seed: 7,
        checkpoint_interval: 0,
        log_interval: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let mut t = Trainer::new(Checkpoint::new(CutieModel::build(config, 7).unwrap()), train).unwrap();
    t.run(&desk.train, &mut ()).unwrap();
    (t.checkpoint.model, start.elapsed().as_secs_f64())
}

fn score(model: &CutieModel<f32>, data: &[Example]) -> EvalReport {
    let shape = GridShape::new(DESK_GRID, DESK_GRID).unwrap();
    evaluate(&predict_all(model, data, shape).unwrap(), &ClassSet::receipts()).unwrap()
}

fn desk_scale(model: &CutieModel<f32>, secs: f64, desk: &Desk) -> Outcome {
    let r = score(model, &desk.test);
    let (ap, soft) = (r.mean_ap.unwrap_or(0.0), r.mean_soft_ap.unwrap_or(0.0));
    outcome(
        desk.train.len() == 600
            && desk.test.len() == 200
            && ap >= DESK_AP
            && soft >= DESK_SOFT_AP
            && soft_dominates(&r)
            && secs < 7200.0,
        format!(
            "{}/{} docs, AP {ap:.4}, softAP {soft:.4}, softAP >= AP per class: {}, {secs:.0}s",
            desk.train.len(),
            desk.test.len(),
            soft_dominates(&r)
        ),
    )
}

fn augmentation_sanity(with: &CutieModel<f32>, desk: &Desk) -> Outcome {
    let (without, _) = desk_train(desk, false);
    let a = score(with, &desk.jittered).mean_ap.unwrap_or(0.0);
    let b = score(&without, &desk.jittered).mean_ap.unwrap_or(0.0);
    outcome(a >= b, format!("jittered AP with augmentation {a:.4}, without {b:.4}"))
}

fn shape_agnostic(model: &CutieModel<f32>, desk: &Desk) -> Outcome {
    let k = model.config.num_classes;
    let mut ok = true;
    let mut notes = Vec::new();
    for (rows, cols) in [(48, 80), (96, 96)] {
        let shape = GridShape::new(rows, cols).unwrap();
        let mut labeled = 0;
        let mut pieces = 0;
        for example in desk.test.iter().take(20) {
            let grid = example.grid(shape).unwrap();
            let ids = IdGrid::new(1, grid.shape.rows, grid.shape.cols, grid.ids.clone()).unwrap();
            let logits = model.infer(&ids).unwrap();
            ok &= logits.shape() == [1, k, grid.shape.rows, grid.shape.cols];
            ok &= logits.data().iter().all(|v| v.is_finite());
            let classes = argmax_classes(&logits).unwrap();
            let back = read_back(&grid, &classes, grid.shape).unwrap();
            labeled += back.len();
            pieces += example.pieces.len();
        }
        ok &= labeled == pieces;
        notes.push(format!("{rows}x{cols}: {labeled}/{pieces} pieces labeled"));
    }
    outcome(ok, notes.join(", "))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    report(1, "parameter-count anchor", param_count_anchor());
    report(2, "atrous r=1 equals dense convolution", atrous_equivalence());
    report(3, "gradient suite", gradient_suite());
    report(4, "learning-rate schedule table", schedule_table());
    report(5, "metric oracle", metric_oracle());
    let (c6, c9) = overfit_and_determinism();
    report(6, "overfit smoke test", c6);

    let desk = desk_data();
    let (model, secs) = desk_train(&desk, true);
    report(7, "desk-scale end-to-end", desk_scale(&model, secs, &desk));
    report(8, "augmentation sanity", augmentation_sanity(&model, &desk));
    report(9, "determinism", c9);
    report(10, "shape-agnostic inference", shape_agnostic(&model, &desk));

    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
