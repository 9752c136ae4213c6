//! Acceptance suite. Prints one line per criterion and exits non-zero if
//! any criterion fails.
//!
//! Real CIFAR-10 is read from `$CIFAR10_DIR` (the directory holding
//! `data_batch_1.bin` … `test_batch.bin`). Without it the real-data
//! criteria report SKIP and the data-format criteria run on synthetic
//! files. The full 20-epoch run additionally needs `ASU_CNN_FULL=1`.

mod common;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use asu_cnn::activations::{asu, asu_prime, ActivationKind};
use asu_cnn::artifacts::{encode_pgm, export_feature_maps, read_pgm, Checkpoint};
use asu_cnn::data::{
    decode_record, encode_record, load_dataset, Dataset, Split, Subset, NUM_CLASSES, TEST_FILE,
    TRAIN_FILES,
};
use asu_cnn::gradcheck::{check_model, Fault};
use asu_cnn::layers::{conv_output_shape, ConvSpec, PoolSpec};
use asu_cnn::model::{build_model, Architecture};
use asu_cnn::optim::{AdamState, LrSchedule};
use asu_cnn::train::{evaluate, fit_with_data, sparse_cce_with_softmax, train_epoch, TrainConfig};
use asu_cnn::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and budgets.
const ZERO_TOL: f64 = 1e-4;
const DERIV_REL_TOL: f64 = 1e-6;
const LOSS_TOL: f64 = 1e-9;
const GRAD_SUM_TOL: f64 = 1e-6;
const FIRST_STEP_REL_TOL: f64 = 1e-5;
const LR_END_REL_TOL: f64 = 0.01;
const DESK_MIN_TEST_ACC: f64 = 0.35;
const FULL_TRAIN_ACC: (f64, f64) = (0.9015, 0.05);
const FULL_TEST_ACC: (f64, f64) = (0.7015, 0.05);

enum Status {
    Pass,
    Fail,
    Skip,
}

type Criterion<'a> = (&'static str, Duration, Box<dyn FnOnce() -> Outcome + 'a>);

struct Outcome {
    status: Status,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Pass,
        detail: detail.into(),
    }
}

fn fail(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Fail,
        detail: detail.into(),
    }
}

fn skip(detail: impl Into<String>) -> Outcome {
    Outcome {
        status: Status::Skip,
        detail: detail.into(),
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        pass(detail)
    } else {
        fail(detail)
    }
}

fn cifar_dir() -> Option<PathBuf> {
    let root = PathBuf::from(std::env::var_os("CIFAR10_DIR")?);
    [root.clone(), root.join("cifar-10-batches-bin")]
        .into_iter()
        .find(|d| d.join(TRAIN_FILES[0]).is_file() && d.join(TEST_FILE).is_file())
}

fn c1_activations() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let points: Vec<f64> = (0..1000).map(|_| rng.gen_range(-10.0..10.0)).collect();
    let even = points.iter().all(|&z| asu(z) == asu(-z));
    let odd = points.iter().all(|&z| asu_prime(z) == -asu_prime(-z));
    let bound = points.iter().all(|&z| asu(z).abs() <= z.abs());
    let zeros = (-20..=20)
        .map(|k| asu(k as f64 * PI).abs())
        .fold(0.0, f64::max);
    let h = 1e-6;
    let worst = points
        .iter()
        .map(|&z| {
            let numeric = (asu(z + h) - asu(z - h)) / (2.0 * h);
            (asu_prime(z) - numeric).abs() / asu_prime(z).abs().max(1.0)
        })
        .fold(0.0, f64::max);
    check(
        even && odd && bound && zeros < ZERO_TOL && worst < DERIV_REL_TOL,
        format!(
            "even={even} odd'={odd} |asu|<=|z|={bound} max|asu(kπ)|={zeros:.1e} (tol {ZERO_TOL:.0e}) \
             max derivative rel err={worst:.1e} (tol {DERIV_REL_TOL:.0e}) on 1000 points"
        ),
    )
}

fn c2_shapes() -> Outcome {
    let arch = Architecture::default();
    let expected: Vec<Vec<usize>> = vec![
        vec![30, 30, 32],
        vec![15, 15, 32],
        vec![13, 13, 64],
        vec![6, 6, 64],
        vec![4, 4, 64],
        vec![1024],
        vec![64],
        vec![10],
    ];
    let stages = match arch.stage_shapes() {
        Ok(s) => s,
        Err(e) => return fail(e.to_string()),
    };
    let cascade = stages.cascade();
    // recompute each stage from the conv and pool arithmetic alone
    let pool = PoolSpec::TWO_BY_TWO;
    let (mut side, mut c_in, mut derived) = (arch.input_size, arch.input_channels, Vec::new());
    for (k, &n_f) in arch.conv_filters.iter().enumerate() {
        let (h, w, c) =
            conv_output_shape(&ConvSpec::valid(side, arch.filter_size, c_in, n_f)).unwrap();
        derived.push(vec![h, w, c]);
        side = h;
        if k < 2 {
            side = pool.output_size(side).unwrap();
            derived.push(vec![side, side, c]);
        }
        c_in = n_f;
    }
    derived.extend([
        vec![side * side * c_in],
        vec![arch.hidden],
        vec![arch.classes],
    ]);
    let params = arch.num_parameters().unwrap_or(0);
    check(
        cascade == expected && derived == expected,
        format!("cascade {cascade:?}; {params} parameters"),
    )
}

fn c3_gradients() -> Outcome {
    let arch = Architecture::tiny(ActivationKind::Asu);
    let seeds = [1, 2, 3];
    let report = match check_model(&arch, &seeds, None) {
        Ok(r) => r,
        Err(e) => return fail(e.to_string()),
    };
    let mut caught = Vec::new();
    let mut missed = Vec::new();
    for fault in Fault::ALL {
        match check_model(&arch, &seeds, Some(fault)) {
            Ok(r) if !r.pass() => {
                caught.push(format!("{fault}->{}", r.failing_layer().unwrap_or("?")))
            }
            _ => missed.push(fault.to_string()),
        }
    }
    check(
        report.pass() && missed.is_empty(),
        format!(
            "clean max_rel={:.2e} on seeds {seeds:?}; faults caught {}/5 [{}]{}",
            report.max_rel(),
            caught.len(),
            caught.join(", "),
            if missed.is_empty() {
                String::new()
            } else {
                format!("; MISSED {missed:?}")
            }
        ),
    )
}

fn c4_loss_and_adam() -> Outcome {
    let (loss, _) = sparse_cce_with_softmax(&[0.0f64; 10], 3).unwrap();
    let loss_err = (loss - 10f64.ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    for _ in 0..100 {
        let logits: Vec<f64> = (0..10).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let (_, g) = sparse_cce_with_softmax(&logits, rng.gen_range(0..10)).unwrap();
        worst_sum = worst_sum.max(g.iter().sum::<f64>().abs());
    }

    let lr = 1e-3;
    let theta = Tensor::from_vec(&[4], vec![0.5f64, -1.0, 2.0, 0.0]).unwrap();
    let mut p = theta.clone();
    let mut state = AdamState::new([&p]);
    let zero = Tensor::from_vec(&[4], vec![0.0; 4]).unwrap();
    for _ in 0..5 {
        state
            .step(&mut [&mut p], std::slice::from_ref(&zero), lr)
            .unwrap();
    }
    let fixpoint = p == theta;

    let grads = Tensor::from_vec(&[4], vec![0.3, -2.0, 1e-2, 7.0]).unwrap();
    let mut q = theta.clone();
    let mut state = AdamState::new([&q]);
    state
        .step(&mut [&mut q], std::slice::from_ref(&grads), lr)
        .unwrap();
    let step_err = q
        .data()
        .iter()
        .zip(theta.data())
        .map(|(a, b)| ((a - b).abs() - lr).abs() / lr)
        .fold(0.0, f64::max);

    check(
        loss_err < LOSS_TOL
            && worst_sum < GRAD_SUM_TOL
            && fixpoint
            && step_err < FIRST_STEP_REL_TOL,
        format!(
            "|loss-ln10|={loss_err:.1e} max|Σgrad|={worst_sum:.1e} zero-grad fixpoint={fixpoint} \
             first-step |Δ|/lr rel err={step_err:.1e}"
        ),
    )
}

fn c5_schedule() -> Outcome {
    let s = LrSchedule::default();
    let (first, last) = (s.lr_at_epoch(0), s.lr_at_epoch(19));
    let rel = (last - 1.496e-4).abs() / 1.496e-4;
    check(
        first == 1e-3 && rel < LR_END_REL_TOL,
        format!(
            "lr(0)={first:e} lr(19)={last:.4e} ({:.2}% from 1.496e-4)",
            rel * 100.0
        ),
    )
}

fn split_counts(dir: &Path) -> asu_cnn::Result<(usize, usize, [usize; NUM_CLASSES])> {
    let (train, test) = load_dataset(dir, Subset::default(), 0)?;
    let mut per_class = train.class_counts();
    for (c, n) in per_class.iter_mut().zip(test.class_counts()) {
        *c += n;
    }
    Ok((train.len(), test.len(), per_class))
}

fn c6_data(synthetic: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let round_trip = (0..200).all(|i| {
        let rec = common::synthetic_record((i % 10) as u8, &mut rng);
        encode_record(&decode_record(&rec), rec[0])
            .map(|r| r == rec)
            .unwrap_or(false)
    });
    let layout_ok = |counts: &(usize, usize, [usize; NUM_CLASSES])| {
        counts.0 == 50_000 && counts.1 == 10_000 && counts.2.iter().all(|&c| c == 6_000)
    };
    let synth = match split_counts(synthetic) {
        Ok(c) => c,
        Err(e) => return fail(format!("synthetic load: {e}")),
    };
    let mut detail = format!(
        "200 record round trips bit-exact={round_trip}; synthetic files {}/{} examples, per class {:?}",
        synth.0, synth.1, synth.2
    );
    let mut ok = round_trip && layout_ok(&synth);
    match cifar_dir() {
        Some(dir) => match split_counts(&dir) {
            Ok(real) => {
                detail += &format!(
                    "; CIFAR-10 {}/{} examples, per class {:?}",
                    real.0, real.1, real.2
                );
                ok &= layout_ok(&real);
            }
            Err(e) => {
                detail += &format!("; CIFAR-10 load failed: {e}");
                ok = false;
            }
        },
        None => detail += "; real CIFAR-10 load not run (CIFAR10_DIR unset)",
    }
    check(ok, detail)
}

/// 64 examples: a real subset when available, otherwise uniform-noise
/// images (no shared structure, so they must be memorized one by one).
fn overfit_set() -> (Dataset, &'static str) {
    if let Some(dir) = cifar_dir() {
        if let Ok(train) = asu_cnn::data::load_split(&dir, Split::Train, Some(64), 7) {
            return (train, "CIFAR-10");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..64 {
        let mut rec = vec![(i % 10) as u8];
        rec.extend((0..3072).map(|_| rng.gen::<u8>()));
        images.push(decode_record(&rec));
        labels.push(rec[0]);
    }
    (
        Dataset::new(images, labels, Split::Train).unwrap(),
        "uniform-noise synthetic",
    )
}

fn c7_overfit() -> Outcome {
    let (data, source) = overfit_set();
    let config = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    let schedule = config.schedule().unwrap();
    let mut params = build_model::<f32>(config.architecture(), config.seed).unwrap();
    let mut state = AdamState::new(params.tensors());
    for epoch in 0..200 {
        let lr = schedule.lr_at_epoch(epoch);
        if let Err(e) = train_epoch(
            &mut params,
            &mut state,
            &data,
            16,
            lr,
            config.epoch_seed(epoch),
        ) {
            return fail(e.to_string());
        }
        let (loss, acc) = evaluate(&params, &data).unwrap();
        if acc == 1.0 {
            return pass(format!(
                "{source}, 64 examples, batch 16: train accuracy 1.0 after {} epochs (loss {loss:.4})",
                epoch + 1
            ));
        }
    }
    let (_, acc) = evaluate(&params, &data).unwrap();
    fail(format!(
        "{source}: train accuracy {acc:.4} after 200 epochs"
    ))
}

fn c8_desk(dir: Option<&Path>) -> Outcome {
    let Some(dir) = dir else {
        return skip("needs real CIFAR-10 (set CIFAR10_DIR)");
    };
    let config = TrainConfig {
        epochs: 10,
        train_subset: Some(5_000),
        test_subset: Some(1_000),
        ..TrainConfig::default()
    };
    let (train, test) = match load_dataset(dir, config.subset(), config.seed) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let outcome = match fit_with_data(&config, &train, &test, |_| {}) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    let m = &outcome.metrics;
    let test_acc = m.last().unwrap().val_acc;
    check(
        test_acc >= DESK_MIN_TEST_ACC && m[4].train_loss < m[0].train_loss,
        format!(
            "test accuracy {test_acc:.4} (min {DESK_MIN_TEST_ACC}); train loss epoch 1 {:.4} -> epoch 5 {:.4}",
            m[0].train_loss, m[4].train_loss
        ),
    )
}

fn c9_full(dir: Option<&Path>) -> Outcome {
    let Some(dir) = dir else {
        return skip("needs real CIFAR-10 (set CIFAR10_DIR) and ASU_CNN_FULL=1");
    };
    if std::env::var_os("ASU_CNN_FULL").is_none() {
        return skip("full 20-epoch run takes hours on CPU; set ASU_CNN_FULL=1");
    }
    let config = TrainConfig::default();
    let (train, test) = match load_dataset(dir, config.subset(), config.seed) {
        Ok(d) => d,
        Err(e) => return fail(e.to_string()),
    };
    let outcome = match fit_with_data(&config, &train, &test, |m| {
        eprintln!(
            "  epoch {} train_acc {:.4} val_acc {:.4}",
            m.epoch, m.train_acc, m.val_acc
        )
    }) {
        Ok(o) => o,
        Err(e) => return fail(e.to_string()),
    };
    let last = outcome.metrics.last().unwrap();
    let within = |v: f64, (target, tol): (f64, f64)| (v - target).abs() <= tol;
    check(
        within(last.train_acc, FULL_TRAIN_ACC) && within(last.val_acc, FULL_TEST_ACC),
        format!(
            "train accuracy {:.4} (target {}±{}), test accuracy {:.4} (target {}±{})",
            last.train_acc,
            FULL_TRAIN_ACC.0,
            FULL_TRAIN_ACC.1,
            last.val_acc,
            FULL_TEST_ACC.0,
            FULL_TEST_ACC.1
        ),
    )
}

fn c10_determinism(data: &Path, synthetic: bool, work: &Path) -> Outcome {
    let (subset, test_subset, epochs) = if synthetic {
        ("512", "256", "2")
    } else {
        ("5000", "1000", "10")
    };
    let run = |tag: &str| -> Result<(Vec<u8>, String), String> {
        let ckpt = work.join(format!("{tag}.ckpt"));
        let csv = work.join(format!("{tag}.csv"));
        let out = Command::new(env!("CARGO_BIN_EXE_asu-cnn"))
            .args(["train", "--data"])
            .arg(data)
            .args([
                "--epochs",
                epochs,
                "--subset",
                subset,
                "--test-subset",
                test_subset,
                "--seed",
                "11",
            ])
            .arg("--no-timing")
            .arg("--checkpoint")
            .arg(&ckpt)
            .arg("--metrics")
            .arg(&csv)
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        Ok((
            std::fs::read(&ckpt).unwrap(),
            std::fs::read_to_string(&csv).unwrap(),
        ))
    };
    let (a, b) = match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return fail(e),
    };
    check(
        a.0 == b.0 && a.1 == b.1,
        format!(
            "{} data, {epochs} epochs on {subset} examples: checkpoints identical={} ({} bytes), CSVs identical={}",
            if synthetic { "synthetic" } else { "CIFAR-10" },
            a.0 == b.0,
            a.0.len(),
            a.1 == b.1
        ),
    )
}

fn c11_round_trips(work: &Path) -> Outcome {
    let params = build_model::<f32>(Architecture::default(), 11).unwrap();
    let path = work.join("rt.ckpt");
    let ckpt = Checkpoint::from_model(&params, Some(&TrainConfig::default()));
    ckpt.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    let bits = |c: &Checkpoint| -> Vec<u32> {
        c.tensors
            .iter()
            .flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let ckpt_ok = bits(&back) == bits(&ckpt) && back.to_bytes().unwrap() == bytes;

    let pixels: Vec<u8> = (0..37 * 23).map(|i| (i * 13 % 256) as u8).collect();
    let pgm_ok = read_pgm(&encode_pgm(37, 23, &pixels).unwrap()).ok() == Some((37, 23, pixels));

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let image = decode_record(&common::synthetic_record(3, &mut rng));
    let mosaics = match export_feature_maps(&params, &image, "all", &work.join("viz")) {
        Ok(w) => w,
        Err(e) => return fail(e.to_string()),
    };
    let tiles: Vec<usize> = mosaics.iter().map(|(_, m)| m.tiles).collect();
    let tile_dims: Vec<(usize, usize)> = mosaics
        .iter()
        .map(|(_, m)| (m.tile_height, m.tile_width))
        .collect();
    check(
        ckpt_ok && pgm_ok && tiles == [32, 64, 64] && tile_dims == [(30, 30), (13, 13), (4, 4)],
        format!(
            "checkpoint bit-exact={ckpt_ok} PGM bit-exact={pgm_ok} mosaic tiles {tiles:?} of {tile_dims:?}"
        ),
    )
}

fn main() {
    // Filter arguments from `cargo test` are accepted and ignored.
    let work = tempfile::tempdir().expect("temp dir");
    let synthetic = work.path().join("synthetic-cifar");
    std::fs::create_dir(&synthetic).unwrap();
    common::write_synthetic_cifar(&synthetic, 2024);
    let real = cifar_dir();

    let criteria: Vec<Criterion> = vec![
        (
            "activation identities",
            Duration::from_secs(1),
            Box::new(c1_activations),
        ),
        ("shape law", Duration::from_secs(1), Box::new(c2_shapes)),
        (
            "gradient certification",
            Duration::from_secs(30),
            Box::new(c3_gradients),
        ),
        (
            "loss/optimizer algebra",
            Duration::from_secs(1),
            Box::new(c4_loss_and_adam),
        ),
        (
            "schedule endpoints",
            Duration::from_secs(1),
            Box::new(c5_schedule),
        ),
        (
            "data conformance",
            Duration::from_secs(30),
            Box::new(|| c6_data(&synthetic)),
        ),
        (
            "overfit sanity",
            Duration::from_secs(300),
            Box::new(c7_overfit),
        ),
        (
            "desk-scale learning",
            Duration::from_secs(1800),
            Box::new(|| c8_desk(real.as_deref())),
        ),
        (
            "full-protocol reproduction",
            Duration::MAX,
            Box::new(|| c9_full(real.as_deref())),
        ),
        (
            "determinism",
            Duration::from_secs(3600),
            Box::new(|| match real.as_deref() {
                Some(dir) => c10_determinism(dir, false, work.path()),
                None => c10_determinism(&synthetic, true, work.path()),
            }),
        ),
        (
            "checkpoint/PGM round trips",
            Duration::from_secs(5),
            Box::new(|| c11_round_trips(work.path())),
        ),
    ];

    let mut failures = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let mut outcome = run();
        let elapsed = start.elapsed();
        if matches!(outcome.status, Status::Pass) && elapsed > budget {
            outcome = fail(format!("{} [over time budget {budget:?}]", outcome.detail));
        }
        let tag = match outcome.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failures += 1;
                "FAIL"
            }
            Status::Skip => "SKIP",
        };
        println!(
            "criterion {:>2} {tag} {name} ({:.2}s): {}",
            i + 1,
            elapsed.as_secs_f64(),
            outcome.detail
        );
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
