//! Acceptance criteria 1-9. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits nonzero on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use cvgan::capsule::{nearest_indices, predict, route, squash_vector, vq_quantize, Codebook, RoutingOptions};
use cvgan::checks::{check_generator, check_route, RouteProblem};
use cvgan::degrade::{blend, degrade, transmission, transmission_value, DegradationParams, Preset};
use cvgan::generator::{compression_factor, GeneratorConfig, GeneratorModel, LatentCode};
use cvgan::losses::{adaptive_lambda, combined_finetune, combined_pretrain, gdl, LossParts, Phase};
use cvgan::metrics::{canny, edge_distance, inception_score, psnr, CannyParams, EdgeMap, UIQM_WEIGHTS};
use cvgan::pipeline::{
    read_history, run_training, run_training_from, save_image, synthetic_samples, Checkpoint, LossRecord, Sample,
    TrainConfig, CHECKPOINT_FILE, HISTORY_FILE,
};
use cvgan::tensor::{finite_diff_check_coords, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let route_check = check_route(RouteProblem { beta: 4, d_a: 8, alpha: 3 }, 1).map_err(err)?;
    ensure(
        route_check.report.max_rel_error < 1e-4,
        format!("route: max rel err {:.3e}", route_check.report.max_rel_error),
    )?;

    // Same check one step earlier: through the prediction matrices from d_u = 4 child vectors.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = Tensor::<f64>::randn(&[1, 4, 4], 0.7, &mut rng);
    let w = Tensor::<f64>::randn(&[4, 4, 4, 8], 0.5, &mut rng);
    let readout = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut rng);
    let f = |tape: &mut Tape<f64>, u: Var| -> cvgan::Result<Var> {
        let wv = tape.constant(w.clone());
        let u_hat = predict(tape, u, wv)?;
        let r = route(tape, u_hat, &RoutingOptions::new(3))?;
        let rv = tape.constant(readout.clone());
        let p = tape.mul(r.v, rv)?;
        Ok(tape.sum(p))
    };
    let coords: Vec<usize> = (0..u.len()).collect();
    let via_u = finite_diff_check_coords(f, &u, 1e-6, &coords).map_err(err)?;
    ensure(via_u.max_rel_error < 1e-4, format!("predict+route: max rel err {:.3e}", via_u.max_rel_error))?;

    let model = GeneratorModel::<f64>::new(GeneratorConfig::desk(), &mut ChaCha8Rng::seed_from_u64(3)).map_err(err)?;
    let e2e = check_generator(&model, "encoder.block0.resnet.conv1.weight", 4, 48).map_err(err)?;
    ensure(e2e.report.max_rel_error < 1e-3, format!("generate: max rel err {:.3e}", e2e.report.max_rel_error))?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "route {:.2e}, predict+route {:.2e} (< 1e-4); generate {:.2e} over {} weights (< 1e-3); {secs:.1}s",
        route_check.report.max_rel_error, via_u.max_rel_error, e2e.report.max_rel_error, e2e.report.checked
    ))
}

// ---------------------------------------------------------------- 2

struct OracleState {
    b: Vec<f64>,
    c: Vec<f64>,
    s: Vec<f64>,
    v: Vec<f64>,
}

/// Plain-loop routing by agreement over predictions `u[i][j][d]`.
fn routing_oracle(u: &[f64], ni: usize, nj: usize, d: usize, iters: usize) -> Vec<OracleState> {
    let at = |i: usize, j: usize, k: usize| u[(i * nj + j) * d + k];
    let mut b = vec![0.0; ni * nj];
    let mut out = Vec::new();
    for _ in 0..iters {
        let mut c = vec![0.0; ni * nj];
        for i in 0..ni {
            let m = (0..nj).map(|j| b[i * nj + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..nj).map(|j| (b[i * nj + j] - m).exp()).sum();
            for j in 0..nj {
                c[i * nj + j] = (b[i * nj + j] - m).exp() / z;
            }
        }
        let mut s = vec![0.0; nj * d];
        for j in 0..nj {
            for k in 0..d {
                for i in 0..ni {
                    s[j * d + k] += c[i * nj + j] * at(i, j, k);
                }
            }
        }
        let mut v = vec![0.0; nj * d];
        for j in 0..nj {
            let q: f64 = (0..d).map(|k| s[j * d + k] * s[j * d + k]).sum();
            let scale = q / (1.0 + q) / (q + 1e-9).sqrt();
            for k in 0..d {
                v[j * d + k] = s[j * d + k] * scale;
            }
        }
        let b_start = b.clone();
        for i in 0..ni {
            for j in 0..nj {
                b[i * nj + j] += (0..d).map(|k| v[j * d + k] * at(i, j, k)).sum::<f64>();
            }
        }
        out.push(OracleState { b: b_start, c, s, v });
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst: f64 = 0.0;
    let mut worst_row: f64 = 0.0;
    for _ in 0..50 {
        let ni = rng.random_range(1..=6);
        let nj = rng.random_range(1..=6);
        let d = rng.random_range(1..=8);
        let iters = rng.random_range(1..=5);
        let scale = rng.random_range(0.05..3.0);
        let u = Tensor::<f64>::randn(&[ni, nj, d], scale, &mut rng);
        let mut tape = Tape::<f64>::new();
        let uv = tape.constant(u.clone());
        let routed = route(&mut tape, uv, &RoutingOptions::new(iters)).map_err(err)?;
        let oracle = routing_oracle(u.data(), ni, nj, d, iters);
        for (step, o) in routed.steps.iter().zip(&oracle) {
            for (var, want) in [(step.logits, &o.b), (step.coupling, &o.c), (step.s, &o.s), (step.v, &o.v)] {
                worst = worst.max(max_diff(tape.value(var).data(), want));
            }
            for row in tape.value(step.coupling).data().chunks(nj) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst < 1e-6, format!("state deviates from oracle by {worst:.3e}"))?;
    ensure(worst_row < 1e-6, format!("coupling row sum off by {worst_row:.3e}"))?;

    let mut longest: f64 = 0.0;
    for n in 0..1_000_000u32 {
        let dim = 1 + (n % 16) as usize;
        // Magnitudes from 1e-12 to 1e12, so near-zero and saturated vectors both occur.
        let mag = 10f64.powf(rng.random_range(-12.0..12.0));
        let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0) * mag).collect();
        let v = squash_vector(&s);
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        longest = longest.max(len);
        if len >= 1.0 {
            return Err(format!("|squash(s)| = {len} for |s| ~ {mag:e}"));
        }
    }
    Ok(format!(
        "50 instances, max state error {worst:.2e}; max row-sum error {worst_row:.2e}; 1e6 squashes, max length {longest:.17}"
    ))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let factor = compression_factor(&[3, 256, 256], &[256, 16, 16]).map_err(err)?;
    ensure(factor == 3.0, format!("factor {factor}"))?;
    let paper = LatentCode::new(&GeneratorConfig::paper().latent_shape(), vec![0.0; 256 * 16 * 16]).map_err(err)?;
    ensure(paper.payload_bytes() == 262_144, format!("payload {} bytes", paper.payload_bytes()))?;

    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for i in 0..100 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=9)).collect();
        let n: usize = shape.iter().product();
        // Arbitrary bit patterns, NaNs and infinities included.
        let payload: Vec<f32> = (0..n).map(|_| f32::from_bits(rng.random())).collect();
        let code = LatentCode::new(&shape, payload).map_err(err)?;
        let back = LatentCode::from_bytes(&code.to_bytes()).map_err(err)?;
        let same = back.shape() == code.shape()
            && back.payload().iter().zip(code.payload()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, format!("latent {i} {shape:?} changed in the roundtrip"))?;
    }
    Ok(format!(
        "factor {factor}; paper payload {} bytes; 100/100 roundtrips bit-identical",
        paper.payload_bytes()
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let (h, w) = (500, 667);
    let mut checked = 0usize;
    for _ in 0..1 {
        let j = Tensor::<f64>::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let depth = Tensor::<f64>::rand_uniform(&[h, w], 0.0, 20.0, &mut rng);
        let nu = [rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), rng.random_range(0.0..3.0)];
        let ambient = [rng.random(), rng.random(), rng.random()];
        let params = DegradationParams {
            ambient,
            attenuation: nu,
            depth,
        };
        let out = degrade(&j, &params).map_err(err)?;
        let plane = h * w;
        for (i, (&o, &jv)) in out.data().iter().zip(j.data()).enumerate() {
            let a = ambient[i / plane];
            ensure(o >= jv.min(a) && o <= jv.max(a), format!("pixel {i}: {o} outside [{jv}, {a}]"))?;
            checked += 1;
        }
    }
    ensure(checked >= 1_000_000, format!("only {checked} pixels"))?;

    let t = transmission_value(2f64.ln(), 1.0);
    ensure((t - 0.5).abs() < 1e-9, format!("transmission(ln 2, 1) = {t}"))?;

    let clean = Tensor::<f64>::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let ones = transmission(&Tensor::zeros(&[16, 16]), &[0.7, 0.2, 0.1]).map_err(err)?;
    let through = blend(&clean, &ones, &[0.1, 0.5, 0.9]).map_err(err)?;
    ensure(
        through.data().iter().zip(clean.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "t = 1 changed the image",
    )?;
    Ok(format!("{checked} pixels within [min(J,a), max(J,a)]; t(ln 2, 1) = {t}; t = 1 returns J exactly"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let y = Tensor::<f64>::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    ensure(gdl(&y, &y, 1).map_err(err)? == 0.0, "gdl(Y, Y) != 0")?;
    let y_hat = Tensor::<f64>::rand_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
    let base = gdl(&y, &y_hat, 1).map_err(err)?;
    let shifted = gdl(&y.map(|v| v + 0.375), &y_hat.map(|v| v - 1.25), 1).map_err(err)?;
    ensure((base - shifted).abs() < 1e-9, format!("offset changed gdl: {base} vs {shifted}"))?;

    ensure(adaptive_lambda(0.0, 3.0, 1e-6) == 0.0, "lambda(0, .) != 0")?;
    let l = adaptive_lambda(2e-6, 0.0, 1e-6);
    ensure((l - 2.0).abs() < 1e-12, format!("lambda(2e-6, 0, 1e-6) = {l}"))?;

    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = LossParts {
            rec: rng.random_range(0.0..2.0),
            gan_g: rng.random_range(0.0..5.0),
            gdl: rng.random_range(0.0..2.0),
            lambda: rng.random_range(0.0..100.0),
        };
        worst = worst.max((combined_finetune(&p) - combined_pretrain(&p) - p.gdl).abs());
    }
    ensure(worst < 1e-9, format!("fine-tune minus pretrain deviates from gdl by {worst:.3e}"))?;
    Ok(format!(
        "gdl(Y,Y) = 0, offset drift {:.1e}; lambda(0,.) = 0, lambda(2e-6,0,1e-6) = {l}; totals identity error {worst:.1e}",
        (base - shifted).abs()
    ))
}

// ---------------------------------------------------------------- 6 and 9

const DESK_SEED: u64 = 0;
const TRAIN_DATA_SEED: u64 = 1000;
const HELD_OUT_DATA_SEED: u64 = 50_000;
const PRETRAIN_STEPS: u64 = 1000;
const FINETUNE_STEPS: u64 = 2000;
const TRAIN_PAIRS: usize = 200;
const HELD_OUT_PAIRS: usize = 50;
const THREADS: usize = 1;

fn desk_config(phase: Phase, steps: u64, without_gdl: bool) -> TrainConfig {
    TrainConfig {
        phase,
        max_steps: Some(steps),
        seed: DESK_SEED,
        without_gdl,
        threads: THREADS,
        ..TrainConfig::default()
    }
}

struct DeskRun {
    history: Vec<LossRecord>,
    outputs: Vec<Tensor<f32>>,
    image_bytes: Vec<Vec<u8>>,
    mean_psnr: f64,
}

fn clamp01(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Pretrains on the clean halves of the training pairs, fine-tunes from
/// those weights and enhances the held-out set.
fn desk_run(dir: &Path, train: &[Sample], held: &[Sample], without_gdl: bool) -> Result<DeskRun, String> {
    let clean: Vec<Sample> = train
        .iter()
        .map(|s| Sample {
            input: s.target.clone(),
            ..s.clone()
        })
        .collect();
    let pre_dir = dir.join("pretrain");
    run_training(desk_config(Phase::Pretrain, PRETRAIN_STEPS, without_gdl), &clean, &pre_dir, false).map_err(err)?;
    let warm = Checkpoint::load(pre_dir.join(CHECKPOINT_FILE)).map_err(err)?;

    let ft_dir = dir.join("finetune");
    let config = desk_config(Phase::Finetune, FINETUNE_STEPS, without_gdl);
    let (trainer, _) = run_training_from(config, train, &ft_dir, |t| warm.load_weights(t)).map_err(err)?;
    let history = read_history(ft_dir.join(HISTORY_FILE)).map_err(err)?;

    let mut outputs = Vec::new();
    let mut image_bytes = Vec::new();
    let mut total = 0.0;
    for (i, s) in held.iter().enumerate() {
        let y_hat = clamp01(&trainer.model.generate(&s.input).map_err(err)?);
        total += psnr(&s.target, &y_hat, 1.0).map_err(err)?;
        let path = ft_dir.join(format!("held_{i:03}.png"));
        save_image(&path, &y_hat).map_err(err)?;
        image_bytes.push(std::fs::read(&path).map_err(err)?);
        outputs.push(y_hat);
    }
    Ok(DeskRun {
        history,
        outputs,
        image_bytes,
        mean_psnr: total / held.len() as f64,
    })
}

fn desk_data() -> (Vec<Sample>, Vec<Sample>) {
    let train = synthetic_samples(TRAIN_PAIRS, TRAIN_DATA_SEED, (32, 32), &Preset::ALL);
    let held = synthetic_samples(HELD_OUT_PAIRS, HELD_OUT_DATA_SEED, (32, 32), &Preset::ALL);
    (train, held)
}

fn criterion_6(main_run: &Result<DeskRun, String>, secs: f64) -> Outcome {
    let run = main_run.as_ref().map_err(|e| e.clone())?;
    let (train, held) = desk_data();
    let mut baseline = 0.0;
    for s in &held {
        baseline += psnr(&s.target, &s.input, 1.0).map_err(err)?;
    }
    baseline /= held.len() as f64;
    let gain = run.mean_psnr - baseline;

    // Ablation: a short run with the same seed and GDL switched off.
    let dir = tempfile::tempdir().map_err(err)?;
    let steps = 20;
    let mut histories = Vec::new();
    for (name, without) in [("with", false), ("without", true)] {
        let (_, out) = run_training(desk_config(Phase::Finetune, steps, without), &train, dir.path().join(name), false)
            .map_err(err)?;
        histories.push(out.history);
    }
    let (with, without) = (&histories[0], &histories[1]);
    let (a, b) = (with[0].losses, without[0].losses);
    let same_except_gdl = a.rec == b.rec && a.gan_g == b.gan_g && a.gan_d == b.gan_d && a.lambda == b.lambda;
    ensure(same_except_gdl, format!("ablation changed more than gdl at step 0: {a:?} vs {b:?}"))?;
    ensure(a.gdl > 0.0, "gdl column is zero with GDL enabled")?;
    ensure(without.iter().all(|r| r.losses.gdl == 0.0), "ablation logged a nonzero gdl")?;
    ensure(
        (a.total - b.total - a.gdl).abs() < 1e-9,
        format!("totals differ by {} not gdl {}", a.total - b.total, a.gdl),
    )?;

    ensure(secs < 1800.0, format!("run took {secs:.0}s"))?;
    ensure(
        gain >= 1.0,
        format!("held-out PSNR {:.3} dB vs degraded {baseline:.3} dB: gain {gain:.3} dB < 1", run.mean_psnr),
    )?;
    Ok(format!(
        "held-out PSNR {:.3} dB vs degraded {baseline:.3} dB (gain {gain:.3} dB) after {FINETUNE_STEPS} fine-tune steps \
         ({PRETRAIN_STEPS} pretraining); ablation differs only in gdl ({:.4} -> 0); {secs:.0}s",
        run.mean_psnr, a.gdl
    ))
}

fn criterion_9(first: &Result<DeskRun, String>, dir: &Path) -> Outcome {
    let first = first.as_ref().map_err(|e| e.clone())?;
    let (train, held) = desk_data();
    let second = desk_run(dir, &train, &held, false)?;
    let rows_equal = first.history.len() == second.history.len()
        && first.history.iter().zip(&second.history).all(|(a, b)| a.to_tsv() == b.to_tsv());
    ensure(rows_equal, "loss histories differ")?;
    let outputs_equal = first
        .outputs
        .iter()
        .zip(&second.outputs)
        .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    ensure(outputs_equal && first.image_bytes == second.image_bytes, "output images differ")?;
    Ok(format!(
        "{} history rows and {} output images bitwise identical across two runs ({THREADS} thread)",
        first.history.len(),
        first.outputs.len()
    ))
}

// ---------------------------------------------------------------- 7

/// Reference Canny from the imageproc crate on an 8-bit copy of the image.
/// Its thresholds act on 0..255 intensities, hence the factor 255.
fn reference_canny(img: &Tensor<f64>, low: f64, high: f64) -> EdgeMap {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let gray = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(img.data()[y as usize * w + x as usize] * 255.0).round() as u8])
    });
    let edges = imageproc::edges::canny(&gray, (low * 255.0) as f32, (high * 255.0) as f32);
    EdgeMap::new(h, w, edges.pixels().map(|p| (p.0[0] > 0) as u8).collect()).unwrap()
}

fn criterion_7() -> Outcome {
    let y = Tensor::<f64>::zeros(&[3, 8, 8]);
    let p = psnr(&y, &Tensor::full(&[3, 8, 8], 0.1), 1.0).map_err(err)?;
    ensure((p - 20.0).abs() < 1e-9, format!("psnr {p}"))?;

    let dist = vec![0.1, 0.25, 0.05, 0.6];
    let (same, _) = inception_score(&vec![dist; 10], 1).map_err(err)?;
    ensure(same == 1.0, format!("identical distributions give {same}"))?;
    let n = 10;
    let one_hot: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let (distinct, _) = inception_score(&one_hot, 1).map_err(err)?;
    ensure((distinct - n as f64).abs() < 1e-9, format!("{n} one-hots give {distinct}"))?;

    ensure(UIQM_WEIGHTS == [0.0282, 0.2953, 3.5753], format!("weights {UIQM_WEIGHTS:?}"))?;

    let size = 64;
    let square = Tensor::<f64>::from_fn(&[1, size, size], |i| {
        let (r, c) = (i / size, i % size);
        ((16..48).contains(&r) && (16..48).contains(&c)) as u8 as f64
    });
    let params = CannyParams::default();
    let ours = canny(&square, params).map_err(err)?;
    let reference = reference_canny(&square, params.low, params.high);
    let disagree = edge_distance(&ours, &reference).map_err(err)?.powi(2) / (size * size) as f64;
    ensure(disagree <= 0.02, format!("canny disagrees with the reference on {:.2}% of pixels", disagree * 100.0))?;
    ensure(ours.count() > 0, "no edges on the square")?;
    ensure(edge_distance(&ours, &ours).map_err(err)? == 0.0, "edge_distance(E, E) != 0")?;
    Ok(format!(
        "psnr {p}; IS identical {same}, {n} one-hots {distinct}; UIQM weights {UIQM_WEIGHTS:?}; \
         canny vs reference {:.2}% disagreement ({} vs {} edge px); self distance 0",
        disagree * 100.0,
        ours.count(),
        reference.count()
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let book = Codebook::<f64>::random(32, 6, &mut rng).map_err(err)?;
    let queries = Tensor::<f64>::randn(&[1000, 6], 1.0, &mut rng);
    let got = nearest_indices(&queries, &book).map_err(err)?;
    for (q, &k) in queries.data().chunks(6).zip(&got) {
        let dist = |e: usize| book.entry(e).iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..book.len()).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
        ensure(k == best, format!("index {k} but brute force gives {best}"))?;
    }

    let upstream = Tensor::<f64>::randn(&[1000, 6], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let z = tape.param(queries.clone());
    let (q, _) = vq_quantize(&mut tape, z, &book).map_err(err)?;
    let g = tape.backward_seeded(q, upstream.clone()).map_err(err)?.wrt(z);
    ensure(
        g.data().iter().zip(upstream.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "straight-through gradient differs from the upstream gradient",
    )?;

    // Routing: the gradient reaching the predictions is not a copy of the
    // gradient arriving at the routed output.
    let u_hat = Tensor::<f64>::randn(&[4, 4, 8], 0.5, &mut rng);
    let up = Tensor::<f64>::randn(&[4, 8], 1.0, &mut rng);
    let mut tape = Tape::<f64>::new();
    let uv = tape.param(u_hat);
    let r = route(&mut tape, uv, &RoutingOptions::new(3)).map_err(err)?;
    let gu = tape.backward_seeded(r.v, up.clone()).map_err(err)?.wrt(uv);
    let mut gap: f64 = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            for k in 0..8 {
                gap = gap.max((gu.data()[(i * 4 + j) * 8 + k] - up.data()[j * 8 + k]).abs());
            }
        }
    }
    ensure(gap > 1e-3, format!("routing backward looks like identity (gap {gap:.2e})"))?;
    Ok(format!(
        "1000/1000 indices match brute force; straight-through gradient bit-identical to upstream; routing backward departs from identity by {gap:.3}"
    ))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    // `cargo test -- --list` and filters from the test runner: nothing to enumerate.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(u8, Outcome)> = Vec::new();
    let mut report = |n: u8, r: Outcome| {
        match &r {
            Ok(d) => println!("criterion {n}: PASS  {d}"),
            Err(d) => println!("criterion {n}: FAIL  {d}"),
        }
        results.push((n, r));
    };

    report(1, guarded(criterion_1));
    report(2, guarded(criterion_2));
    report(3, guarded(criterion_3));
    report(4, guarded(criterion_4));
    report(5, guarded(criterion_5));

    let dir = tempfile::tempdir().expect("temp dir");
    let (train, held) = desk_data();
    let t0 = Instant::now();
    let main_run = catch_unwind(AssertUnwindSafe(|| desk_run(&dir.path().join("a"), &train, &held, false)))
        .unwrap_or_else(|_| Err("training panicked".into()));
    let secs = t0.elapsed().as_secs_f64();
    report(6, guarded(|| criterion_6(&main_run, secs)));
    report(7, guarded(criterion_7));
    report(8, guarded(criterion_8));
    report(9, guarded(|| criterion_9(&main_run, &dir.path().join("b"))));

    let failed: Vec<u8> = results.iter().filter(|(_, r)| r.is_err()).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all 9 criteria pass");
    } else {
        println!("acceptance: failing criteria {failed:?}");
        std::process::exit(1);
    }
}
