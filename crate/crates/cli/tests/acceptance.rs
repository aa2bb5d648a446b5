//! Acceptance run: one pass/fail line per criterion, then a non-zero exit if
//! any failed. The toy-learning and determinism checks drive the real
//! binary on `configs/toy.cfg` and take several minutes each.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use parsegrid_cli::RunConfig;
use parsegrid_core::data::{
    collate, flip_sample, synth_sample, ClassTable, SampleSource, SynthDataset, LIP_FLIP_PAIRS,
};
use parsegrid_core::evaluator::{evaluate, flip_tta, EvalOptions};
use parsegrid_core::gradsuite::{run_suite, SuiteScale};
use parsegrid_core::model::{combine_losses, Model, ModelConfig};
use parsegrid_core::tensor::kernels::ConvGeom;
use parsegrid_core::tensor::{LabelMap, Shape, Tape, Tensor};
use parsegrid_core::trainer::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, poly_lr, save_checkpoint, train_step, Sgd, TrainConfig,
    TrainState,
};
use parsegrid_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_parsegrid");

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn bitwise_eq(a: &Tensor<f32>, b: &Tensor<f32>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

// 1 -----------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let entries = run_suite(SuiteScale::Full).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} ({:.2e} > {:.0e})", e.name, e.report.max_relative_error, e.tolerance))
        .collect();
    ensure(failed.is_empty(), || format!("failing checks: {}", failed.join(", ")))?;
    ensure(entries.iter().any(|e| e.name.starts_with("end-to-end")), || {
        "no end-to-end check ran".into()
    })?;
    ensure(elapsed < Duration::from_secs(120), || {
        format!("took {:.1}s", elapsed.as_secs_f64())
    })?;
    let worst = entries.iter().map(|e| e.report.max_relative_error).fold(0.0, f64::max);
    Ok(format!(
        "{} checks, worst relative error {worst:.2e}, {:.1}s",
        entries.len(),
        elapsed.as_secs_f64()
    ))
}

// 2 -----------------------------------------------------------------------

/// Zero-padded cross-correlation written as plain nested loops.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, dil: usize) -> Option<Tensor<f64>> {
    let [n, c, h, wd] = x.shape().dims();
    let [o, _, kh, kw] = w.shape().dims();
    let span_h = dil * (kh - 1) + 1;
    let span_w = dil * (kw - 1) + 1;
    if h + 2 * pad < span_h || wd + 2 * pad < span_w {
        return None;
    }
    let oh = (h + 2 * pad - span_h) / stride + 1;
    let ow = (wd + 2 * pad - span_w) / stride + 1;
    Some(Tensor::from_fn(Shape::new(n, o, oh, ow), |b, oc, oy, ox| {
        let mut acc = 0.0;
        for ic in 0..c {
            for ky in 0..kh {
                for kx in 0..kw {
                    let iy = (oy * stride + ky * dil) as isize - pad as isize;
                    let ix = (ox * stride + kx * dil) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += x.at(b, ic, iy as usize, ix as usize) * w.at(oc, ic, ky, kx);
                    }
                }
            }
        }
        acc
    }))
}

fn inner(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn convolution_oracle() -> Outcome {
    let x = random_tensor(Shape::new(2, 3, 76, 76), 1);
    let w = random_tensor(Shape::new(4, 3, 3, 3), 2);
    let x32: Tensor<f32> = x.cast();
    let w32: Tensor<f32> = w.cast();
    let mut cases = 0;
    let mut worst = 0.0f64;
    for stride in [1, 2] {
        for dil in [1, 2, 12, 24, 36] {
            for pad in [0, 1, dil] {
                let want = conv_oracle(&x, &w, stride, pad, dil).expect("76 pixels cover every kernel span");
                let mut tape = Tape::<f32>::new();
                let xv = tape.constant(x32.clone());
                let wv = tape.constant(w32.clone());
                let y = tape
                    .conv2d(xv, wv, None, ConvGeom::new(stride, pad, dil))
                    .map_err(|e| format!("stride {stride} pad {pad} dilation {dil}: {e}"))?;
                let got: Tensor<f64> = tape.value(y).cast();
                ensure(got.shape() == want.shape(), || {
                    format!(
                        "stride {stride} pad {pad} dilation {dil}: shape {} vs {}",
                        got.shape(),
                        want.shape()
                    )
                })?;
                let diff = got.max_abs_diff(&want);
                ensure(diff <= 1e-5, || {
                    format!("stride {stride} pad {pad} dilation {dil}: max abs diff {diff:.3e}")
                })?;
                worst = worst.max(diff);
                cases += 1;
            }
        }
    }

    let mut adjoint_worst = 0.0f64;
    for (stride, pad) in [(1, 0), (1, 1), (2, 0), (2, 1), (3, 1)] {
        let x = random_tensor(Shape::new(2, 3, 10, 10), 3);
        let w = random_tensor(Shape::new(5, 3, 3, 3), 4);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w);
        let cx = tape
            .conv2d(xv, wv, None, ConvGeom::new(stride, pad, 1))
            .map_err(|e| e.to_string())?;
        let s = tape.shape(cx);
        let y = random_tensor(s, 5);
        let yv = tape.constant(y.clone());
        // output padding restores the rows and columns the strided conv dropped
        let op_h = 10 - ((s.h - 1) * stride + 3 - 2 * pad);
        let op_w = 10 - ((s.w - 1) * stride + 3 - 2 * pad);
        ensure(op_h == op_w, || format!("stride {stride}: asymmetric output padding"))?;
        let ty = tape
            .conv_transpose2d(yv, wv, stride, pad, op_h)
            .map_err(|e| e.to_string())?;
        ensure(tape.shape(ty) == x.shape(), || {
            format!("transpose shape {}", tape.shape(ty))
        })?;
        let lhs = inner(tape.value(cx), &y);
        let rhs = inner(&x, tape.value(ty));
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-300);
        ensure(rel <= 1e-4, || {
            format!("stride {stride} pad {pad}: <Ax,y>={lhs} <x,A'y>={rhs}")
        })?;
        adjoint_worst = adjoint_worst.max(rel);
    }
    Ok(format!(
        "{cases} conv geometries (dilations up to 36), max abs diff {worst:.2e}; adjoint identity max rel {adjoint_worst:.2e}"
    ))
}

// 3 -----------------------------------------------------------------------

fn aspp_trace() -> Outcome {
    let paper = Model::build(&ModelConfig::paper(), 0).map_err(|e| e.to_string())?;
    let trace = paper.aspp_channel_trace().ok_or("paper model has no ASPP")?;
    ensure(trace == [2048, 1024, 256, 1024, 2048], || {
        format!("paper trace {trace:?}")
    })?;
    drop(paper);
    for bw in [8, 32, 64] {
        let m = Model::build(&ModelConfig::toy(bw, 5, (64, 64)), 0).map_err(|e| e.to_string())?;
        let t = m.aspp_channel_trace().ok_or("toy model has no ASPP")?;
        ensure(t == [bw, bw / 2, bw / 8, bw / 2, bw], || {
            format!("base width {bw}: trace {t:?}")
        })?;
    }
    Ok("2048->1024->256->1024->2048 and scaled traces for 8, 32, 64".into())
}

// 4 -----------------------------------------------------------------------

/// Mean softmax cross-entropy over non-ignored pixels, from scratch.
fn cross_entropy_oracle(logits: &Tensor<f64>, labels: &LabelMap, ignore: u8) -> f64 {
    let [n, k, h, w] = logits.shape().dims();
    let (mut total, mut count) = (0.0, 0usize);
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let t = labels.get(b, y, x);
                if t == ignore {
                    continue;
                }
                let m = (0..k).map(|c| logits.at(b, c, y, x)).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..k).map(|c| (logits.at(b, c, y, x) - m).exp()).sum::<f64>().ln();
                total += lse - logits.at(b, t as usize, y, x);
                count += 1;
            }
        }
    }
    total / count as f64
}

fn loss_arithmetic() -> Outcome {
    let cfg = ModelConfig::toy(16, 5, (32, 32));
    ensure(cfg.aux_loss_weight == 0.5, || {
        format!("aux weight {}", cfg.aux_loss_weight)
    })?;
    let model = Model::build(&cfg, 11).map_err(|e| e.to_string())?;
    let x = random_tensor(Shape::new(2, 3, 32, 32), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = (0..2 * 32 * 32)
        .map(|_| if rng.gen_bool(0.1) { 255 } else { rng.gen_range(0..5) })
        .collect();
    let labels = LabelMap::new(2, 32, 32, data).map_err(|e| e.to_string())?;

    let mut tape = Tape::<f64>::new();
    let params = model.bind(&mut tape, false);
    let xv = tape.constant(x);
    let mut ctx = model.context(&mut tape, &params, true);
    let out = model.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
    let terms = model
        .total_loss(&mut tape, &out, &labels, 255)
        .map_err(|e| e.to_string())?;
    ensure(out.aux_logits.len() == 4, || {
        format!("{} aux heads", out.aux_logits.len())
    })?;
    let main = cross_entropy_oracle(tape.value(out.main_logits), &labels, 255);
    let aux: f64 = out
        .aux_logits
        .iter()
        .map(|&l| cross_entropy_oracle(tape.value(l), &labels, 255))
        .sum();
    let expected = main + 0.5 * aux;
    let total = tape.value(terms.total).item();
    ensure((total - expected).abs() <= 1e-6, || {
        format!("total {total} vs recomputed {expected}")
    })?;

    let l = 0.8125;
    let mut tape = Tape::<f64>::new();
    let main_v = tape.constant(Tensor::scalar(l));
    let aux_v: Vec<_> = (0..4).map(|_| tape.constant(Tensor::scalar(l))).collect();
    let combined = combine_losses(&mut tape, main_v, &aux_v, 0.5).map_err(|e| e.to_string())?;
    let c = tape.value(combined).item();
    ensure(c == 3.0 * l, || format!("equal components {l}: total {c}"))?;
    Ok(format!(
        "total {total:.9} vs recomputed {expected:.9}; equal components give {c} = 3 x {l}"
    ))
}

// 5 -----------------------------------------------------------------------

fn shape_contract() -> Outcome {
    let mut notes = Vec::new();
    for (n, h, w) in [(1, 256, 192), (2, 64, 64)] {
        let cfg = ModelConfig::toy(64, 20, (h, w));
        let model = Model::build(&cfg, 5).map_err(|e| e.to_string())?;
        let mut tape = Tape::<f32>::new();
        let params = model.bind(&mut tape, false);
        let xv = tape.constant(random_tensor(Shape::new(n, 3, h, w), 6).cast());
        let mut ctx = model.context(&mut tape, &params, false);
        let out = model.forward(&mut ctx, xv).map_err(|e| e.to_string())?;
        let want = Shape::new(n, 20, h, w);
        ensure(tape.shape(out.main_logits) == want, || {
            format!("main logits {}", tape.shape(out.main_logits))
        })?;
        ensure(out.aux_logits.len() == 4, || {
            format!("{} aux heads", out.aux_logits.len())
        })?;
        for &a in &out.aux_logits {
            ensure(tape.shape(a) == want, || format!("aux logits {}", tape.shape(a)))?;
        }
        let e4 = tape.shape(out.encoder.e[3]);
        let e5 = tape.shape(out.encoder.e[4]);
        ensure((e4.h, e4.w) == (e5.h, e5.w) && (e5.h, e5.w) == (h / 16, w / 16), || {
            format!("E4 {e4}, E5 {e5} for input {h}x{w}")
        })?;
        notes.push(format!("({n},3,{h},{w}) -> E5 {}x{}", e5.h, e5.w));
    }
    Ok(format!("{}; main and 4 aux logits (N,20,H,W)", notes.join(", ")))
}

// 7 -----------------------------------------------------------------------

fn poly_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let max = cfg.max_iter(200);
    let start = poly_lr(0, max, cfg.base_lr, cfg.lr_power);
    let end = poly_lr(max, max, cfg.base_lr, cfg.lr_power);
    let mid = poly_lr(max / 2, max, cfg.base_lr, cfg.lr_power);
    let oracle = 0.002 * (0.5f64.ln() * 0.9).exp();
    ensure(start == 0.002, || format!("iter 0: {start}"))?;
    ensure(end == 0.0, || format!("iter max: {end}"))?;
    ensure((mid - oracle).abs() <= 1e-9, || format!("midpoint {mid} vs {oracle}"))?;
    ensure((mid - 1.0718e-3).abs() <= 5e-8, || {
        format!("midpoint {mid} vs 1.0718e-3")
    })?;
    Ok(format!("max_iter {max}: {start}, {mid:.7e}, {end}"))
}

// 8 -----------------------------------------------------------------------

fn tta_equivariance() -> Outcome {
    let model = Model::build(&ModelConfig::toy(16, 20, (32, 48)), 21).map_err(|e| e.to_string())?;
    let pairs = LIP_FLIP_PAIRS;
    for i in 0..10 {
        let x: Tensor<f32> = random_tensor(Shape::new(1, 3, 32, 48), 100 + i).cast();
        let lhs = flip_tta(&model, 0, &x.flip_w(), &pairs).map_err(|e| e.to_string())?;
        let rhs = flip_tta(&model, 0, &x, &pairs)
            .map_err(|e| e.to_string())?
            .flip_w()
            .swap_channels(&pairs);
        ensure(bitwise_eq(&lhs, &rhs), || {
            format!("input {i}: max diff {:.3e}", lhs.max_abs_diff(&rhs))
        })?;
    }
    let classes = ClassTable::lip();
    for seed in 0..10 {
        let s = synth_sample(seed, 20, (64, 48)).map_err(|e| e.to_string())?;
        let back = flip_sample(&flip_sample(&s, &classes), &classes);
        ensure(
            bitwise_eq(&back.image, &s.image) && back.labels.data == s.labels.data,
            || format!("synthetic sample {seed} changed under flip twice"),
        )?;
    }
    Ok("10 random inputs bitwise equivariant; double flip is the identity on 10 samples".into())
}

// 9 -----------------------------------------------------------------------

fn checkpoint_roundtrip() -> Outcome {
    let cfg = ModelConfig::toy(8, 5, (32, 32));
    let data = SynthDataset::new(40, 8, 5, (32, 32)).map_err(|e| e.to_string())?;
    let mut model = Model::build(&cfg, 3).map_err(|e| e.to_string())?;
    let mut sgd = Sgd::new(&model, 0.9, 5e-4);
    let norm = EvalOptions::default().normalization;
    for b in 0..2 {
        let samples: Vec<_> = (0..4)
            .map(|i| {
                let mut s = data.get(b * 4 + i).expect("sample");
                s.image = norm.normalize(&s.image);
                s
            })
            .collect();
        let (x, l) = collate(&samples).map_err(|e| e.to_string())?;
        train_step(&mut model, &mut sgd, &x, &l, 255, 0.01).map_err(|e| e.to_string())?;
    }
    let state = TrainState {
        iteration: 2,
        epoch: 0,
        momentum: Some(sgd.velocity.clone()),
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = dir.path().join("a.ckpt");
    let second = dir.path().join("b.ckpt");
    save_checkpoint(&first, &model, &state).map_err(|e| e.to_string())?;
    let (loaded, loaded_state) = load_checkpoint(&first, &cfg).map_err(|e| e.to_string())?;
    save_checkpoint(&second, &loaded, &loaded_state).map_err(|e| e.to_string())?;
    let bytes = fs::read(&first).map_err(|e| e.to_string())?;
    ensure(bytes == fs::read(&second).map_err(|e| e.to_string())?, || {
        "save->load->save changed bytes".into()
    })?;
    ensure(loaded_state == state, || "optimiser state changed".into())?;

    let before = evaluate(&model, &data, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let after = evaluate(&loaded, &data, &EvalOptions::default()).map_err(|e| e.to_string())?;
    ensure(before.confusion == after.confusion, || {
        "confusion matrices differ".into()
    })?;
    for i in 0..data.len() {
        let x = norm.normalize(&data.get(i).expect("sample").image);
        let a = model.predict(&x).map_err(|e| e.to_string())?;
        let b = loaded.predict(&x).map_err(|e| e.to_string())?;
        ensure(bitwise_eq(&a, &b), || format!("sample {i}: logits differ"))?;
    }

    // every single-byte corruption past the magic must be rejected
    let mut checksum_hits = 0;
    let step = (bytes.len() / 300).max(1);
    let mut tried = 0;
    for pos in (4..bytes.len()).step_by(step) {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x5a;
        tried += 1;
        match decode_checkpoint(&bad, &cfg) {
            Ok(_) => return Err(format!("flipped byte {pos} of {} went unnoticed", bytes.len())),
            Err(Error::Checkpoint(parsegrid_core::trainer::CheckpointError::Checksum { .. })) => checksum_hits += 1,
            Err(_) => {}
        }
    }
    let mut bad = bytes.clone();
    let last_payload = bytes.len() - 5;
    bad[last_payload] ^= 0x01;
    ensure(
        matches!(
            decode_checkpoint(&bad, &cfg),
            Err(Error::Checkpoint(
                parsegrid_core::trainer::CheckpointError::Checksum { .. }
            ))
        ),
        || "payload flip not reported as a checksum mismatch".into(),
    )?;
    ensure(encode_checkpoint(&loaded, &loaded_state) == bytes, || {
        "in-memory encode differs".into()
    })?;
    Ok(format!(
        "{} bytes identical after save->load->save; predictions bitwise equal; {tried} corruptions rejected ({checksum_hits} by CRC)",
        bytes.len()
    ))
}

// 6 and 10 ------------------------------------------------------------------

struct RunResult {
    seconds: f64,
    stdout: String,
    stderr: String,
    code: Option<i32>,
}

fn run_cli(args: &[&str]) -> RunResult {
    let start = Instant::now();
    let out = Command::new(BIN)
        .args(args)
        .env_remove("PARSEGRID_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("parsegrid binary runs");
    RunResult {
        seconds: start.elapsed().as_secs_f64(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        code: out.status.code(),
    }
}

fn toy_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.cfg")
}

struct ToyRuns {
    ablation: Result<(RunResult, PathBuf), String>,
    by_workers: Vec<(usize, Result<(RunResult, PathBuf), String>)>,
}

fn toy_runs(root: &Path) -> ToyRuns {
    let cfg = toy_config_path();
    let cfg_s = cfg.to_str().expect("utf-8 path").to_string();
    let run_in = |out: &Path, cmd: &str, workers: usize| -> Result<(RunResult, PathBuf), String> {
        let out_flag = format!("--output.dir={}", out.display());
        let w = workers.to_string();
        let r = run_cli(&[cmd, "--config", &cfg_s, &out_flag, "--workers", &w]);
        if r.code != Some(0) {
            return Err(format!(
                "`{cmd} --workers {w}` exited {:?}: {}",
                r.code,
                r.stderr.trim()
            ));
        }
        Ok((r, out.to_path_buf()))
    };
    let ablation = run_in(&root.join("ablate"), "ablate", 1);
    let by_workers = [2, 4]
        .into_iter()
        .map(|w| (w, run_in(&root.join(format!("w{w}")), "train", w)))
        .collect();
    ToyRuns { ablation, by_workers }
}

fn toy_learning(runs: &ToyRuns) -> Outcome {
    let cfg = RunConfig::load(&toy_config_path()).map_err(|e| e.to_string())?;
    ensure(
        cfg.model.use_aspp && cfg.model.use_smooth && cfg.model.use_multiscale_loss,
        || "toy config must enable every module".into(),
    )?;
    ensure(cfg.model.base_width == 32 && cfg.model.num_classes == 5, || {
        "toy config must be 5 classes at base width 32".into()
    })?;
    ensure(cfg.data.synth_count == 200 && cfg.train.epochs == 30, || {
        "toy config must train 200 samples for 30 epochs".into()
    })?;

    let (ab, dir) = runs.ablation.as_ref().map_err(Clone::clone)?;
    let report = dir.join("ablation");
    let table = fs::read_to_string(report.join("ablation.txt")).map_err(|e| e.to_string())?;
    let rows: Vec<serde_json::Value> = fs::read_to_string(report.join("ablation.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    println!("{}", table.trim_end());
    let names: Vec<&str> = rows.iter().filter_map(|r| r["variant"].as_str()).collect();
    ensure(names == ["B", "B+A", "B+S", "B+A+S", "B+S+A+L"], || {
        format!("variants {names:?}")
    })?;
    if let Some(r) = rows.iter().find(|r| r.get("error").is_some()) {
        return Err(format!("variant {} failed: {}", r["variant"], r["error"]));
    }
    let params = |name: &str| {
        rows.iter()
            .find(|r| r["variant"] == name)
            .and_then(|r| r["params"].as_u64())
            .unwrap_or(0)
    };
    let (b, ba, bs) = (params("B"), params("B+A"), params("B+S"));
    ensure(b < ba && b < bs, || {
        format!("parameter counts B {b}, B+A {ba}, B+S {bs}")
    })?;
    ensure(
        table
            .lines()
            .next()
            .is_some_and(|h| h.starts_with("variant") && h.contains("mIoU")),
        || "report header malformed".into(),
    )?;

    let full = rows.last().expect("five rows");
    let miou = full["miou"].as_f64().ok_or("no mIoU")?;
    let initial = full["initial_loss"].as_f64().ok_or("no initial loss")?;
    let final_loss = full["final_loss"].as_f64().ok_or("no final loss")?;
    let ratio = final_loss / initial;
    // the full model's own training time, measured by the 4-worker run
    let seconds = runs
        .by_workers
        .iter()
        .find(|(w, _)| *w == 4)
        .and_then(|(_, r)| r.as_ref().ok())
        .map(|(r, _)| r.seconds);
    let detail = format!(
        "mIoU {:.4}, loss {initial:.4} -> {final_loss:.4} (ratio {ratio:.3}), full run {}s, ablation {:.0}s on {} core(s)",
        miou,
        seconds.map_or("?".into(), |s| format!("{s:.0}")),
        ab.seconds,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    );
    ensure(miou >= 0.90, || format!("training-set mIoU below 0.90: {detail}"))?;
    ensure(ratio < 0.25, || {
        format!("final loss not below a quarter of the initial: {detail}")
    })?;
    let seconds = seconds.ok_or("4-worker run failed")?;
    ensure(seconds <= 900.0, || format!("training exceeded 15 minutes: {detail}"))?;
    Ok(format!("{detail}; params B {b} < B+A {ba}, B {b} < B+S {bs}"))
}

fn determinism(runs: &ToyRuns) -> Outcome {
    let (_, dir) = runs.ablation.as_ref().map_err(Clone::clone)?;
    let reference = dir.join("ablation/B_S_A_L");
    let read = |d: &Path, f: &str| fs::read(d.join(f)).map_err(|e| format!("{}: {e}", d.join(f).display()));
    let log1 = read(&reference, "metrics.jsonl")?;
    let ckpt1 = read(&reference, "final.ckpt")?;
    ensure(!log1.is_empty(), || "empty loss log".into())?;
    for (w, r) in &runs.by_workers {
        let (r, d) = r.as_ref().map_err(Clone::clone)?;
        ensure(r.stdout.contains("final loss"), || {
            format!("workers {w}: unexpected output")
        })?;
        ensure(read(d, "metrics.jsonl")? == log1, || {
            format!("workers {w}: loss log differs from workers 1")
        })?;
        ensure(read(d, "final.ckpt")? == ckpt1, || {
            format!("workers {w}: checkpoint differs from workers 1")
        })?;
    }
    Ok(format!(
        "workers 1, 2, 4: identical {}-line loss logs and {}-byte checkpoints",
        log1.iter().filter(|&&b| b == b'\n').count(),
        ckpt1.len()
    ))
}

// ---------------------------------------------------------------------------

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

fn report(results: &mut Vec<bool>, id: usize, name: &str, outcome: Outcome) {
    match outcome {
        Ok(detail) => {
            println!("[PASS] {id:>2} {name}: {detail}");
            results.push(true);
        }
        Err(detail) => {
            println!("[FAIL] {id:>2} {name}: {detail}");
            results.push(false);
        }
    }
}

fn main() {
    // the test harness passes flags such as --nocapture or a name filter;
    // honour `--list` so test discovery does not start training
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results = Vec::new();
    report(&mut results, 1, "gradient suite", guarded(gradient_suite));
    report(&mut results, 2, "convolution oracle", guarded(convolution_oracle));
    report(&mut results, 3, "ASPP channel trace", guarded(aspp_trace));
    report(&mut results, 4, "loss arithmetic", guarded(loss_arithmetic));
    report(&mut results, 5, "shape contract", guarded(shape_contract));

    let root = tempfile::tempdir().expect("temporary directory");
    println!("training toy runs (ablation at 1 worker, full model at 2 and 4 workers)...");
    let runs = toy_runs(root.path());
    report(
        &mut results,
        6,
        "toy learning and ablation",
        guarded(|| toy_learning(&runs)),
    );
    report(&mut results, 7, "poly learning-rate endpoints", guarded(poly_endpoints));
    report(&mut results, 8, "flip TTA equivariance", guarded(tta_equivariance));
    report(&mut results, 9, "checkpoint round trip", guarded(checkpoint_roundtrip));
    report(
        &mut results,
        10,
        "determinism across workers",
        guarded(|| determinism(&runs)),
    );

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
