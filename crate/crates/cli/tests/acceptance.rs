//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. The transfer criteria train several small
//! models per seed and take a few minutes on one core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use adapter_cli::commands::{self, AblationRow, Method};
use adapter_cli::ExperimentConfig;
use adapter_core::ctc::{ctc_loss, ctc_loss_bruteforce, LabelSeq};
use adapter_core::model::{build_model, insert_adapters, AdapterConfig, Frontend, Model, ModelConfig, Nonlinearity, Positional, Track};
use adapter_core::numerics::{finite_diff_check, ops, Tape, Tensor, Var};
use adapter_core::synthdata::{generate, SynthSpec};
use adapter_core::train::{lr_at, AdamConfig, Schedule, ScheduleKind, TrainConfig, Trainer};
use adapter_core::transfer::{apply_policy, count_params_for, TransferMode, TransferPolicy};
use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        d_model: 8,
        num_heads: 2,
        d_ffn: 16,
        vocab_size: 4,
        d_in: 8,
        frontend: Frontend::Identity,
        max_seq_len: 64,
        positional: Positional::Sinusoidal,
    }
}

// ---- 1: parameter accounting ----

fn base_like_fractions() -> Check {
    let t0 = Instant::now();
    let mc = ModelConfig::base_like();
    let count = |ac: Option<&AdapterConfig>, mode| count_params_for(&mc, ac, &TransferPolicy::new(mode)).unwrap().fraction;
    let ft = count(None, TransferMode::FullFinetune);
    let ad = count(Some(&AdapterConfig::all_layers(12, 256)), TransferMode::Adapter);
    let t6 = count(Some(&AdapterConfig::top_layers(6, 12, 256)), TransferMode::TopNAdapter(6));
    let secs = t0.elapsed().as_secs_f64();
    ensure(
        (0.945..=0.966).contains(&ft) && (0.080..=0.110).contains(&ad) && (0.040..=0.060).contains(&t6) && secs < 1.0,
        format!("finetune {ft:.4}, adapter {ad:.4}, top-6 adapter {t6:.4} in {secs:.3}s"),
    )
}

// ---- 2: CTC against enumeration ----

fn ctc_oracle() -> Check {
    let mut r = rng(2);
    let (mut n, mut worst) = (0, 0.0f64);
    while n < 600 {
        let v = r.random_range(1..=4usize);
        let t = r.random_range(1..=6usize);
        let l = r.random_range(1..=3usize.min(t));
        let target = LabelSeq::new((0..l).map(|_| r.random_range(0..v)).collect(), v).unwrap();
        if target.min_frames() > t {
            continue;
        }
        let lp = ops::log_softmax(&random(&mut r, &[t, v + 1], 4.0));
        let fast = ctc_loss(&lp, &target).unwrap();
        let slow = ctc_loss_bruteforce(&lp, &target).unwrap();
        if fast < 0.0 {
            return Err(format!("negative loss {fast}"));
        }
        worst = worst.max((fast - slow).abs());
        n += 1;
    }
    ensure(worst < 1e-10, format!("{n} instances, max |diff| {worst:e}"))
}

// ---- 3: gradients ----

fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> adapter_core::Result<Var> {
    let w = random(&mut rng(seed), tape.value(y).shape(), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn perturbed(model: &Model, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    model
        .params()
        .iter()
        .map(|p| {
            if p.spec().component.is_adapter() && p.path().contains(".up.") {
                random(&mut r, p.tensor().shape(), 0.3)
            } else {
                p.tensor().clone()
            }
        })
        .collect()
}

/// Relative error of the model's CTC gradient for every parameter except
/// the attention key biases, whose gradient is identically zero.
fn model_error(model: &Model, frames: &Tensor, target: &LabelSeq, seed: u64) -> f64 {
    let theta = perturbed(model, seed);
    let keep: Vec<bool> = model.params().iter().map(|p| !p.path().ends_with("attn.k.bias")).collect();
    let sub: Vec<Tensor> = theta.iter().zip(&keep).filter(|(_, &k)| k).map(|(t, _)| t.clone()).collect();
    finite_diff_check(
        |t, v| {
            let mut next = v.iter();
            let vars: Vec<Var> = theta
                .iter()
                .zip(&keep)
                .map(|(th, &k)| if k { *next.next().unwrap() } else { t.constant(th.clone()) })
                .collect();
            let logits = model.forward_on(t, &vars, frames)?;
            let lp = t.log_softmax(logits);
            t.ctc_loss(lp, target)
        },
        &sub,
        1e-5,
    )
    .unwrap()
}

fn key_bias_gradient(model: &Model, frames: &Tensor, target: &LabelSeq) -> f64 {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Track::All);
    let logits = model.forward_on(&mut tape, &vars, frames).unwrap();
    let lp = tape.log_softmax(logits);
    let loss = tape.ctc_loss(lp, target).unwrap();
    tape.backward(loss).unwrap();
    model
        .params()
        .iter()
        .zip(&vars)
        .filter(|(p, _)| p.path().ends_with("attn.k.bias"))
        .flat_map(|(_, &v)| tape.grad(v).unwrap().to_vec())
        .fold(0.0, |m, g: f64| m.max(g.abs()))
}

fn gradients() -> Check {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> adapter_core::Result<Var>>;
    let mut r = rng(3);
    let mut kinkless = random(&mut r, &[4, 5], 2.0);
    for v in kinkless.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    let target = LabelSeq::new(vec![1, 1, 3], 4).unwrap();
    let cases: Vec<(&str, Vec<Tensor>, Op)> = vec![
        ("matmul", vec![random(&mut r, &[3, 5], 1.0), random(&mut r, &[5, 4], 1.0)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, 10)
        })),
        ("add/mul/scale", vec![random(&mut r, &[4, 3], 1.0), random(&mut r, &[4, 3], 1.0)], Box::new(|t, v| {
            let s = t.add(v[0], v[1])?;
            let p = t.mul(s, v[1])?;
            let y = t.scale(p, -1.7);
            weighted_sum(t, y, 11)
        })),
        ("add_row", vec![random(&mut r, &[5, 3], 1.0), random(&mut r, &[3], 1.0)], Box::new(|t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, 12)
        })),
        ("transpose", vec![random(&mut r, &[3, 6], 1.0)], Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y, 13)
        })),
        ("gelu", vec![random(&mut r, &[4, 6], 3.0)], Box::new(|t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y, 14)
        })),
        ("relu", vec![kinkless], Box::new(|t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y, 15)
        })),
        ("softmax", vec![random(&mut r, &[3, 7], 4.0)], Box::new(|t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y, 16)
        })),
        ("log_softmax", vec![random(&mut r, &[3, 7], 4.0)], Box::new(|t, v| {
            let y = t.log_softmax(v[0]);
            weighted_sum(t, y, 17)
        })),
        ("layer_norm", vec![random(&mut r, &[5, 6], 2.0), random(&mut r, &[6], 1.5), random(&mut r, &[6], 1.0)], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, 18)
        })),
        ("slice/concat", vec![random(&mut r, &[6, 8], 1.0)], Box::new(|t, v| {
            let a = t.slice_cols(v[0], 1, 3)?;
            let b = t.slice_cols(v[0], 5, 3)?;
            let c = t.concat_cols(&[b, a])?;
            let y = t.slice_rows(c, 2, 3)?;
            weighted_sum(t, y, 19)
        })),
        ("unfold", vec![random(&mut r, &[9, 3], 1.0)], Box::new(|t, v| {
            let y = t.unfold(v[0], 3, 2)?;
            weighted_sum(t, y, 20)
        })),
        ("ctc", vec![random(&mut r, &[7, 5], 2.0)], Box::new(move |t, v| {
            let lp = t.log_softmax(v[0]);
            t.ctc_loss(lp, &target)
        })),
    ];
    let mut worst = ("", 0.0f64);
    for (name, theta, f) in &cases {
        let e = finite_diff_check(f, theta, 1e-5).unwrap();
        if e > worst.1 {
            worst = (name, e);
        }
    }

    let ac = AdapterConfig { nonlinearity: Nonlinearity::Gelu, ..AdapterConfig::all_layers(2, 3) };
    let model = build_model(&small(2), Some(&ac), 5).unwrap();
    let frames = random(&mut rng(51), &[6, 8], 1.0);
    let labels = LabelSeq::new(vec![0, 2, 2], 4).unwrap();
    let composite = model_error(&model, &frames, &labels, 50);
    let key_bias = key_bias_gradient(&model, &frames, &labels);

    let conv = ModelConfig {
        num_layers: 1,
        d_model: 4,
        num_heads: 2,
        d_ffn: 6,
        vocab_size: 3,
        d_in: 2,
        frontend: Frontend::ConvStack { channels: vec![3], kernels: vec![2], strides: vec![2] },
        max_seq_len: 16,
        positional: Positional::Learned,
    };
    let conv_model = build_model(&conv, Some(&AdapterConfig::all_layers(1, 2)), 6).unwrap();
    let conv_err = model_error(&conv_model, &random(&mut rng(61), &[10, 2], 1.0), &LabelSeq::new(vec![1, 0], 3).unwrap(), 60);

    ensure(
        worst.1 < 1e-4 && composite < 1e-4 && conv_err < 1e-4 && key_bias < 1e-12,
        format!(
            "{} ops, worst {} {:.1e}; model {composite:.1e}; conv model {conv_err:.1e}; key bias |g| {key_bias:.1e}",
            cases.len(),
            worst.0,
            worst.1
        ),
    )
}

// ---- 4: function preservation ----

fn preservation() -> Check {
    let mut r = rng(4);
    let mut checked = 0;
    for (layers, ac) in [(3, AdapterConfig::all_layers(3, 5)), (4, AdapterConfig::top_layers(2, 4, 3))] {
        let base = build_model(&small(layers), None, 40 + layers as u64).unwrap();
        let adapted = insert_adapters(&base, &ac, 7).unwrap();
        for i in 0..100 {
            let x = random(&mut r, &[1 + i % 20, 8], 3.0);
            if base.forward(&x).unwrap().data() != adapted.forward(&x).unwrap().data() {
                return Err(format!("outputs differ on input {i} ({layers} layers)"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} inputs bitwise identical"))
}

// ---- 5: frozen parameters stay frozen ----

fn trainer(policy: TransferPolicy, steps: usize) -> Trainer {
    Trainer::new(TrainConfig {
        policy,
        schedule: Schedule { kind: ScheduleKind::bi_stage(), peak_lr: 1e-2, total_steps: steps },
        batch_size: 4,
        seed: 5,
        adam: AdamConfig::default(),
        grad_clip: None,
    })
    .unwrap()
}

fn snapshot(m: &Model) -> Vec<Tensor> {
    m.params().iter().map(|p| p.tensor().clone()).collect()
}

fn freezing() -> Check {
    let data = generate(&SynthSpec {
        vocab_size: 4,
        d_in: 8,
        frames_per_token: [2, 3],
        noise_sigma: 0.05,
        utterance_len: [2, 4],
        num_utterances: 24,
        seed: 5,
        language_tag: "A".into(),
        prototype_seed: None,
    })
    .unwrap();
    let batch: Vec<_> = data.utterances.iter().take(4).collect();
    let modes = [
        TransferMode::FullFinetune,
        TransferMode::Adapter,
        TransferMode::LayerNormOnly,
        TransferMode::TopNFinetune(1),
        TransferMode::TopNAdapter(1),
    ];
    for mode in modes {
        let ac = mode.needs_adapters().then(|| AdapterConfig::all_layers(2, 2));
        let mut m = build_model(&small(2), ac.as_ref(), 1).unwrap();
        let before = snapshot(&m);
        let policy = TransferPolicy::new(mode);
        let mut tr = trainer(policy, 60);
        for _ in 0..50 {
            tr.train_step(&mut m, &batch).unwrap();
        }
        let mut flags = m.clone();
        apply_policy(&mut flags, &policy, 49).unwrap();
        for ((p, b), f) in m.params().iter().zip(&before).zip(flags.params()) {
            if !f.trainable() && p.tensor() != b {
                return Err(format!("{mode}: frozen {} moved", p.path()));
            }
        }
    }

    let mut m = build_model(&small(2), None, 1).unwrap();
    let body = |m: &Model| -> Vec<Tensor> {
        m.params().iter().filter(|p| p.spec().layer.is_some()).map(|p| p.tensor().clone()).collect()
    };
    let initial = body(&m);
    let mut tr = trainer(TransferPolicy::new(TransferMode::FullFinetune).with_freeze_steps(20), 60);
    for _ in 0..20 {
        tr.train_step(&mut m, &batch).unwrap();
    }
    let held = body(&m) == initial;
    for _ in 20..31 {
        tr.train_step(&mut m, &batch).unwrap();
    }
    let moved = body(&m) != initial;
    ensure(held && moved, format!("5 policies x 50 steps; freeze 20: unchanged through step 19 {held}, changed by step 30 {moved}"))
}

// ---- 6: schedules ----

fn expected_lr(kind: ScheduleKind, peak: f64, total: usize, step: usize) -> f64 {
    let (s, n) = (step as f64, total as f64);
    match kind {
        ScheduleKind::BiStage { warmup_frac } => {
            let w = warmup_frac * n;
            if s <= w { peak * s / w } else { peak * (n - s) / (n - w) }
        }
        ScheduleKind::TriStage { warmup_frac, hold_frac, final_scale } => {
            let (w, h) = (warmup_frac * n, hold_frac * n);
            if s <= w {
                peak * s / w
            } else if s <= w + h {
                peak
            } else {
                peak * final_scale.powf((s - w - h) / (n - w - h))
            }
        }
    }
}

fn schedules() -> Check {
    let bi = Schedule { kind: ScheduleKind::bi_stage(), peak_lr: 5e-4, total_steps: 10_000 };
    let tri = Schedule { kind: ScheduleKind::tri_stage(), peak_lr: 5e-5, total_steps: 20_000 };
    let points = [
        (bi, 0),
        (bi, 500),
        (bi, 1000),
        (bi, 5500),
        (bi, 10_000),
        (tri, 1000),
        (tri, 2000),
        (tri, 10_000),
        (tri, 15_000),
        (tri, 20_000),
    ];
    let mut worst = 0.0f64;
    for (s, step) in points {
        let got = lr_at(&s, step).unwrap();
        let want = expected_lr(s.kind, s.peak_lr, s.total_steps, step);
        let err = if want == 0.0 { got.abs() } else { ((got - want) / want).abs() };
        worst = worst.max(err);
    }
    let anchors = lr_at(&bi, 1000).unwrap() == 5e-4
        && lr_at(&tri, 2000).unwrap() == 5e-5
        && lr_at(&tri, 10_000).unwrap() == 5e-5
        && ((lr_at(&tri, 20_000).unwrap() - 2.5e-6) / 2.5e-6).abs() < 1e-12;
    ensure(worst <= 1e-12 && anchors, format!("{} points, max relative error {worst:.1e}, anchors {anchors}", points.len()))
}

// ---- 7-9: transfer on the toy language pair ----

const LAYERS: usize = 4;
const PRETRAIN_STEPS: usize = 1500;
const ADAPTER_STEPS: usize = 600;
const ADAPTER_LR: f64 = 3e-3;

struct SeedResult {
    seed: u64,
    pretrain_wer: f64,
    finetune_wer: f64,
    adapter_wer: f64,
    layernorm_wer: f64,
    finetune_trainable: usize,
    adapter_trainable: usize,
    ablation: Vec<AblationRow>,
}

impl SeedResult {
    fn ablation_wers(&self, method: Method) -> Vec<f64> {
        self.ablation.iter().filter(|r| r.method == method).map(|r| r.wer).collect()
    }
}

fn toy_model() -> String {
    model_section(LAYERS, 32, 4, 64, 8)
}

fn spec(dir: &Path, name: &str, text: String) -> std::path::PathBuf {
    let spec = write(dir, &format!("{name}.toml"), &text);
    let out = dir.join(format!("{name}.synd"));
    commands::synth(&spec, &out, None).unwrap();
    out
}

fn transfer_seed(seed: u64) -> SeedResult {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let a_train = spec(p, "a_train", synth_spec(8, 32, 2000, seed, "A", seed));
    let a_test = spec(p, "a_test", synth_spec(8, 32, 200, seed + 1000, "A", seed));
    let b_train = spec(p, "b_train", synth_spec(8, 32, 500, seed + 2000, "B", seed));
    let b_test = spec(p, "b_test", synth_spec(8, 32, 200, seed + 3000, "B", seed));

    let train = |name: &str, text: String| -> (ExperimentConfig, std::path::PathBuf, usize) {
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let out = p.join(format!("{name}.ckpt"));
        let t0 = Instant::now();
        let o = commands::train(&cfg, &b_or_a(name, &a_train, &b_train), &out).unwrap();
        eprintln!("  seed {seed} {name}: {:.1}s", t0.elapsed().as_secs_f64());
        (cfg, out, o.report.trainable)
    };
    fn b_or_a(name: &str, a: &Path, b: &Path) -> std::path::PathBuf {
        if name == "pretrain" { a.to_path_buf() } else { b.to_path_buf() }
    }

    let pre = Run { steps: PRETRAIN_STEPS, peak_lr: ADAPTER_LR, seed, ..Run::default() };
    let (cfg, base, _) = train("pretrain", experiment(&toy_model(), None, &pre, ""));
    let pretrain_wer = commands::eval(&cfg, &base, &a_test).unwrap().wer;

    let finetune_run = Run {
        freeze: ADAPTER_STEPS * 2 / 5,
        base: Some(&base),
        schedule: TRI,
        peak_lr: ADAPTER_LR / 10.0,
        steps: ADAPTER_STEPS * 2,
        seed,
        ..Run::default()
    };
    let adapter_run = Run { mode: "adapter", base: Some(&base), peak_lr: ADAPTER_LR, steps: ADAPTER_STEPS, seed, ..Run::default() };
    let layernorm_run = Run { mode: "layernorm_only", ..adapter_run };

    let (cfg, ck, finetune_trainable) = train("finetune", experiment(&toy_model(), None, &finetune_run, ""));
    let finetune_wer = commands::eval(&cfg, &ck, &b_test).unwrap().wer;
    let (cfg, ck, adapter_trainable) = train("adapter", experiment(&toy_model(), Some("bottleneck = 4"), &adapter_run, ""));
    let adapter_wer = commands::eval(&cfg, &ck, &b_test).unwrap().wer;
    let (cfg, ck, _) = train("layernorm", experiment(&toy_model(), None, &layernorm_run, ""));
    let layernorm_wer = commands::eval(&cfg, &ck, &b_test).unwrap().wer;

    let ablate = format!(
        "\n[ablate.adapter]\nschedule = {BI}\npeak_lr = {ADAPTER_LR:e}\ntotal_steps = {ADAPTER_STEPS}\n\
         \n[ablate.finetune]\nschedule = {TRI}\npeak_lr = {:e}\ntotal_steps = {}\nfreeze_transformer_steps = {}\n",
        ADAPTER_LR / 10.0,
        ADAPTER_STEPS * 2,
        ADAPTER_STEPS * 2 / 5
    );
    let cfg = ExperimentConfig::parse(&experiment(&toy_model(), Some("bottleneck = 4"), &Run { base: Some(&base), seed, ..Run::default() }, &ablate)).unwrap();
    let t0 = Instant::now();
    let load = |p: &Path| adapter_core::synthdata::Dataset::load(p).unwrap();
    let ablation = commands::ablate(&cfg, &load(&b_train), &load(&b_test), &[1, 2, 4]).unwrap();
    eprintln!("  seed {seed} ablation: {:.1}s", t0.elapsed().as_secs_f64());

    SeedResult {
        seed,
        pretrain_wer,
        finetune_wer,
        adapter_wer,
        layernorm_wer,
        finetune_trainable,
        adapter_trainable,
        ablation,
    }
}

fn majority(results: &[SeedResult], per_seed: impl Fn(&SeedResult) -> (bool, String)) -> Check {
    let mut passed = 0;
    let mut parts = Vec::new();
    for r in results {
        let (ok, detail) = per_seed(r);
        passed += usize::from(ok);
        parts.push(format!("seed {} {}: {detail}", r.seed, if ok { "ok" } else { "miss" }));
    }
    ensure(2 * passed > results.len(), format!("{passed}/{} seeds [{}]", results.len(), parts.join("; ")))
}

fn transfer_quality(results: &[SeedResult]) -> Check {
    majority(results, |r| {
        let ratio = r.finetune_trainable as f64 / r.adapter_trainable as f64;
        let ok = r.pretrain_wer < 0.05 && r.adapter_wer <= r.finetune_wer + 0.10 && ratio >= 10.0;
        (
            ok,
            format!(
                "A {:.4}, finetune {:.4}, adapter {:.4}, {ratio:.1}x fewer trainable",
                r.pretrain_wer, r.finetune_wer, r.adapter_wer
            ),
        )
    })
}

fn layernorm_gap(results: &[SeedResult]) -> Check {
    majority(results, |r| {
        let gap = r.layernorm_wer - r.adapter_wer;
        (gap >= 0.10, format!("layernorm {:.4} - adapter {:.4} = {gap:.4}", r.layernorm_wer, r.adapter_wer))
    })
}

fn ablation_shape(results: &[SeedResult]) -> Check {
    majority(results, |r| {
        let ft = r.ablation_wers(Method::TopnFinetune);
        let ad = r.ablation_wers(Method::TopnAdapter);
        let monotone = |w: &[f64]| w.windows(2).all(|p| p[1] <= p[0] + 0.02);
        let ok = ad[0] <= ft[0] && monotone(&ft) && monotone(&ad);
        let fmt = |w: &[f64]| w.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
        (ok, format!("n=1,2,4 finetune {} adapter {}", fmt(&ft), fmt(&ad)))
    })
}

// ---- 10: reproducible binary runs ----

fn reproducible() -> Check {
    let dir = TempDir::new().unwrap();
    let p = dir.path();
    let go = |args: &[&str]| {
        let o = run(args);
        if code(&o) != 0 {
            panic!("{args:?} failed: {}", stderr(&o));
        }
    };
    let spec = write(p, "spec.toml", &synth_spec(4, 8, 24, 3, "R", 3));
    let model = model_section(2, 8, 2, 16, 4);
    let base_cfg = write(p, "base.toml", &experiment(&model, None, &Run { steps: 15, ..Run::default() }, "\n[data]\neval_fraction = 0.25\n"));
    let base = p.join("base.ckpt");
    let ablate = format!(
        "\n[ablate.adapter]\nschedule = {BI}\npeak_lr = 3e-3\ntotal_steps = 6\n\
         \n[ablate.finetune]\nschedule = {TRI}\npeak_lr = 3e-4\ntotal_steps = 8\nfreeze_transformer_steps = 2\n"
    );
    let ad_cfg = write(p, "ad.toml", &experiment(&model, Some("bottleneck = 2"), &Run { mode: "adapter", base: Some(&base), steps: 10, ..Run::default() }, &ablate));
    let data = p.join("d.synd");
    go(&["synth", "--config", s(&spec), "--out", s(&data)]);
    go(&["train", "--config", s(&base_cfg), "--data", s(&data), "--out", s(&base)]);

    let outputs = |tag: &str| -> Vec<Vec<u8>> {
        let f = |name: &str| p.join(format!("{tag}.{name}"));
        go(&["synth", "--config", s(&spec), "--out", s(&f("synd"))]);
        go(&["train", "--config", s(&ad_cfg), "--data", s(&data), "--out", s(&f("ckpt"))]);
        go(&["eval", "--config", s(&ad_cfg), "--checkpoint", s(&f("ckpt")), "--data", s(&data), "--out", s(&f("eval_out.csv"))]);
        go(&["ablate", "--config", s(&ad_cfg), "--data", s(&data), "--eval", s(&data), "--out", s(&f("ablate.csv")), "--n", "1,2"]);
        go(&["params", "--config", s(&ad_cfg), "--out", s(&f("params.csv"))]);
        ["synd", "ckpt", "metrics.csv", "eval.csv", "eval_out.csv", "ablate.csv", "params.csv"]
            .iter()
            .map(|n| std::fs::read(f(n)).unwrap())
            .collect()
    };
    let first = outputs("one");
    let second = outputs("two");
    ensure(first == second, format!("{} artifacts compared byte for byte", first.len()))
}

fn main() -> ExitCode {
    let mut results: Vec<(u32, &str, Check)> = Vec::new();
    let mut record = |id: u32, name: &'static str, f: &dyn Fn() -> Check| {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            Err(e.downcast_ref::<String>().cloned().or(e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        eprintln!("criterion {id} done in {:.1}s", t0.elapsed().as_secs_f64());
        results.push((id, name, r));
    };
    record(1, "parameter accounting", &base_like_fractions);
    record(2, "ctc matches enumeration", &ctc_oracle);
    record(3, "gradients match finite differences", &gradients);
    record(4, "adapter insertion preserves the function", &preservation);
    record(5, "frozen parameters stay frozen", &freezing);
    record(6, "learning-rate schedules", &schedules);

    let t0 = Instant::now();
    let transfer = catch_unwind(|| (1..=3).map(transfer_seed).collect::<Vec<_>>());
    eprintln!("transfer runs done in {:.1}s", t0.elapsed().as_secs_f64());
    let with = |f: fn(&[SeedResult]) -> Check| -> Check {
        match &transfer {
            Ok(r) => f(r),
            Err(_) => Err("transfer runs panicked".into()),
        }
    };
    results.push((7, "adapters approach fine-tuning", with(transfer_quality)));
    results.push((8, "adapters beat layer-norm-only", with(layernorm_gap)));
    results.push((9, "top-n ablation shape", with(ablation_shape)));
    let r10 = catch_unwind(reproducible).unwrap_or_else(|_| Err("panicked".into()));
    results.push((10, "byte-identical re-runs", r10));

    let mut failed = 0;
    for (id, name, r) in &results {
        match r {
            Ok(d) => println!("criterion {id:2} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:2} FAIL  {name}: {d}");
            }
        }
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
