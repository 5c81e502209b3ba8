//! Finite-difference checks for every differentiable tape operation and
//! for the full model composite.

mod common;

use adapter_core::ctc::LabelSeq;
use adapter_core::model::{build_model, AdapterConfig, Frontend, Model, Nonlinearity, Positional, Track};
use adapter_core::numerics::{finite_diff_check, Tape, Tensor, Var};
use adapter_core::Result;
use common::{random, rng, small_config};

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Reduces a non-scalar output to a scalar through fixed random weights so
/// every output element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let w = random(&mut rng(seed), tape.value(y).shape(), 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(theta: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let err = finite_diff_check(f, theta, H).unwrap();
    assert!(err < TOL, "relative error {err:e}");
    err
}

#[test]
fn matmul_gradient() {
    let mut r = rng(1);
    let theta = [random(&mut r, &[3, 5], 1.0), random(&mut r, &[5, 4], 1.0)];
    check(&theta, |t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, 10)
    });
}

#[test]
fn add_mul_scale_gradients() {
    let mut r = rng(2);
    let theta = [random(&mut r, &[4, 3], 1.0), random(&mut r, &[4, 3], 1.0)];
    check(&theta, |t, v| {
        let s = t.add(v[0], v[1])?;
        let p = t.mul(s, v[1])?;
        let y = t.scale(p, -1.7);
        weighted_sum(t, y, 11)
    });
}

#[test]
fn add_row_gradient() {
    let mut r = rng(3);
    let theta = [random(&mut r, &[5, 3], 1.0), random(&mut r, &[3], 1.0)];
    check(&theta, |t, v| {
        let y = t.add_row(v[0], v[1])?;
        weighted_sum(t, y, 12)
    });
}

#[test]
fn transpose_gradient() {
    let theta = [random(&mut rng(4), &[3, 6], 1.0)];
    check(&theta, |t, v| {
        let y = t.transpose(v[0])?;
        weighted_sum(t, y, 13)
    });
}

#[test]
fn gelu_gradient() {
    let theta = [random(&mut rng(5), &[4, 6], 3.0)];
    check(&theta, |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, 14)
    });
}

#[test]
fn relu_gradient_away_from_kink() {
    // Keep every input at least 0.1 from zero so central differences
    // never straddle the kink.
    let mut x = random(&mut rng(6), &[4, 5], 2.0);
    for v in x.data_mut() {
        if v.abs() < 0.1 {
            *v += 0.2f64.copysign(*v);
        }
    }
    check(&[x], |t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, 15)
    });
}

#[test]
fn softmax_and_log_softmax_gradients() {
    let theta = [random(&mut rng(7), &[3, 7], 4.0)];
    check(&theta, |t, v| {
        let y = t.softmax(v[0]);
        weighted_sum(t, y, 16)
    });
    check(&theta, |t, v| {
        let y = t.log_softmax(v[0]);
        weighted_sum(t, y, 17)
    });
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(8);
    let theta = [
        random(&mut r, &[5, 6], 2.0),
        random(&mut r, &[6], 1.5),
        random(&mut r, &[6], 1.0),
    ];
    check(&theta, |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        weighted_sum(t, y, 18)
    });
}

#[test]
fn slicing_and_concat_gradients() {
    let theta = [random(&mut rng(9), &[6, 8], 1.0)];
    check(&theta, |t, v| {
        let a = t.slice_cols(v[0], 1, 3)?;
        let b = t.slice_cols(v[0], 5, 3)?;
        let c = t.concat_cols(&[b, a])?;
        let y = t.slice_rows(c, 2, 3)?;
        weighted_sum(t, y, 19)
    });
}

#[test]
fn unfold_gradient() {
    let theta = [random(&mut rng(10), &[9, 3], 1.0)];
    check(&theta, |t, v| {
        let y = t.unfold(v[0], 3, 2)?;
        weighted_sum(t, y, 20)
    });
}

#[test]
fn ctc_gradient_through_log_softmax() {
    let theta = [random(&mut rng(11), &[7, 5], 2.0)];
    let target = LabelSeq::new(vec![1, 1, 3], 4).unwrap();
    check(&theta, |t, v| {
        let lp = t.log_softmax(v[0]);
        t.ctc_loss(lp, &target)
    });
}

/// The parameter vector of a model with every adapter up-projection
/// randomized, so adapter branches carry gradient in both directions.
fn perturbed_params(model: &Model, seed: u64) -> Vec<Tensor> {
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

fn is_key_bias(path: &str) -> bool {
    path.ends_with("attn.k.bias")
}

/// Finite-difference check of the CTC loss through the whole model, with
/// respect to the parameters selected by `keep`; the rest enter as
/// constants.
fn composite(
    model: &Model,
    theta: &[Tensor],
    frames: &Tensor,
    target: &LabelSeq,
    keep: impl Fn(&str) -> bool,
) -> f64 {
    let picked: Vec<usize> = (0..theta.len()).filter(|&i| keep(model.params()[i].path())).collect();
    let sub: Vec<Tensor> = picked.iter().map(|&i| theta[i].clone()).collect();
    finite_diff_check(
        |t, v| {
            let mut vars = Vec::with_capacity(theta.len());
            let mut next = v.iter();
            for (i, th) in theta.iter().enumerate() {
                vars.push(if picked.contains(&i) {
                    *next.next().unwrap()
                } else {
                    t.constant(th.clone())
                });
            }
            let logits = model.forward_on(t, &vars, frames)?;
            let lp = t.log_softmax(logits);
            t.ctc_loss(lp, target)
        },
        &sub,
        H,
    )
    .unwrap()
}

#[test]
fn full_model_with_adapters_and_ctc() {
    let mc = small_config(2);
    let ac = AdapterConfig {
        nonlinearity: Nonlinearity::Gelu,
        ..AdapterConfig::all_layers(2, 3)
    };
    let model = build_model(&mc, Some(&ac), 5).unwrap();
    let theta = perturbed_params(&model, 50);
    let frames = random(&mut rng(51), &[6, 8], 1.0);
    let target = LabelSeq::new(vec![0, 2, 2], 4).unwrap();
    let err = composite(&model, &theta, &frames, &target, |p| !is_key_bias(p));
    assert!(err < TOL, "relative error {err:e}");
}

#[test]
fn conv_frontend_and_learned_positions() {
    let mc = adapter_core::model::ModelConfig {
        num_layers: 1,
        d_model: 4,
        num_heads: 2,
        d_ffn: 6,
        vocab_size: 3,
        d_in: 2,
        frontend: Frontend::ConvStack {
            channels: vec![3],
            kernels: vec![2],
            strides: vec![2],
        },
        max_seq_len: 16,
        positional: Positional::Learned,
    };
    // GELU adapters: the ReLU kink sits inside the tiny initial
    // pre-activations, where central differences are invalid.
    let ac = AdapterConfig::all_layers(1, 2);
    let model = build_model(&mc, Some(&ac), 6).unwrap();
    let theta = perturbed_params(&model, 60);
    let frames = random(&mut rng(61), &[10, 2], 1.0);
    let target = LabelSeq::new(vec![1, 0], 3).unwrap();
    let err = composite(&model, &theta, &frames, &target, |p| !is_key_bias(p));
    assert!(err < TOL, "relative error {err:e}");
}

/// Adding a constant to every key shifts each score row uniformly, which
/// softmax ignores, so the key bias has an exactly zero gradient. The
/// relative-error check is meaningless there (the numeric side is pure
/// roundoff over a 1e-8 floor); assert the zero directly instead.
#[test]
fn key_bias_gradient_is_zero() {
    let mc = small_config(2);
    let model = build_model(&mc, Some(&AdapterConfig::all_layers(2, 3)), 5).unwrap();
    let frames = random(&mut rng(52), &[6, 8], 1.0);
    let target = LabelSeq::new(vec![3, 1], 4).unwrap();
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, Track::All);
    let logits = model.forward_on(&mut tape, &vars, &frames).unwrap();
    let lp = tape.log_softmax(logits);
    let loss = tape.ctc_loss(lp, &target).unwrap();
    tape.backward(loss).unwrap();
    let mut seen = 0;
    for (p, &v) in model.params().iter().zip(&vars) {
        if is_key_bias(p.path()) {
            let g = tape.grad(v).unwrap();
            assert!(g.iter().all(|x| x.abs() < 1e-12), "{}: {g:?}", p.path());
            seen += 1;
        }
    }
    assert_eq!(seen, 2);
}
