//! Finite-difference checks for every tape primitive and for the model's
//! composite functions.

use ccm_core::autodiff::{lstm_step, LstmVars, Tape, Tensor, Var};
use ccm_core::correlated::{adversarial_losses, discriminate, embed_real_answer, embed_real_explanation, total_loss_var, DiscVars, Variant};
use ccm_core::data::{generate_dataset, ToyConfig};
use ccm_core::encoder::{attention_fuse, encode_question, EncoderVars};
use ccm_core::generator::{
    answer_embedding, answer_loss, decode_teacher_forced, generator_forward, predict_answer, soft_answer_embedding, Condition, GeneratorVars,
};
use ccm_core::model::{Batch, CcmModel, HiddenSizes};
use ccm_core::params::Bindings;
use ccm_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Initial step of the extrapolation.
pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
pub const POINTS: u64 = 10;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var, Error>;
pub type ModelBuild = dyn Fn(&mut Tape, &Bindings, &Batch) -> Result<Var, Error>;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Ridders' extrapolation of central differences of `f` at 0: shrinks the
/// step geometrically and keeps the estimate with the smallest error bound.
fn ridders(f: impl Fn(f64) -> f64) -> f64 {
    const SHRINK: f64 = 1.4;
    const TABLE: usize = 10;
    let mut h = STEP;
    let mut a = [[0.0f64; TABLE]; TABLE];
    a[0][0] = (f(h) - f(-h)) / (2.0 * h);
    let mut best = a[0][0];
    let mut err = f64::MAX;
    for i in 1..TABLE {
        h /= SHRINK;
        a[0][i] = (f(h) - f(-h)) / (2.0 * h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (a[j][i] - a[j - 1][i]).abs().max((a[j][i] - a[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = a[j][i];
            }
        }
        if (a[i][i] - a[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}

pub fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Scalar `sum(out * w)` for a fixed random `w`.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, Error> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p)?)
}

/// Worst relative error over every coordinate of every input.
pub fn fd_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let root = build(&mut tape, &vars).unwrap();
    let grads = tape.backward(root).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = ins.iter().map(|x| t.param(x.clone())).collect();
        let r = build(&mut t, &vs).unwrap();
        t.value(r).item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.numel()]);
        for (j, a) in analytic.iter().enumerate() {
            let at = |d: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[j] += d;
                eval(&moved)
            };
            worst = worst.max(rel_err(*a, ridders(at)));
        }
    }
    worst
}

pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub range: (f64, f64),
    pub build: Box<Build>,
}

fn case(name: &'static str, shapes: Vec<Vec<usize>>, range: (f64, f64), build: impl Fn(&mut Tape, &[Var]) -> Result<Var, Error> + 'static) -> Case {
    Case {
        name,
        shapes,
        range,
        build: Box::new(build),
    }
}

pub fn primitive_cases() -> Vec<Case> {
    let ws = weighted_sum;
    vec![
        case("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            ws(t, o, 1)
        }),
        case("add", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), move |t, v| {
            let o = t.add(v[0], v[1])?;
            ws(t, o, 2)
        }),
        case("add_bias", vec![vec![3, 4], vec![4]], (-1.0, 1.0), move |t, v| {
            let o = t.add(v[0], v[1])?;
            ws(t, o, 3)
        }),
        case("sub", vec![vec![2, 5], vec![2, 5]], (-1.0, 1.0), move |t, v| {
            let o = t.sub(v[0], v[1])?;
            ws(t, o, 4)
        }),
        case("mul", vec![vec![2, 5], vec![2, 5]], (-1.0, 1.0), move |t, v| {
            let o = t.mul(v[0], v[1])?;
            ws(t, o, 5)
        }),
        case("scale_rows", vec![vec![3, 4], vec![3, 1]], (-1.0, 1.0), move |t, v| {
            let o = t.scale_rows(v[0], v[1])?;
            ws(t, o, 6)
        }),
        case("scale", vec![vec![6]], (-1.0, 1.0), move |t, v| {
            let o = t.scale(v[0], -2.5)?;
            ws(t, o, 7)
        }),
        case("tanh", vec![vec![2, 3]], (-2.0, 2.0), move |t, v| {
            let o = t.tanh(v[0])?;
            ws(t, o, 8)
        }),
        case("sigmoid", vec![vec![2, 3]], (-3.0, 3.0), move |t, v| {
            let o = t.sigmoid(v[0])?;
            ws(t, o, 9)
        }),
        case("relu", vec![vec![2, 3]], (-1.0, 1.0), move |t, v| {
            let o = t.relu(v[0])?;
            ws(t, o, 10)
        }),
        case("softmax_rows", vec![vec![3, 4]], (-2.0, 2.0), move |t, v| {
            let o = t.softmax(v[0], 1)?;
            ws(t, o, 11)
        }),
        case("softmax_cols", vec![vec![3, 4]], (-2.0, 2.0), move |t, v| {
            let o = t.softmax(v[0], 0)?;
            ws(t, o, 12)
        }),
        case("signed_sqrt", vec![vec![2, 4]], (0.2, 2.0), move |t, v| {
            let n = t.scale(v[0], -1.0)?;
            let c = t.concat(&[v[0], n], 1)?;
            let o = t.signed_sqrt(c)?;
            ws(t, o, 13)
        }),
        case("l2_normalize", vec![vec![3, 4]], (-1.0, 1.0), move |t, v| {
            let o = t.l2_normalize(v[0], 1)?;
            ws(t, o, 14)
        }),
        case("concat_cols", vec![vec![2, 3], vec![2, 2]], (-1.0, 1.0), move |t, v| {
            let o = t.concat(&[v[0], v[1]], 1)?;
            ws(t, o, 15)
        }),
        case("concat_rows", vec![vec![2, 3], vec![1, 3]], (-1.0, 1.0), move |t, v| {
            let o = t.concat(&[v[0], v[1]], 0)?;
            ws(t, o, 16)
        }),
        case("ln", vec![vec![5]], (0.3, 3.0), move |t, v| {
            let o = t.ln(v[0])?;
            ws(t, o, 17)
        }),
        case("cross_entropy", vec![vec![3, 5]], (-2.0, 2.0), |t, v| {
            Ok(t.cross_entropy(v[0], &[1, 4, 0], &[0.5, 1.0, 0.25])?)
        }),
        case("mean", vec![vec![2, 3]], (-1.0, 1.0), |t, v| {
            let s = t.mul(v[0], v[0])?;
            Ok(t.mean(s)?)
        }),
        case("sum", vec![vec![2, 3]], (-1.0, 1.0), |t, v| {
            let s = t.tanh(v[0])?;
            Ok(t.sum(s)?)
        }),
        case("clamp", vec![vec![8]], (-2.0, 2.0), move |t, v| {
            let o = t.clamp(v[0], -0.9, 0.9)?;
            ws(t, o, 18)
        }),
        case("reshape", vec![vec![2, 6]], (-1.0, 1.0), move |t, v| {
            let o = t.reshape(v[0], vec![3, 4])?;
            let o = t.softmax(o, 1)?;
            ws(t, o, 19)
        }),
        case("repeat_rows", vec![vec![2, 3]], (-1.0, 1.0), move |t, v| {
            let o = t.repeat_rows(v[0], 3)?;
            ws(t, o, 20)
        }),
        case("segment_sum", vec![vec![6, 2]], (-1.0, 1.0), move |t, v| {
            let o = t.segment_sum(v[0], 3)?;
            ws(t, o, 21)
        }),
        case("slice_cols", vec![vec![3, 5]], (-1.0, 1.0), move |t, v| {
            let o = t.slice_cols(v[0], 1, 3)?;
            ws(t, o, 22)
        }),
        case("gather", vec![vec![4, 3]], (-1.0, 1.0), move |t, v| {
            let o = t.gather(v[0], &[2, 0, 2, 3])?;
            ws(t, o, 23)
        }),
        case(
            "lstm_step",
            vec![vec![2, 3], vec![2, 4], vec![2, 4], vec![7, 16], vec![16]],
            (-1.0, 1.0),
            move |t, v| {
                let cell = LstmVars { weight: v[3], bias: v[4] };
                let (h, c) = lstm_step(t, v[0], v[1], v[2], cell)?;
                let a = ws(t, h, 24)?;
                let b = ws(t, c, 25)?;
                Ok(t.add(a, b)?)
            },
        ),
    ]
}

/// Worst error per tensor-level case over the seeded points.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    primitive_cases()
        .iter()
        .map(|c| {
            let worst = (0..POINTS)
                .map(|seed| {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                    let inputs: Vec<Tensor> = c.shapes.iter().map(|s| random(&mut rng, s, c.range.0, c.range.1)).collect();
                    fd_error(&inputs, c.build.as_ref())
                })
                .fold(0.0, f64::max);
            (c.name, worst)
        })
        .collect()
}

pub fn tiny_hidden() -> HiddenSizes {
    HiddenSizes {
        word_dim: 3,
        question_hidden: 4,
        fusion_dim: 4,
        attention_hidden: 3,
        answer_hidden: 4,
        answer_embed: 3,
        decoder_hidden: 4,
        disc_hidden: 3,
        max_len: 12,
    }
}

/// A tiny model and a three-instance batch for seeded point `seed`.
pub fn tiny_point(seed: u64) -> (CcmModel, Batch) {
    let ds = generate_dataset(3, 500 + seed, ToyConfig::default()).unwrap();
    let mut model = CcmModel::new(&ds, tiny_hidden(), "ccm", 700 + seed).unwrap();
    // Move off the zero-initialised biases so no ReLU sits exactly on its kink.
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        for v in model.params.get_mut(&name).unwrap().data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    let batch = Batch::from_instances(&ds.instances).unwrap();
    (model, batch)
}

/// Worst relative error over `per_param` sampled coordinates of every parameter.
pub fn model_fd_error(model: &CcmModel, batch: &Batch, build: &ModelBuild, per_param: usize, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let bind = Bindings::new(&mut tape, &model.params, |_| true);
    let root = build(&mut tape, &bind, batch).unwrap();
    let grads = bind.collect(&tape, &tape.backward(root).unwrap());
    let eval = |m: &CcmModel| {
        let mut t = Tape::new();
        let b = Bindings::new(&mut t, &m.params, |_| false);
        let r = build(&mut t, &b, batch).unwrap();
        t.value(r).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let names: Vec<String> = model.params.names().map(String::from).collect();
    for name in names {
        let numel = model.params.get(&name).unwrap().numel();
        for _ in 0..per_param.min(numel) {
            let j = rng.random_range(0..numel);
            let analytic = grads.get(&name).map(|g| g.data()[j]).unwrap_or(0.0);
            let at = |d: f64| {
                let mut moved = model.clone();
                moved.params.get_mut(&name).unwrap().data_mut()[j] += d;
                eval(&moved)
            };
            worst = worst.max(rel_err(analytic, ridders(at)));
        }
    }
    worst
}

fn fused(tape: &mut Tape, b: &Bindings, batch: &Batch) -> Result<(EncoderVars, GeneratorVars, Var, Var), Error> {
    let enc = EncoderVars::bind(b)?;
    let gen = GeneratorVars::bind(b)?;
    let g_q = encode_question(tape, &enc, &batch.questions)?;
    let feats = tape.constant(batch.features.clone());
    let att = attention_fuse(tape, &enc, feats, batch.regions, g_q)?;
    Ok((enc, gen, att.g_f, att.alpha))
}

fn disc_scores(tape: &mut Tape, b: &Bindings, batch: &Batch, variant: Variant, seed: u64) -> Result<Var, Error> {
    let d = DiscVars::bind(b)?;
    let (enc, gen, _, _) = fused(tape, b, batch)?;
    let fwd = generator_forward(tape, &enc, &gen, batch, Condition::Predicted)?;
    let ra = embed_real_answer(tape, &d, &batch.answers)?;
    let re = embed_real_explanation(tape, &d, &batch.explanations)?;
    let mut heads = discriminate(tape, &d, variant, Some(ra), Some(re))?;
    heads.extend(discriminate(tape, &d, variant, Some(fwd.answer_feature), Some(fwd.explanation_feature))?);
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (k, h) in heads.into_iter().enumerate() {
        let s = weighted_sum(tape, h, seed + k as u64)?;
        total = tape.add(total, s)?;
    }
    Ok(total)
}

pub fn composite_cases() -> Vec<(&'static str, Box<ModelBuild>)> {
    vec![
        (
            "attention_fuse",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| {
                let (_, _, g_f, alpha) = fused(t, b, batch)?;
                let a = weighted_sum(t, g_f, 31)?;
                let c = weighted_sum(t, alpha, 32)?;
                Ok(t.add(a, c)?)
            }),
        ),
        (
            "answer_head",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| {
                let (_, gen, g_f, _) = fused(t, b, batch)?;
                let logits = predict_answer(t, &gen, g_f)?;
                answer_loss(t, logits, &batch.answers)
            }),
        ),
        (
            "decoder_loss_ground_truth",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| {
                let (_, gen, g_f, _) = fused(t, b, batch)?;
                let g_y = answer_embedding(t, &gen, &batch.answers)?;
                Ok(decode_teacher_forced(t, &gen, g_f, g_y, &batch.explanations)?.loss)
            }),
        ),
        (
            "decoder_loss_soft_answer",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| {
                let (_, gen, g_f, _) = fused(t, b, batch)?;
                let logits = predict_answer(t, &gen, g_f)?;
                let g_y = soft_answer_embedding(t, &gen, logits)?;
                Ok(decode_teacher_forced(t, &gen, g_f, g_y, &batch.explanations)?.loss)
            }),
        ),
        (
            "disc_score_cam",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| disc_scores(t, b, batch, Variant::Cam, 40)),
        ),
        (
            "disc_score_cem",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| disc_scores(t, b, batch, Variant::Cem, 42)),
        ),
        (
            "disc_score_aecm",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| disc_scores(t, b, batch, Variant::Aecm, 44)),
        ),
        (
            "disc_score_ccm",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| disc_scores(t, b, batch, Variant::Ccm, 46)),
        ),
        (
            "total_loss",
            Box::new(|t: &mut Tape, b: &Bindings, batch: &Batch| {
                let d = DiscVars::bind(b)?;
                let (enc, gen, _, _) = fused(t, b, batch)?;
                let fwd = generator_forward(t, &enc, &gen, batch, Condition::GroundTruth)?;
                let ra = embed_real_answer(t, &d, &batch.answers)?;
                let re = embed_real_explanation(t, &d, &batch.explanations)?;
                let real = discriminate(t, &d, Variant::Ccm, Some(ra), Some(re))?;
                let fake = discriminate(t, &d, Variant::Ccm, Some(fwd.answer_feature), Some(fwd.explanation_feature))?;
                let (l_c, _) = adversarial_losses(t, real[0], fake[0])?;
                total_loss_var(t, fwd.answer_loss, fwd.explanation_loss, l_c, 0.1)
            }),
        ),
    ]
}

/// Worst error per model-level composite over the seeded points.
pub fn composite_errors(per_param: usize) -> Vec<(&'static str, f64)> {
    composite_cases()
        .iter()
        .map(|(name, build)| {
            let worst = (0..POINTS)
                .map(|seed| {
                    let (model, batch) = tiny_point(seed);
                    model_fd_error(&model, &batch, build.as_ref(), per_param, 900 + seed)
                })
                .fold(0.0, f64::max);
            (*name, worst)
        })
        .collect()
}
