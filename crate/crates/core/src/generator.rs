//! Answer head and answer-conditioned explanation decoder.
//!
//! The answer head is `relu(relu(g_f W2 + b2) W1 + b1)`. The decoder LSTM
//! starts from `h0 = tanh([g_f; g_y] Wh + bh)`, `c0 = tanh([g_f; g_y] Wc + bc)`
//! where `g_y` is an answer embedding; its first input is the end token.

use crate::autodiff::{LstmVars, Tape, Tensor, Var};
use crate::data::{END, PAD};
use crate::encoder::{attention_fuse, encode_question, run_lstm, EncoderVars};
use crate::model::{Batch, CcmModel};
use crate::params::Bindings;
use crate::Error;

#[derive(Clone, Copy, Debug)]
pub struct GeneratorVars {
    pub y2_w: Var,
    pub y2_b: Var,
    pub y1_w: Var,
    pub y1_b: Var,
    pub ans_emb: Var,
    pub init_h_w: Var,
    pub init_h_b: Var,
    pub init_c_w: Var,
    pub init_c_b: Var,
    pub exp_emb: Var,
    pub dec: LstmVars,
    pub out_w: Var,
    pub out_b: Var,
}

impl GeneratorVars {
    pub fn bind(b: &Bindings) -> Result<Self, Error> {
        Ok(Self {
            y2_w: b.var("gen.y2.w")?,
            y2_b: b.var("gen.y2.b")?,
            y1_w: b.var("gen.y1.w")?,
            y1_b: b.var("gen.y1.b")?,
            ans_emb: b.var("gen.ans_emb")?,
            init_h_w: b.var("gen.init_h.w")?,
            init_h_b: b.var("gen.init_h.b")?,
            init_c_w: b.var("gen.init_c.w")?,
            init_c_b: b.var("gen.init_c.b")?,
            exp_emb: b.var("gen.exp_emb")?,
            dec: LstmVars {
                weight: b.var("gen.dec_lstm.w")?,
                bias: b.var("gen.dec_lstm.b")?,
            },
            out_w: b.var("gen.out.w")?,
            out_b: b.var("gen.out.b")?,
        })
    }
}

/// Answer logits `[b, answers]`.
pub fn predict_answer(tape: &mut Tape, vars: &GeneratorVars, g_f: Var) -> Result<Var, Error> {
    let h = tape.matmul(g_f, vars.y2_w)?;
    let h = tape.add(h, vars.y2_b)?;
    let h = tape.relu(h)?;
    let y = tape.matmul(h, vars.y1_w)?;
    let y = tape.add(y, vars.y1_b)?;
    Ok(tape.relu(y)?)
}

/// Batch-mean cross-entropy of the answer logits.
pub fn answer_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, Error> {
    let weights = vec![1.0 / labels.len().max(1) as f64; labels.len()];
    Ok(tape.cross_entropy(logits, labels, &weights)?)
}

/// Soft answer feature: answer probabilities times the answer embedding.
pub fn soft_answer_embedding(tape: &mut Tape, vars: &GeneratorVars, logits: Var) -> Result<Var, Error> {
    let probs = tape.softmax(logits, 1)?;
    Ok(tape.matmul(probs, vars.ans_emb)?)
}

pub fn answer_embedding(tape: &mut Tape, vars: &GeneratorVars, labels: &[usize]) -> Result<Var, Error> {
    Ok(tape.gather(vars.ans_emb, labels)?)
}

/// Decoder start state from the conditioning vector `[g_f; g_y]`.
pub fn decoder_init(tape: &mut Tape, vars: &GeneratorVars, g_f: Var, g_y: Var) -> Result<(Var, Var), Error> {
    let cond = tape.concat(&[g_f, g_y], 1)?;
    let h = tape.matmul(cond, vars.init_h_w)?;
    let h = tape.add(h, vars.init_h_b)?;
    let h = tape.tanh(h)?;
    let c = tape.matmul(cond, vars.init_c_w)?;
    let c = tape.add(c, vars.init_c_b)?;
    let c = tape.tanh(c)?;
    Ok((h, c))
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherForced {
    /// Mean per-token cross-entropy over all target tokens of the batch.
    pub loss: Var,
    /// Final decoder hidden state, the generator's explanation feature.
    pub final_hidden: Var,
}

/// Runs the decoder on the ground-truth prefix of each target.
pub fn decode_teacher_forced(tape: &mut Tape, vars: &GeneratorVars, g_f: Var, g_y: Var, targets: &[Vec<usize>]) -> Result<TeacherForced, Error> {
    if targets.iter().any(|t| t.last() != Some(&END)) {
        return Err(Error::Data("explanation targets must be nonempty and end with the end token".into()));
    }
    let (h0, c0) = decoder_init(tape, vars, g_f, g_y)?;
    let inputs: Vec<Vec<usize>> = targets
        .iter()
        .map(|t| std::iter::once(END).chain(t[..t.len() - 1].iter().copied()).collect())
        .collect();
    let run = run_lstm(tape, vars.exp_emb, vars.dec, &inputs, h0, c0)?;
    let stacked = tape.concat(&run.steps, 0)?;
    let logits = tape.matmul(stacked, vars.out_w)?;
    let logits = tape.add(logits, vars.out_b)?;
    let total: usize = targets.iter().map(Vec::len).sum();
    let mut labels = Vec::with_capacity(run.steps.len() * targets.len());
    let mut weights = Vec::with_capacity(labels.capacity());
    for t in 0..run.steps.len() {
        for target in targets {
            match target.get(t) {
                Some(&id) => {
                    labels.push(id);
                    weights.push(1.0 / total as f64);
                }
                None => {
                    labels.push(PAD);
                    weights.push(0.0);
                }
            }
        }
    }
    let loss = tape.cross_entropy(logits, &labels, &weights)?;
    Ok(TeacherForced { loss, final_hidden: run.h })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// Emitted ids, including the end token when decoding terminated.
    pub tokens: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub terminated: bool,
}

impl DecodeResult {
    /// Emitted ids without the end token.
    pub fn words(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&END) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Greedy decoding, lowest id on ties, at most `max_len` tokens per row.
pub fn decode_greedy(tape: &mut Tape, vars: &GeneratorVars, g_f: Var, g_y: Var, max_len: usize) -> Result<Vec<DecodeResult>, Error> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let batch = tape.shape(g_f)[0];
    let (mut h, mut c) = decoder_init(tape, vars, g_f, g_y)?;
    let mut results = vec![
        DecodeResult {
            tokens: Vec::new(),
            log_probs: Vec::new(),
            terminated: false,
        };
        batch
    ];
    let mut inputs = vec![END; batch];
    for _ in 0..max_len {
        let x = tape.gather(vars.exp_emb, &inputs)?;
        (h, c) = crate::autodiff::lstm_step(tape, x, h, c, vars.dec)?;
        let logits = tape.matmul(h, vars.out_w)?;
        let logits = tape.add(logits, vars.out_b)?;
        let z = tape.value(logits);
        for (r, res) in results.iter_mut().enumerate() {
            let row = z.row(r);
            let (mut best, mut best_v) = (0, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    (best, best_v) = (i, v);
                }
            }
            inputs[r] = best;
            if res.terminated {
                continue;
            }
            let max = best_v;
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            res.tokens.push(best);
            res.log_probs.push(best_v - lse);
            res.terminated = best == END;
        }
        if results.iter().all(|r| r.terminated) {
            break;
        }
    }
    Ok(results)
}

/// Which answer embedding conditions the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    /// Embedding of the ground-truth answer.
    GroundTruth,
    /// Probability-weighted embedding of the predicted answer.
    Predicted,
}

/// Everything the generator produces for one batch on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorForward {
    pub logits: Var,
    pub alpha: Var,
    pub answer_loss: Var,
    pub explanation_loss: Var,
    /// Soft answer feature `G_y`, `[b, answer_embed]`.
    pub answer_feature: Var,
    /// Explanation feature `G_e`, the final decoder state.
    pub explanation_feature: Var,
}

pub fn generator_forward(
    tape: &mut Tape,
    enc: &EncoderVars,
    gen: &GeneratorVars,
    batch: &Batch,
    condition: Condition,
) -> Result<GeneratorForward, Error> {
    let g_q = encode_question(tape, enc, &batch.questions)?;
    let feats = tape.constant(batch.features.clone());
    let att = attention_fuse(tape, enc, feats, batch.regions, g_q)?;
    let logits = predict_answer(tape, gen, att.g_f)?;
    let answer_loss = answer_loss(tape, logits, &batch.answers)?;
    let answer_feature = soft_answer_embedding(tape, gen, logits)?;
    let g_y = match condition {
        Condition::GroundTruth => answer_embedding(tape, gen, &batch.answers)?,
        Condition::Predicted => answer_feature,
    };
    let tf = decode_teacher_forced(tape, gen, att.g_f, g_y, &batch.explanations)?;
    Ok(GeneratorForward {
        logits,
        alpha: att.alpha,
        answer_loss,
        explanation_loss: tf.loss,
        answer_feature,
        explanation_feature: tf.final_hidden,
    })
}

/// Model outputs for one batch at inference time.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub answers: Vec<usize>,
    /// Attention weights per instance, `regions` each.
    pub alpha: Vec<Vec<f64>>,
    pub explanations: Vec<DecodeResult>,
}

/// Predicted answers, attention maps and greedy explanations conditioned on
/// the predicted answer distribution.
pub fn infer(model: &CcmModel, batch: &Batch) -> Result<Predictions, Error> {
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, |_| false);
    let enc = EncoderVars::bind(&bind)?;
    let gen = GeneratorVars::bind(&bind)?;
    let g_q = encode_question(&mut tape, &enc, &batch.questions)?;
    let feats = tape.constant(batch.features.clone());
    let att = attention_fuse(&mut tape, &enc, feats, batch.regions, g_q)?;
    let logits = predict_answer(&mut tape, &gen, att.g_f)?;
    let g_y = soft_answer_embedding(&mut tape, &gen, logits)?;
    let explanations = decode_greedy(&mut tape, &gen, att.g_f, g_y, model.dims.hidden.max_len)?;
    let z = tape.value(logits);
    let answers = (0..batch.len()).map(|r| argmax(z.row(r))).collect();
    let a = tape.value(att.alpha);
    let alpha = (0..batch.len()).map(|r| a.row(r).to_vec()).collect();
    Ok(Predictions {
        answers,
        alpha,
        explanations,
    })
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Runs [`infer`] over `instances` in chunks of `chunk`.
pub fn infer_all(model: &CcmModel, instances: &[crate::data::VQAInstance], chunk: usize) -> Result<Predictions, Error> {
    let mut out = Predictions {
        answers: Vec::new(),
        alpha: Vec::new(),
        explanations: Vec::new(),
    };
    for part in instances.chunks(chunk.max(1)) {
        let p = infer(model, &Batch::from_instances(part)?)?;
        out.answers.extend(p.answers);
        out.alpha.extend(p.alpha);
        out.explanations.extend(p.explanations);
    }
    Ok(out)
}

/// Converts a `[b, d]` tensor to per-row vectors.
pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (m, _) = t.dims2().unwrap_or((0, 0));
    (0..m).map(|r| t.row(r).to_vec()).collect()
}
