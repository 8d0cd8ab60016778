//! Question LSTM and question-guided attention over the region grid.
//!
//! For a batch of `b` instances with `n` regions each:
//!
//! ```text
//! p_i = g_i W_img                       [b*n, P]   per region
//! p_q = g_q W_q                         [b, P]     broadcast over regions
//! f_j = tanh(p_i * p_q)
//! f_s = l2norm(signed_sqrt(f_j))        per region
//! s   = sigmoid(f_s W_a + b_a) w_a1     [b*n, 1]
//! alpha = softmax over the n regions of each instance
//! g_f = (sum_n alpha_n p_i,n) * p_q     [b, P]
//! ```

use crate::autodiff::{lstm_step, masked_update, LstmVars, Tape, Tensor, Var};
use crate::data::PAD;
use crate::params::Bindings;
use crate::Error;

/// Tape handles of the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    pub word_emb: Var,
    pub q_lstm: LstmVars,
    pub img_proj: Var,
    pub q_proj: Var,
    pub att_w: Var,
    pub att_b: Var,
    pub att_out: Var,
}

impl EncoderVars {
    pub fn bind(b: &Bindings) -> Result<Self, Error> {
        Ok(Self {
            word_emb: b.var("enc.word_emb")?,
            q_lstm: LstmVars {
                weight: b.var("enc.q_lstm.w")?,
                bias: b.var("enc.q_lstm.b")?,
            },
            img_proj: b.var("enc.img_proj")?,
            q_proj: b.var("enc.q_proj")?,
            att_w: b.var("enc.att_w")?,
            att_b: b.var("enc.att_b")?,
            att_out: b.var("enc.att_out")?,
        })
    }
}

/// Result of running an LSTM over a batch of variable-length sequences.
#[derive(Clone, Debug)]
pub struct LstmRun {
    /// Final hidden state of every sequence, `[b, hidden]`.
    pub h: Var,
    pub c: Var,
    /// Hidden state after each step; rows past a sequence's end repeat its
    /// final state.
    pub steps: Vec<Var>,
}

/// Embeds `seqs` through `embedding` and runs `cell` over them from
/// `(h0, c0)`. Sequences may differ in length; a finished row keeps its state.
pub fn run_lstm(tape: &mut Tape, embedding: Var, cell: LstmVars, seqs: &[Vec<usize>], h0: Var, c0: Var) -> Result<LstmRun, Error> {
    if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
        return Err(Error::Data("token sequences must be nonempty".into()));
    }
    let longest = seqs.iter().map(Vec::len).max().unwrap_or(0);
    let (mut h, mut c) = (h0, c0);
    let mut steps = Vec::with_capacity(longest);
    for t in 0..longest {
        let ids: Vec<usize> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
        let x = tape.gather(embedding, &ids)?;
        let (h_new, c_new) = lstm_step(tape, x, h, c, cell)?;
        if seqs.iter().all(|s| t < s.len()) {
            (h, c) = (h_new, c_new);
        } else {
            let mask = seqs.iter().map(|s| f64::from(u8::from(t < s.len()))).collect();
            let mask = tape.constant(Tensor::vector(mask));
            h = masked_update(tape, h, h_new, mask)?;
            c = masked_update(tape, c, c_new, mask)?;
        }
        steps.push(h);
    }
    Ok(LstmRun { h, c, steps })
}

/// Final question-LSTM hidden state `g_q`, `[b, question_hidden]`.
pub fn encode_question(tape: &mut Tape, vars: &EncoderVars, questions: &[Vec<usize>]) -> Result<Var, Error> {
    let hidden = tape.shape(vars.q_lstm.bias)[0] / 4;
    let zeros = Tensor::zeros(&[questions.len().max(1), hidden]);
    let h0 = tape.constant(zeros.clone());
    let c0 = tape.constant(zeros);
    Ok(run_lstm(tape, vars.word_emb, vars.q_lstm, questions, h0, c0)?.h)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// Fused feature `g_f`, `[b, fusion_dim]`.
    pub g_f: Var,
    /// Attention weights, `[b, regions]`, each row on the simplex.
    pub alpha: Var,
}

/// Attention fusion of region features `[b*regions, channels]` with `g_q`.
pub fn attention_fuse(tape: &mut Tape, vars: &EncoderVars, features: Var, regions: usize, g_q: Var) -> Result<AttentionOutput, Error> {
    let batch = tape.shape(g_q)[0];
    if regions == 0 || tape.shape(features).first() != Some(&(batch * regions)) {
        return Err(Error::Model(format!(
            "features {:?} do not hold {regions} regions for each of {batch} questions",
            tape.shape(features)
        )));
    }
    let p_i = tape.matmul(features, vars.img_proj)?;
    let p_q = tape.matmul(g_q, vars.q_proj)?;
    let p_q_wide = tape.repeat_rows(p_q, regions)?;
    let joint = tape.mul(p_i, p_q_wide)?;
    let f_j = tape.tanh(joint)?;
    let f_s = tape.signed_sqrt(f_j)?;
    let f_s = tape.l2_normalize(f_s, 1)?;
    let hidden = tape.matmul(f_s, vars.att_w)?;
    let hidden = tape.add(hidden, vars.att_b)?;
    let hidden = tape.sigmoid(hidden)?;
    let scores = tape.matmul(hidden, vars.att_out)?;
    let scores = tape.reshape(scores, vec![batch, regions])?;
    let alpha = tape.softmax(scores, 1)?;
    let weights = tape.reshape(alpha, vec![batch * regions])?;
    let pooled = tape.scale_rows(p_i, weights)?;
    let pooled = tape.segment_sum(pooled, regions)?;
    let g_f = tape.mul(pooled, p_q)?;
    Ok(AttentionOutput { g_f, alpha })
}
