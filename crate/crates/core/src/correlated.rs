//! Correlated discriminators and the adversarial training loop.
//!
//! The discriminator scores (answer, explanation) features. Real features
//! embed the ground truth: `g_da = relu(relu(onehot(A) W_aw) W_da)` and `g_de`
//! is the final state of a discriminator LSTM over the true explanation.
//! Fake features are the generator's own: the soft answer embedding `G_y` and
//! the decoder's final hidden state `G_e`.
//!
//! Per mini-batch the trainer (a) runs the generator, (b) takes `K` SGD steps
//! that ascend `L_c = E[log D(real)] + E[log(1 - D(fake))]` with the fake
//! features held fixed, clipping discriminator weights after each step, and
//! (c) takes one Adam step on `L_y + L_e + eta * E[log(1 - D(fake))]`.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    adam_step, clip_weights, decayed_lr, sgd_momentum_step, AutodiffError, LstmVars, OptimizerHyper, OptimizerState, Tape, Tensor, Var,
};
use crate::data::Dataset;
use crate::encoder::{run_lstm, EncoderVars};
use crate::generator::{argmax, generator_forward, Condition, GeneratorVars};
use crate::model::{Batch, CcmModel, HiddenSizes};
use crate::params::{Bindings, GradMap, Params};
use crate::Error;

/// Probabilities are clamped into this band before taking logs.
pub const PROB_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Cam,
    Cem,
    Aecm,
    Ccm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Baseline, Variant::Cam, Variant::Cem, Variant::Aecm, Variant::Ccm];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cam => "cam",
            Variant::Cem => "cem",
            Variant::Aecm => "aecm",
            Variant::Ccm => "ccm",
        }
    }

    pub fn uses_answer(self) -> bool {
        matches!(self, Variant::Cam | Variant::Aecm | Variant::Ccm)
    }

    pub fn uses_explanation(self) -> bool {
        matches!(self, Variant::Cem | Variant::Aecm | Variant::Ccm)
    }

    /// Whether `name` is a discriminator parameter this variant trains.
    pub fn owns(self, name: &str) -> bool {
        let answer_path = name == "disc.aw" || name == "disc.da";
        let explanation_path = name == "disc.exp_emb" || name.starts_with("disc.de_lstm.");
        match self {
            Variant::Baseline => false,
            Variant::Cam => answer_path || name.starts_with("disc.cam."),
            Variant::Cem => explanation_path || name.starts_with("disc.cem."),
            Variant::Aecm => answer_path || explanation_path || name.starts_with("disc.cam.") || name.starts_with("disc.cem."),
            Variant::Ccm => answer_path || explanation_path || name.starts_with("disc.ccm."),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}; expected one of {{baseline,cam,cem,aecm,ccm}}")))
    }
}

pub fn is_generator_param(name: &str) -> bool {
    name.starts_with("enc.") || name.starts_with("gen.")
}

#[derive(Clone, Copy, Debug)]
pub struct DiscVars {
    pub aw: Var,
    pub da: Var,
    pub exp_emb: Var,
    pub de_lstm: LstmVars,
    pub cam_proj: Var,
    pub cam_w: Var,
    pub cam_b: Var,
    pub cem_proj: Var,
    pub cem_w: Var,
    pub cem_b: Var,
    pub ans_proj: Var,
    pub exp_proj: Var,
    pub dj: Var,
    pub ccm_w: Var,
    pub ccm_b: Var,
}

impl DiscVars {
    pub fn bind(b: &Bindings) -> Result<Self, Error> {
        Ok(Self {
            aw: b.var("disc.aw")?,
            da: b.var("disc.da")?,
            exp_emb: b.var("disc.exp_emb")?,
            de_lstm: LstmVars {
                weight: b.var("disc.de_lstm.w")?,
                bias: b.var("disc.de_lstm.b")?,
            },
            cam_proj: b.var("disc.cam.proj")?,
            cam_w: b.var("disc.cam.w")?,
            cam_b: b.var("disc.cam.b")?,
            cem_proj: b.var("disc.cem.proj")?,
            cem_w: b.var("disc.cem.w")?,
            cem_b: b.var("disc.cem.b")?,
            ans_proj: b.var("disc.ccm.ans_proj")?,
            exp_proj: b.var("disc.ccm.exp_proj")?,
            dj: b.var("disc.ccm.dj")?,
            ccm_w: b.var("disc.ccm.w")?,
            ccm_b: b.var("disc.ccm.b")?,
        })
    }
}

/// `g_da` for ground-truth answer ids, `[b, answer_embed]`.
pub fn embed_real_answer(tape: &mut Tape, d: &DiscVars, labels: &[usize]) -> Result<Var, Error> {
    let h = tape.gather(d.aw, labels)?;
    let h = tape.relu(h)?;
    let h = tape.matmul(h, d.da)?;
    Ok(tape.relu(h)?)
}

/// `g_de`: final discriminator-LSTM state over each explanation.
pub fn embed_real_explanation(tape: &mut Tape, d: &DiscVars, explanations: &[Vec<usize>]) -> Result<Var, Error> {
    let hidden = tape.shape(d.de_lstm.bias)[0] / 4;
    let zeros = Tensor::zeros(&[explanations.len().max(1), hidden]);
    let h0 = tape.constant(zeros.clone());
    let c0 = tape.constant(zeros);
    Ok(run_lstm(tape, d.exp_emb, d.de_lstm, explanations, h0, c0)?.h)
}

/// `g_dj = tanh([g_da P_a ; g_de P_e]) W_dj`, bias-free.
pub fn joint_embed(tape: &mut Tape, d: &DiscVars, g_da: Var, g_de: Var) -> Result<Var, Error> {
    let a = tape.matmul(g_da, d.ans_proj)?;
    let e = tape.matmul(g_de, d.exp_proj)?;
    let both = tape.concat(&[a, e], 1)?;
    let both = tape.tanh(both)?;
    Ok(tape.matmul(both, d.dj)?)
}

fn head(tape: &mut Tape, g: Var, proj: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
    let h = tape.matmul(g, proj)?;
    let h = tape.tanh(h)?;
    let s = tape.matmul(h, w)?;
    let s = tape.add(s, b)?;
    tape.sigmoid(s)
}

/// Discriminator probabilities `[b, 1]`, one per head: a single head for
/// CAM, CEM and CCM, answer then explanation head for AECM.
pub fn discriminate(tape: &mut Tape, d: &DiscVars, variant: Variant, answer: Option<Var>, explanation: Option<Var>) -> Result<Vec<Var>, Error> {
    let need = |side: Option<Var>, what: &str| side.ok_or_else(|| Error::Model(format!("{variant} discriminator needs the {what} side")));
    Ok(match variant {
        Variant::Baseline => return Err(Error::Model("the baseline has no discriminator".into())),
        Variant::Cam => vec![head(tape, need(answer, "answer")?, d.cam_proj, d.cam_w, d.cam_b)?],
        Variant::Cem => vec![head(tape, need(explanation, "explanation")?, d.cem_proj, d.cem_w, d.cem_b)?],
        Variant::Aecm => vec![
            head(tape, need(answer, "answer")?, d.cam_proj, d.cam_w, d.cam_b)?,
            head(tape, need(explanation, "explanation")?, d.cem_proj, d.cem_w, d.cem_b)?,
        ],
        Variant::Ccm => {
            let g = joint_embed(tape, d, need(answer, "answer")?, need(explanation, "explanation")?)?;
            let s = tape.matmul(g, d.ccm_w)?;
            let s = tape.add(s, d.ccm_b)?;
            vec![tape.sigmoid(s)?]
        }
    })
}

fn log_clamped(tape: &mut Tape, p: Var, complement: bool) -> Result<Var, AutodiffError> {
    let p = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let p = if complement {
        let ones = tape.constant(Tensor::filled(tape.shape(p), 1.0));
        tape.sub(ones, p)?
    } else {
        p
    };
    let l = tape.ln(p)?;
    tape.mean(l)
}

/// Batch means `(L_c, E[log(1 - D(fake))])` for one head.
pub fn adversarial_losses(tape: &mut Tape, real: Var, fake: Var) -> Result<(Var, Var), Error> {
    let real_term = log_clamped(tape, real, false)?;
    let fake_term = log_clamped(tape, fake, true)?;
    let l_c = tape.add(real_term, fake_term)?;
    Ok((l_c, fake_term))
}

/// Non-saturating generator term `-E[log D(fake)]`.
pub fn non_saturating_term(tape: &mut Tape, fake: Var) -> Result<Var, Error> {
    let l = log_clamped(tape, fake, false)?;
    Ok(tape.scale(l, -1.0)?)
}

/// `L = L_y + L_e - eta * L_c`.
pub fn total_loss(l_y: f64, l_e: f64, l_c: f64, eta: f64) -> f64 {
    l_y + l_e - eta * l_c
}

pub fn total_loss_var(tape: &mut Tape, l_y: Var, l_e: Var, l_c: Var, eta: f64) -> Result<Var, Error> {
    let base = tape.add(l_y, l_e)?;
    let adv = tape.scale(l_c, -eta)?;
    Ok(tape.add(base, adv)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub eta: f64,
    /// Discriminator steps per generator step.
    pub disc_steps: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Generator Adam settings; momentum, clip bound and decay also drive the
    /// discriminator.
    pub hyper: OptimizerHyper,
    pub disc_lr: f64,
    pub condition_on: Condition,
    pub non_saturating: bool,
    /// Draw a second batch for the generator update instead of reusing the
    /// one the discriminator just saw.
    pub fresh_adversarial_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let hyper = OptimizerHyper::default();
        Self {
            variant: Variant::Ccm,
            eta: 0.1,
            disc_steps: 1,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            disc_lr: hyper.lr,
            hyper,
            condition_on: Condition::GroundTruth,
            non_saturating: false,
            fresh_adversarial_batch: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        if self.disc_steps == 0 {
            return Err(Error::Config("disc_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.disc_lr.is_nan() || self.disc_lr <= 0.0 {
            return Err(Error::Config(format!("disc_lr must be positive, got {}", self.disc_lr)));
        }
        self.hyper.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Whether any discriminator work happens at all.
    pub fn adversarial(&self) -> bool {
        self.variant != Variant::Baseline && self.eta > 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_y: f64,
    pub l_e: f64,
    /// Mean discriminator objective before each batch's discriminator update.
    pub l_c: f64,
    /// Mean discriminator loss `-L_c` after each batch's discriminator update.
    pub d_loss: f64,
    pub acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const HEADER: &'static str = "epoch,L_y,L_e,L_c,D_loss,acc,lr";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:.9}\n",
                r.epoch, r.l_y, r.l_e, r.l_c, r.d_loss, r.acc, r.lr
            ));
        }
        out
    }
}

fn finite(term: &'static str, epoch: usize, v: f64) -> Result<f64, Error> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, epoch })
    }
}

fn tagged<T>(term: &'static str, epoch: usize, r: Result<T, Error>) -> Result<T, Error> {
    r.map_err(|e| match e {
        Error::Autodiff(AutodiffError::NonFinite { .. }) => Error::NonFinite { term, epoch },
        other => other,
    })
}

/// Fixed generator features for one batch, the discriminator's fake side.
struct FakeFeatures {
    answer: Tensor,
    explanation: Tensor,
}

/// Sum of per-head `L_c` on a discriminator tape with fixed fake features.
fn disc_objective(tape: &mut Tape, d: &DiscVars, variant: Variant, batch: &Batch, fake: &FakeFeatures) -> Result<Var, Error> {
    let real_a = if variant.uses_answer() {
        Some(embed_real_answer(tape, d, &batch.answers)?)
    } else {
        None
    };
    let real_e = if variant.uses_explanation() {
        Some(embed_real_explanation(tape, d, &batch.explanations)?)
    } else {
        None
    };
    let fake_a = variant.uses_answer().then(|| tape.constant(fake.answer.clone()));
    let fake_e = variant.uses_explanation().then(|| tape.constant(fake.explanation.clone()));
    let real = discriminate(tape, d, variant, real_a, real_e)?;
    let fake = discriminate(tape, d, variant, fake_a, fake_e)?;
    let mut total: Option<Var> = None;
    for (r, f) in real.into_iter().zip(fake) {
        let (l_c, _) = adversarial_losses(tape, r, f)?;
        total = Some(match total {
            Some(t) => tape.add(t, l_c)?,
            None => l_c,
        });
    }
    total.ok_or_else(|| Error::Model("no discriminator heads".into()))
}

/// One discriminator ascent step; returns `L_c` before the update.
fn disc_step(
    params: &mut Params,
    variant: Variant,
    batch: &Batch,
    fake: &FakeFeatures,
    state: &mut OptimizerState,
    config: &TrainConfig,
    lr: f64,
) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let bind = Bindings::select(&mut tape, params, |n| n.starts_with("disc."), |n| variant.owns(n));
    let d = DiscVars::bind(&bind)?;
    let l_c = disc_objective(&mut tape, &d, variant, batch, fake)?;
    let value = tape.value(l_c).item();
    let ascent = tape.scale(l_c, -1.0)?;
    let grads = tape.backward(ascent)?;
    let gm = bind.collect(&tape, &grads);
    check_partition(&gm, |n| variant.owns(n))?;
    sgd_momentum_step(params, &gm, state, &config.hyper, lr)?;
    let owned: Vec<String> = params.names().filter(|n| variant.owns(n)).map(String::from).collect();
    clip_weights(params, owned.iter().map(String::as_str), config.hyper.clip_bound)?;
    Ok(value)
}

fn disc_value(params: &Params, variant: Variant, batch: &Batch, fake: &FakeFeatures) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let bind = Bindings::select(&mut tape, params, |n| n.starts_with("disc."), |_| false);
    let d = DiscVars::bind(&bind)?;
    let l_c = disc_objective(&mut tape, &d, variant, batch, fake)?;
    Ok(tape.value(l_c).item())
}

fn check_partition(grads: &GradMap, allowed: impl Fn(&str) -> bool) -> Result<(), Error> {
    match grads.keys().find(|n| !allowed(n)) {
        Some(n) => Err(Error::Model(format!("gradient leaked into parameter {n}"))),
        None => Ok(()),
    }
}

/// Generator-side adversarial term on a tape already holding the generator
/// forward; binds the discriminator there as constants.
fn generator_adversarial(tape: &mut Tape, params: &Params, config: &TrainConfig, answer: Var, explanation: Var) -> Result<Var, Error> {
    let bind = Bindings::select(tape, params, |n| n.starts_with("disc."), |_| false);
    let d = DiscVars::bind(&bind)?;
    let v = config.variant;
    let fake = discriminate(
        tape,
        &d,
        v,
        v.uses_answer().then_some(answer),
        v.uses_explanation().then_some(explanation),
    )?;
    let mut total: Option<Var> = None;
    for f in fake {
        let term = if config.non_saturating {
            non_saturating_term(tape, f)?
        } else {
            log_clamped(tape, f, true)?
        };
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Model("no discriminator heads".into()))
}

struct BatchStats {
    l_y: f64,
    l_e: f64,
    l_c: f64,
    d_loss: f64,
    correct: usize,
}

/// State carried across the steps of one training run.
pub struct Trainer<'a> {
    pub model: CcmModel,
    pub config: TrainConfig,
    data: &'a Dataset,
    rng: ChaCha8Rng,
    gen_state: OptimizerState,
    disc_state: OptimizerState,
}

impl<'a> Trainer<'a> {
    pub fn new(model: CcmModel, data: &'a Dataset, config: TrainConfig) -> Result<Self, Error> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        model.check_vocab(&data.vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            config,
            data,
            rng,
            gen_state: OptimizerState::default(),
            disc_state: OptimizerState::default(),
        })
    }

    fn batch_step(&mut self, batch: &Batch, epoch: usize, lr: f64, disc_lr: f64) -> Result<BatchStats, Error> {
        let config = self.config.clone();
        let mut tape = Tape::new();
        let bind = self.model.bind(&mut tape, is_generator_param);
        let enc = EncoderVars::bind(&bind)?;
        let gen = GeneratorVars::bind(&bind)?;
        let fwd = tagged(
            "generator forward",
            epoch,
            generator_forward(&mut tape, &enc, &gen, batch, config.condition_on),
        )?;
        let l_y = finite("L_y", epoch, tape.value(fwd.answer_loss).item())?;
        let l_e = finite("L_e", epoch, tape.value(fwd.explanation_loss).item())?;
        let z = tape.value(fwd.logits);
        let correct = (0..batch.len()).filter(|&r| argmax(z.row(r)) == batch.answers[r]).count();
        let mut stats = BatchStats {
            l_y,
            l_e,
            l_c: 0.0,
            d_loss: 0.0,
            correct,
        };
        let mut loss = tape.add(fwd.answer_loss, fwd.explanation_loss)?;
        if config.adversarial() {
            let fake = FakeFeatures {
                answer: tape.value(fwd.answer_feature).clone(),
                explanation: tape.value(fwd.explanation_feature).clone(),
            };
            for k in 0..config.disc_steps {
                let l_c = tagged(
                    "L_c",
                    epoch,
                    disc_step(
                        &mut self.model.params,
                        config.variant,
                        batch,
                        &fake,
                        &mut self.disc_state,
                        &config,
                        disc_lr,
                    ),
                )?;
                if k == 0 {
                    stats.l_c = finite("L_c", epoch, l_c)?;
                }
            }
            stats.d_loss = -finite(
                "D_loss",
                epoch,
                tagged("D_loss", epoch, disc_value(&self.model.params, config.variant, batch, &fake))?,
            )?;
            if config.fresh_adversarial_batch {
                let fresh = self.sample_batch()?;
                tape = Tape::new();
                let bind2 = self.model.bind(&mut tape, is_generator_param);
                let enc = EncoderVars::bind(&bind2)?;
                let gen = GeneratorVars::bind(&bind2)?;
                let fwd = tagged(
                    "generator forward",
                    epoch,
                    generator_forward(&mut tape, &enc, &gen, &fresh, config.condition_on),
                )?;
                loss = tape.add(fwd.answer_loss, fwd.explanation_loss)?;
                let adv = tagged(
                    "L_c",
                    epoch,
                    generator_adversarial(&mut tape, &self.model.params, &config, fwd.answer_feature, fwd.explanation_feature),
                )?;
                let adv = tape.scale(adv, config.eta)?;
                loss = tape.add(loss, adv)?;
                return self.generator_update(&tape, &bind2, loss, epoch, lr).map(|_| stats);
            }
            let adv = tagged(
                "L_c",
                epoch,
                generator_adversarial(&mut tape, &self.model.params, &config, fwd.answer_feature, fwd.explanation_feature),
            )?;
            let adv = tape.scale(adv, config.eta)?;
            loss = tape.add(loss, adv)?;
        }
        self.generator_update(&tape, &bind, loss, epoch, lr)?;
        Ok(stats)
    }

    fn generator_update(&mut self, tape: &Tape, bind: &Bindings, loss: Var, epoch: usize, lr: f64) -> Result<(), Error> {
        finite("generator loss", epoch, tape.value(loss).item())?;
        let grads = tagged("generator gradient", epoch, tape.backward(loss).map_err(Error::from))?;
        let gm = bind.collect(tape, &grads);
        check_partition(&gm, is_generator_param)?;
        adam_step(&mut self.model.params, &gm, &mut self.gen_state, &self.config.hyper, lr)?;
        Ok(())
    }

    fn sample_batch(&mut self) -> Result<Batch, Error> {
        let n = self.data.len();
        let m = self.config.batch_size.min(n);
        let idx = rand::seq::index::sample(&mut self.rng, n, m);
        Batch::from_instances(idx.iter().map(|i| &self.data.instances[i]))
    }

    /// Runs one epoch over a fresh shuffle of the data.
    pub fn epoch(&mut self, epoch: usize) -> Result<EpochRecord, Error> {
        let lr = decayed_lr(
            self.config.hyper.lr,
            epoch,
            self.config.hyper.decay_factor,
            self.config.hyper.decay_interval,
        );
        let disc_lr = decayed_lr(
            self.config.disc_lr,
            epoch,
            self.config.hyper.decay_factor,
            self.config.hyper.decay_interval,
        );
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut l_y, mut l_e, mut l_c, mut d_loss) = (0.0, 0.0, 0.0, 0.0);
        let mut correct = 0;
        let mut batches = 0usize;
        let chunks: Vec<Vec<usize>> = order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect();
        for chunk in chunks {
            let batch = Batch::from_instances(chunk.iter().map(|&i| &self.data.instances[i]))?;
            let s = self.batch_step(&batch, epoch, lr, disc_lr)?;
            l_y += s.l_y;
            l_e += s.l_e;
            l_c += s.l_c;
            d_loss += s.d_loss;
            correct += s.correct;
            batches += 1;
        }
        let b = batches as f64;
        Ok(EpochRecord {
            epoch,
            l_y: l_y / b,
            l_e: l_e / b,
            l_c: l_c / b,
            d_loss: d_loss / b,
            acc: correct as f64 / self.data.len() as f64,
            lr,
        })
    }
}

/// Trains a fresh model initialised from `config.seed`.
pub fn train(data: &Dataset, hidden: HiddenSizes, config: &TrainConfig) -> Result<(CcmModel, TrainHistory), Error> {
    train_observed(data, hidden, config, |_, _| Ok(()))
}

/// [`train`] with a callback after every epoch, given the record and the
/// current parameters.
pub fn train_observed(
    data: &Dataset,
    hidden: HiddenSizes,
    config: &TrainConfig,
    mut observer: impl FnMut(&EpochRecord, &Params) -> Result<(), Error>,
) -> Result<(CcmModel, TrainHistory), Error> {
    let model = CcmModel::new(data, hidden, config.variant.name(), config.seed)?;
    let mut trainer = Trainer::new(model, data, config.clone())?;
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let record = trainer.epoch(epoch)?;
        observer(&record, &trainer.model.params)?;
        history.records.push(record);
    }
    Ok((trainer.model, history))
}

/// Mean `D(real) - D(fake)` over the heads of `variant` with the generator frozen.
pub fn probability_gap(model: &CcmModel, variant: Variant, batch: &Batch) -> Result<f64, Error> {
    let fake = frozen_fake(model, batch)?;
    gap_with(&model.params, variant, batch, &fake)
}

fn frozen_fake(model: &CcmModel, batch: &Batch) -> Result<FakeFeatures, Error> {
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape, |_| false);
    let enc = EncoderVars::bind(&bind)?;
    let gen = GeneratorVars::bind(&bind)?;
    let fwd = generator_forward(&mut tape, &enc, &gen, batch, Condition::GroundTruth)?;
    Ok(FakeFeatures {
        answer: tape.value(fwd.answer_feature).clone(),
        explanation: tape.value(fwd.explanation_feature).clone(),
    })
}

fn gap_with(params: &Params, variant: Variant, batch: &Batch, fake: &FakeFeatures) -> Result<f64, Error> {
    let mut tape = Tape::new();
    let bind = Bindings::select(&mut tape, params, |n| n.starts_with("disc."), |_| false);
    let d = DiscVars::bind(&bind)?;
    let real_a = if variant.uses_answer() {
        Some(embed_real_answer(&mut tape, &d, &batch.answers)?)
    } else {
        None
    };
    let real_e = if variant.uses_explanation() {
        Some(embed_real_explanation(&mut tape, &d, &batch.explanations)?)
    } else {
        None
    };
    let fake_a = variant.uses_answer().then(|| tape.constant(fake.answer.clone()));
    let fake_e = variant.uses_explanation().then(|| tape.constant(fake.explanation.clone()));
    let real = discriminate(&mut tape, &d, variant, real_a, real_e)?;
    let fake = discriminate(&mut tape, &d, variant, fake_a, fake_e)?;
    let mean = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
    let gaps: Vec<f64> = real.iter().zip(&fake).map(|(r, f)| mean(tape.value(*r)) - mean(tape.value(*f))).collect();
    Ok(gaps.iter().sum::<f64>() / gaps.len() as f64)
}

/// Trains only the discriminator for `steps` steps on one batch with the
/// generator frozen; returns the probability gap before training and after
/// every step.
pub fn discriminator_probe(model: &CcmModel, batch: &Batch, config: &TrainConfig, steps: usize) -> Result<Vec<f64>, Error> {
    config.validate()?;
    let mut params = model.params.clone();
    let fake = frozen_fake(model, batch)?;
    let mut state = OptimizerState::default();
    let mut gaps = vec![gap_with(&params, config.variant, batch, &fake)?];
    for _ in 0..steps {
        disc_step(&mut params, config.variant, batch, &fake, &mut state, config, config.disc_lr)?;
        gaps.push(gap_with(&params, config.variant, batch, &fake)?);
    }
    Ok(gaps)
}
