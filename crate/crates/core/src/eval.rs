//! Scoring a model on a dataset: answer accuracy, explanation metrics and
//! attention agreement with the ground-truth maps.

use std::fmt;
use std::str::FromStr;

use crate::data::{VQAInstance, Vocabulary};
use crate::generator::{infer_all, Predictions};
use crate::metrics::{cider, corpus_bleu, meteor_exact, rouge_l, sentence_bleu, spearman, EvalPair, ROUGE_BETA};
use crate::model::CcmModel;
use crate::Error;

/// Inference batch size used by evaluation and sweeps.
pub const EVAL_CHUNK: usize = 100;

/// A scalar score computed from a set of predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreKind {
    Accuracy,
    /// Corpus BLEU of the given order.
    Bleu(usize),
    /// Mean sentence-level smoothed BLEU-4.
    SentenceBleu4,
    RougeL,
    Meteor,
    Cider,
    /// Mean Spearman correlation between predicted and ground-truth attention.
    Attention,
}

impl ScoreKind {
    pub fn name(self) -> String {
        match self {
            ScoreKind::Accuracy => "accuracy".into(),
            ScoreKind::Bleu(n) => format!("bleu{n}"),
            ScoreKind::SentenceBleu4 => "sentence_bleu4".into(),
            ScoreKind::RougeL => "rouge_l".into(),
            ScoreKind::Meteor => "meteor".into(),
            ScoreKind::Cider => "cider".into(),
            ScoreKind::Attention => "attention_spearman".into(),
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "accuracy" => ScoreKind::Accuracy,
            "bleu1" => ScoreKind::Bleu(1),
            "bleu2" => ScoreKind::Bleu(2),
            "bleu3" => ScoreKind::Bleu(3),
            "bleu4" => ScoreKind::Bleu(4),
            "sentence_bleu4" => ScoreKind::SentenceBleu4,
            "rouge_l" => ScoreKind::RougeL,
            "meteor" => ScoreKind::Meteor,
            "cider" => ScoreKind::Cider,
            "attention_spearman" => ScoreKind::Attention,
            other => {
                return Err(Error::Metric(format!(
                    "unknown metric {other:?}; expected one of accuracy, bleu1..bleu4, sentence_bleu4, rouge_l, meteor, cider, attention_spearman"
                )))
            }
        })
    }
}

/// Predicted explanations paired with their references, as words.
pub fn explanation_pairs(vocab: &Vocabulary, instances: &[VQAInstance], preds: &Predictions) -> Vec<EvalPair<String>> {
    instances
        .iter()
        .zip(&preds.explanations)
        .map(|(inst, e)| EvalPair::new(vocab.explanation.decode(e.words()), vec![vocab.explanation.decode(&inst.explanation)]))
        .collect()
}

fn check_lengths(instances: &[VQAInstance], preds: &Predictions) -> Result<(), Error> {
    if instances.is_empty() {
        return Err(Error::Metric("nothing to score: empty instance set".into()));
    }
    if preds.answers.len() != instances.len() || preds.explanations.len() != instances.len() || preds.alpha.len() != instances.len() {
        return Err(Error::Metric("predictions and instances differ in length".into()));
    }
    Ok(())
}

/// Mean per-instance Spearman correlation and the number of degenerate maps.
pub fn attention_agreement(instances: &[VQAInstance], preds: &Predictions) -> Result<(f64, usize), Error> {
    check_lengths(instances, preds)?;
    let mut total = 0.0;
    let mut degenerate = 0;
    for (inst, a) in instances.iter().zip(&preds.alpha) {
        let r = spearman(a, &inst.gt_attention)?;
        total += r.value;
        degenerate += usize::from(r.degenerate);
    }
    Ok((total / instances.len() as f64, degenerate))
}

pub fn score(kind: ScoreKind, vocab: &Vocabulary, instances: &[VQAInstance], preds: &Predictions) -> Result<f64, Error> {
    check_lengths(instances, preds)?;
    let mean = |xs: Result<Vec<f64>, Error>| xs.map(|v| v.iter().sum::<f64>() / v.len() as f64);
    match kind {
        ScoreKind::Accuracy => {
            let hits = instances.iter().zip(&preds.answers).filter(|(i, a)| i.answer == **a).count();
            Ok(hits as f64 / instances.len() as f64)
        }
        ScoreKind::Bleu(n) => corpus_bleu(&explanation_pairs(vocab, instances, preds), n),
        ScoreKind::SentenceBleu4 => mean(
            explanation_pairs(vocab, instances, preds)
                .iter()
                .map(|p| sentence_bleu(&p.candidate, &[&p.references[0]], 4))
                .collect(),
        ),
        ScoreKind::RougeL => mean(
            explanation_pairs(vocab, instances, preds)
                .iter()
                .map(|p| rouge_l(&p.candidate, &[&p.references[0]], ROUGE_BETA))
                .collect(),
        ),
        ScoreKind::Meteor => mean(
            explanation_pairs(vocab, instances, preds)
                .iter()
                .map(|p| meteor_exact(&p.candidate, &[&p.references[0]]))
                .collect(),
        ),
        ScoreKind::Cider => Ok(cider(&explanation_pairs(vocab, instances, preds), 4)?.mean),
        ScoreKind::Attention => Ok(attention_agreement(instances, preds)?.0),
    }
}

/// Every score of one model on one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model: String,
    pub instances: usize,
    pub accuracy: f64,
    /// Corpus BLEU-1..4.
    pub bleu: [f64; 4],
    pub sentence_bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// `None` when fewer than two instances were scored.
    pub cider: Option<f64>,
    pub attention_spearman: f64,
    pub attention_degenerate: usize,
}

impl EvalReport {
    /// `(metric, score)` rows in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![("accuracy".to_string(), self.accuracy)];
        for (n, b) in self.bleu.iter().enumerate() {
            rows.push((format!("bleu{}", n + 1), *b));
        }
        rows.push(("sentence_bleu4".into(), self.sentence_bleu4));
        rows.push(("meteor".into(), self.meteor));
        rows.push(("rouge_l".into(), self.rouge_l));
        if let Some(c) = self.cider {
            rows.push(("cider".into(), c));
        }
        rows.push(("attention_spearman".into(), self.attention_spearman));
        rows
    }
}

pub fn report_from_predictions(name: &str, vocab: &Vocabulary, instances: &[VQAInstance], preds: &Predictions) -> Result<EvalReport, Error> {
    let s = |k| score(k, vocab, instances, preds);
    let (attention_spearman, attention_degenerate) = attention_agreement(instances, preds)?;
    Ok(EvalReport {
        model: name.to_string(),
        instances: instances.len(),
        accuracy: s(ScoreKind::Accuracy)?,
        bleu: [
            s(ScoreKind::Bleu(1))?,
            s(ScoreKind::Bleu(2))?,
            s(ScoreKind::Bleu(3))?,
            s(ScoreKind::Bleu(4))?,
        ],
        sentence_bleu4: s(ScoreKind::SentenceBleu4)?,
        meteor: s(ScoreKind::Meteor)?,
        rouge_l: s(ScoreKind::RougeL)?,
        cider: if instances.len() >= 2 { Some(s(ScoreKind::Cider)?) } else { None },
        attention_spearman,
        attention_degenerate,
    })
}

/// Runs inference over `instances` and scores the result.
pub fn evaluate(name: &str, model: &CcmModel, vocab: &Vocabulary, instances: &[VQAInstance]) -> Result<EvalReport, Error> {
    model.check_vocab(vocab)?;
    let preds = infer_all(model, instances, EVAL_CHUNK)?;
    report_from_predictions(name, vocab, instances, &preds)
}
