//! Model dimensions, parameter initialisation, batching and persistence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::data::{Dataset, VQAInstance, Vocabulary};
use crate::params::{Bindings, ModelFile, Params};
use crate::Error;

pub const FORMAT_VERSION: &str = "1";
pub const ANSWER_BIAS_INIT: f64 = 1.0;

/// Free layer widths; vocabulary and grid sizes come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HiddenSizes {
    pub word_dim: usize,
    pub question_hidden: usize,
    /// Common output width of the image and question projections.
    pub fusion_dim: usize,
    pub attention_hidden: usize,
    /// Width of the first answer-head layer.
    pub answer_hidden: usize,
    /// Answer embedding width, shared by the generator's soft answer feature
    /// and the discriminator's real-answer embedding.
    pub answer_embed: usize,
    /// Decoder hidden size, also the discriminator's explanation LSTM size.
    pub decoder_hidden: usize,
    pub disc_hidden: usize,
    pub max_len: usize,
}

impl Default for HiddenSizes {
    fn default() -> Self {
        Self {
            word_dim: 32,
            question_hidden: 64,
            fusion_dim: 64,
            attention_hidden: 32,
            answer_hidden: 64,
            answer_embed: 32,
            decoder_hidden: 64,
            disc_hidden: 32,
            max_len: 12,
        }
    }
}

impl HiddenSizes {
    pub fn validate(&self) -> Result<(), Error> {
        let all = [
            ("word_dim", self.word_dim),
            ("question_hidden", self.question_hidden),
            ("fusion_dim", self.fusion_dim),
            ("attention_hidden", self.attention_hidden),
            ("answer_hidden", self.answer_hidden),
            ("answer_embed", self.answer_embed),
            ("decoder_hidden", self.decoder_hidden),
            ("disc_hidden", self.disc_hidden),
            ("max_len", self.max_len),
        ];
        match all.iter().find(|(_, v)| *v == 0) {
            Some((k, _)) => Err(Error::Config(format!("{k} must be at least 1"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub grid_width: usize,
    pub grid_height: usize,
    pub channels: usize,
    pub question_vocab: usize,
    pub explanation_vocab: usize,
    pub answers: usize,
    pub hidden: HiddenSizes,
}

impl ModelDims {
    pub fn for_dataset(ds: &Dataset, hidden: HiddenSizes) -> Self {
        Self {
            grid_width: ds.width,
            grid_height: ds.height,
            channels: ds.channels,
            question_vocab: ds.vocab.question.len(),
            explanation_vocab: ds.vocab.explanation.len(),
            answers: ds.vocab.answers.len(),
            hidden,
        }
    }

    pub fn regions(&self) -> usize {
        self.grid_width * self.grid_height
    }

    fn entries(&self) -> Vec<(&'static str, usize)> {
        let h = &self.hidden;
        vec![
            ("grid_width", self.grid_width),
            ("grid_height", self.grid_height),
            ("channels", self.channels),
            ("question_vocab", self.question_vocab),
            ("explanation_vocab", self.explanation_vocab),
            ("answers", self.answers),
            ("word_dim", h.word_dim),
            ("question_hidden", h.question_hidden),
            ("fusion_dim", h.fusion_dim),
            ("attention_hidden", h.attention_hidden),
            ("answer_hidden", h.answer_hidden),
            ("answer_embed", h.answer_embed),
            ("decoder_hidden", h.decoder_hidden),
            ("disc_hidden", h.disc_hidden),
            ("max_len", h.max_len),
        ]
    }

    fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self, Error> {
        let get = |k: &str| -> Result<usize, Error> {
            meta.get(k)
                .ok_or_else(|| Error::Model(format!("metadata key {k} missing")))?
                .parse()
                .map_err(|_| Error::Model(format!("metadata key {k} is not an integer")))
        };
        Ok(Self {
            grid_width: get("grid_width")?,
            grid_height: get("grid_height")?,
            channels: get("channels")?,
            question_vocab: get("question_vocab")?,
            explanation_vocab: get("explanation_vocab")?,
            answers: get("answers")?,
            hidden: HiddenSizes {
                word_dim: get("word_dim")?,
                question_hidden: get("question_hidden")?,
                fusion_dim: get("fusion_dim")?,
                attention_hidden: get("attention_hidden")?,
                answer_hidden: get("answer_hidden")?,
                answer_embed: get("answer_embed")?,
                decoder_hidden: get("decoder_hidden")?,
                disc_hidden: get("disc_hidden")?,
                max_len: get("max_len")?,
            },
        })
    }
}

/// Initialises every encoder, generator and discriminator parameter.
///
/// All variants share one parameter set drawn in a fixed order, so two models
/// built from the same seed start identical whatever the variant.
pub fn init_params(dims: &ModelDims, seed: u64) -> Params {
    let h = &dims.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    let lstm = |p: &mut Params, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize| {
        p.init_matrix(&format!("{name}.w"), input + hidden, 4 * hidden, rng);
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].fill(1.0);
        p.insert(format!("{name}.b"), Tensor::vector(bias));
    };

    p.init_embedding("enc.word_emb", dims.question_vocab, h.word_dim, &mut rng);
    lstm(&mut p, &mut rng, "enc.q_lstm", h.word_dim, h.question_hidden);
    p.init_matrix("enc.img_proj", dims.channels, h.fusion_dim, &mut rng);
    p.init_matrix("enc.q_proj", h.question_hidden, h.fusion_dim, &mut rng);
    p.init_matrix("enc.att_w", h.fusion_dim, h.attention_hidden, &mut rng);
    p.init_zeros("enc.att_b", &[h.attention_hidden]);
    p.init_matrix("enc.att_out", h.attention_hidden, 1, &mut rng);

    p.init_matrix("gen.y2.w", h.fusion_dim, h.answer_hidden, &mut rng);
    p.init_zeros("gen.y2.b", &[h.answer_hidden]);
    p.init_matrix("gen.y1.w", h.answer_hidden, dims.answers, &mut rng);
    // Positive so every rectified answer logit starts with a live gradient.
    p.insert("gen.y1.b", Tensor::filled(&[dims.answers], ANSWER_BIAS_INIT));
    p.init_matrix("gen.ans_emb", dims.answers, h.answer_embed, &mut rng);
    let cond = h.fusion_dim + h.answer_embed;
    p.init_matrix("gen.init_h.w", cond, h.decoder_hidden, &mut rng);
    p.init_zeros("gen.init_h.b", &[h.decoder_hidden]);
    p.init_matrix("gen.init_c.w", cond, h.decoder_hidden, &mut rng);
    p.init_zeros("gen.init_c.b", &[h.decoder_hidden]);
    p.init_embedding("gen.exp_emb", dims.explanation_vocab, h.word_dim, &mut rng);
    lstm(&mut p, &mut rng, "gen.dec_lstm", h.word_dim, h.decoder_hidden);
    p.init_matrix("gen.out.w", h.decoder_hidden, dims.explanation_vocab, &mut rng);
    p.init_zeros("gen.out.b", &[dims.explanation_vocab]);

    p.init_matrix("disc.aw", dims.answers, h.disc_hidden, &mut rng);
    p.init_matrix("disc.da", h.disc_hidden, h.answer_embed, &mut rng);
    p.init_embedding("disc.exp_emb", dims.explanation_vocab, h.word_dim, &mut rng);
    lstm(&mut p, &mut rng, "disc.de_lstm", h.word_dim, h.decoder_hidden);
    p.init_matrix("disc.cam.proj", h.answer_embed, h.disc_hidden, &mut rng);
    p.init_matrix("disc.cam.w", h.disc_hidden, 1, &mut rng);
    p.init_zeros("disc.cam.b", &[1]);
    p.init_matrix("disc.cem.proj", h.decoder_hidden, h.disc_hidden, &mut rng);
    p.init_matrix("disc.cem.w", h.disc_hidden, 1, &mut rng);
    p.init_zeros("disc.cem.b", &[1]);
    p.init_matrix("disc.ccm.ans_proj", h.answer_embed, h.disc_hidden, &mut rng);
    p.init_matrix("disc.ccm.exp_proj", h.decoder_hidden, h.disc_hidden, &mut rng);
    p.init_matrix("disc.ccm.dj", 2 * h.disc_hidden, h.disc_hidden, &mut rng);
    p.init_matrix("disc.ccm.w", h.disc_hidden, 1, &mut rng);
    p.init_zeros("disc.ccm.b", &[1]);
    p
}

/// A parameter set with the dimensions and vocabulary it was built for.
#[derive(Clone, Debug, PartialEq)]
pub struct CcmModel {
    pub dims: ModelDims,
    pub params: Params,
    pub vocab_checksum: String,
    pub variant: String,
}

impl CcmModel {
    pub fn new(ds: &Dataset, hidden: HiddenSizes, variant: &str, seed: u64) -> Result<Self, Error> {
        hidden.validate()?;
        let dims = ModelDims::for_dataset(ds, hidden);
        Ok(Self {
            params: init_params(&dims, seed),
            dims,
            vocab_checksum: ds.vocab.checksum(),
            variant: variant.to_string(),
        })
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<(), Error> {
        let dataset = vocab.checksum();
        if dataset != self.vocab_checksum {
            return Err(Error::VocabMismatch {
                model: self.vocab_checksum.clone(),
                dataset,
            });
        }
        Ok(())
    }

    pub fn to_file(&self) -> ModelFile {
        let mut meta: BTreeMap<String, String> = self.dims.entries().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        meta.insert("format_version".into(), FORMAT_VERSION.into());
        meta.insert("vocab_checksum".into(), self.vocab_checksum.clone());
        meta.insert("variant".into(), self.variant.clone());
        ModelFile {
            meta,
            params: self.params.clone(),
        }
    }

    pub fn from_file(file: ModelFile) -> Result<Self, Error> {
        let version = file.meta.get("format_version").map(String::as_str);
        if version != Some(FORMAT_VERSION) {
            return Err(Error::Model(format!("unsupported model format version {version:?}")));
        }
        let dims = ModelDims::from_meta(&file.meta)?;
        let expected = init_params(&dims, 0);
        for (name, t) in expected.iter() {
            let got = file.params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Model(format!("{name}: shape {:?}, expected {:?}", got.shape(), t.shape())));
            }
        }
        if file.params.len() != expected.len() {
            return Err(Error::Model(format!("{} parameters, expected {}", file.params.len(), expected.len())));
        }
        Ok(Self {
            dims,
            params: file.params,
            vocab_checksum: file.meta.get("vocab_checksum").cloned().unwrap_or_default(),
            variant: file.meta.get("variant").cloned().unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        self.to_file().save(path)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_file(ModelFile::load(path)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_file().to_bytes()
    }

    /// Binds all parameters to `tape`, differentiable where `trainable` says so.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bindings {
        Bindings::new(tape, &self.params, trainable)
    }
}

/// A mini-batch in the layout the forward pass consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[batch * regions, channels]`, regions of one instance contiguous.
    pub features: Tensor,
    pub regions: usize,
    pub questions: Vec<Vec<usize>>,
    pub answers: Vec<usize>,
    pub explanations: Vec<Vec<usize>>,
}

impl Batch {
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a VQAInstance>) -> Result<Self, Error> {
        let mut values = Vec::new();
        let mut questions = Vec::new();
        let mut answers = Vec::new();
        let mut explanations = Vec::new();
        let mut shape: Option<(usize, usize)> = None;
        for inst in instances {
            let g = &inst.features;
            let s = (g.regions(), g.channels);
            if shape.is_some_and(|prev| prev != s) {
                return Err(Error::Data("instances in a batch must share a grid shape".into()));
            }
            shape = Some(s);
            values.extend_from_slice(&g.values);
            questions.push(inst.question.clone());
            answers.push(inst.answer);
            explanations.push(inst.explanation.clone());
        }
        let (regions, channels) = shape.ok_or_else(|| Error::Data("empty batch".into()))?;
        Ok(Self {
            features: Tensor::matrix(answers.len() * regions, channels, values)?,
            regions,
            questions,
            answers,
            explanations,
        })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}
