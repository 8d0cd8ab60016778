//! Deterministic synthetic grid-world VQA data.
//!
//! Each scene places two to four coloured shapes on a `W x H` grid. A cell's
//! feature vector is the sum of two rows of a fixed orthonormal basis of
//! `R^16` (one row per colour/shape pair, one per grid quadrant) plus
//! Gaussian jitter; empty cells carry jitter only. Questions, answers and
//! explanations are templated from the scene, and the ground-truth attention
//! puts all mass on the queried object's cell.
//!
//! Files are line-delimited JSON: line 1 is a header with the format version,
//! grid size and vocabulary; every following line is one instance. Floats are
//! quantised to nine decimals at generation and written with fixed precision,
//! so files are byte-identical across runs and platforms.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::Error;

pub const PAD: usize = 0;
pub const END: usize = 1;
pub const UNK: usize = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<end>", "<unk>"];

pub const FORMAT_NAME: &str = "toyvqa";
pub const FORMAT_VERSION: u64 = 1;

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];
pub const CHANNELS: usize = 16;
pub const JITTER_STD: f64 = 0.05;

const DECIMALS: f64 = 1e9;
const CODE_SEED: u64 = 0x5eed_c0de;

/// Region features of one image, stored row-major as `[height][width][channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeatureGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl ImageFeatureGrid {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self, Error> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Data(format!("grid dims must be positive: {width}x{height}x{channels}")));
        }
        if values.len() != width * height * channels {
            return Err(Error::Data(format!(
                "grid {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn regions(&self) -> usize {
        self.width * self.height
    }

    pub fn region(&self, n: usize) -> &[f64] {
        &self.values[n * self.channels..(n + 1) * self.channels]
    }
}

/// Bijective token/id map; reserved tokens (if any) occupy the lowest ids.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenMap {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenMap {
    fn with_reserved(reserved: &[&str]) -> Self {
        let mut m = Self::default();
        for r in reserved {
            m.intern(r);
        }
        m
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, Error> {
        let mut m = Self::default();
        for t in &tokens {
            if m.index.contains_key(t) {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
            m.intern(t);
        }
        Ok(m)
    }

    fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, words: &[&str]) -> Result<Vec<usize>, Error> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| Error::Data(format!("unknown token {w:?}"))))
            .collect()
    }

    /// Words for `ids`, skipping reserved padding/end tokens.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != END)
            .map(|&i| self.token(i).unwrap_or("<unk>").to_string())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    pub question: TokenMap,
    pub explanation: TokenMap,
    pub answers: TokenMap,
}

/// Tokenised text of one instance, the input to [`build_vocab`].
#[derive(Clone, Debug, PartialEq)]
pub struct TextRecord {
    pub question: Vec<String>,
    pub answer: String,
    pub explanation: Vec<String>,
}

impl TextRecord {
    fn new(question: &str, answer: &str, explanation: &str) -> Self {
        Self {
            question: question.split_whitespace().map(String::from).collect(),
            answer: answer.to_string(),
            explanation: explanation.split_whitespace().map(String::from).collect(),
        }
    }
}

/// Assigns ids by first appearance, after the reserved ids for the two token
/// vocabularies. Corpora holding the same tokens in a different order give
/// the same contents under different ids.
pub fn build_vocab(records: &[TextRecord]) -> Result<Vocabulary, Error> {
    if records.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from no records".into()));
    }
    let mut v = Vocabulary {
        question: TokenMap::with_reserved(&RESERVED),
        explanation: TokenMap::with_reserved(&RESERVED),
        answers: TokenMap::default(),
    };
    for r in records {
        for w in &r.question {
            v.question.intern(w);
        }
        v.answers.intern(&r.answer);
        for w in &r.explanation {
            v.explanation.intern(w);
        }
    }
    Ok(v)
}

impl Vocabulary {
    /// Fixed vocabulary covering every toy template, shared by all splits.
    pub fn toy() -> Self {
        let mut corpus = Vec::new();
        for c in COLORS {
            corpus.push(TextRecord::new(
                "what color is the circle",
                c,
                &format!("because the {c} circle is in the top left"),
            ));
        }
        for s in SHAPES {
            corpus.push(TextRecord::new(
                "what shape is the red object",
                s,
                &format!("because the red {s} is in the bottom right"),
            ));
        }
        corpus.push(TextRecord::new(
            "is there a red circle",
            "yes",
            "because the red circle is in the top left",
        ));
        corpus.push(TextRecord::new("is there a red circle", "no", "because there is no red circle"));
        for c in COLORS {
            for s in SHAPES {
                corpus.push(TextRecord::new(
                    &format!("what color is the {s}"),
                    c,
                    &format!("because the {c} {s} is in the top left"),
                ));
                corpus.push(TextRecord::new(
                    &format!("is there a {c} {s}"),
                    "no",
                    &format!("because there is no {c} {s}"),
                ));
            }
        }
        build_vocab(&corpus).expect("nonempty corpus")
    }

    /// SHA-256 over the three token lists.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (tag, map) in [("q", &self.question), ("e", &self.explanation), ("a", &self.answers)] {
            h.update(tag.as_bytes());
            for t in map.tokens() {
                h.update((t.len() as u64).to_le_bytes());
                h.update(t.as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Non-reserved question token ids, the sampling domain for word replacement.
    pub fn question_content_ids(&self) -> Vec<usize> {
        (RESERVED.len()..self.question.len()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ToyObject {
    pub color: usize,
    pub shape: usize,
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyScene {
    pub width: usize,
    pub height: usize,
    pub objects: Vec<ToyObject>,
}

impl ToyScene {
    pub fn object_at(&self, x: usize, y: usize) -> Option<&ToyObject> {
        self.objects.iter().find(|o| o.x == x && o.y == y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VQAInstance {
    pub id: u64,
    pub features: ImageFeatureGrid,
    pub question: Vec<usize>,
    pub answer: usize,
    pub explanation: Vec<usize>,
    pub gt_attention: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub vocab: Vocabulary,
    pub instances: Vec<VQAInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            instances: self.instances[range].to_vec(),
            vocab: self.vocab.clone(),
            ..*self
        }
    }
}

/// Rows of a fixed orthonormal basis of `R^16`: Gram-Schmidt applied to a
/// Gaussian matrix drawn from a constant seed.
pub fn orthonormal_codes() -> [[f64; CHANNELS]; CHANNELS] {
    let mut rng = ChaCha8Rng::seed_from_u64(CODE_SEED);
    let normal = Normal::new(0.0, 1.0).expect("valid std");
    let mut h = [[0.0; CHANNELS]; CHANNELS];
    for i in 0..CHANNELS {
        let mut v: [f64; CHANNELS] = std::array::from_fn(|_| normal.sample(&mut rng));
        for prev in &h[..i] {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        h[i] = v.map(|a| a / norm);
    }
    h
}

pub fn quadrant(width: usize, height: usize, x: usize, y: usize) -> usize {
    let right = usize::from(2 * x >= width);
    let bottom = usize::from(2 * y >= height);
    2 * bottom + right
}

fn quadrant_words(q: usize) -> (&'static str, &'static str) {
    let vertical = if q >= 2 { "bottom" } else { "top" };
    let horizontal = if q % 2 == 1 { "right" } else { "left" };
    (vertical, horizontal)
}

/// Noise-free feature vector for a cell, or `None` when it is empty.
pub fn cell_code(width: usize, height: usize, obj: &ToyObject) -> [f64; CHANNELS] {
    let codes = orthonormal_codes();
    let pair = codes[obj.color * SHAPES.len() + obj.shape];
    let quad = codes[COLORS.len() * SHAPES.len() + quadrant(width, height, obj.x, obj.y)];
    let mut out = [0.0; CHANNELS];
    for c in 0..CHANNELS {
        out[c] = pair[c] + quad[c];
    }
    out
}

fn quantise(v: f64) -> f64 {
    (v * DECIMALS).round() / DECIMALS
}

/// Generator settings for the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { width: 4, height: 4 }
    }
}

fn free_cell(rng: &mut impl Rng, scene: &ToyScene) -> (usize, usize) {
    loop {
        let x = rng.random_range(0..scene.width);
        let y = rng.random_range(0..scene.height);
        if scene.object_at(x, y).is_none() {
            return (x, y);
        }
    }
}

/// Samples one instance. The answer class is drawn uniformly first and the
/// scene is built around it, so classes are balanced by construction.
pub fn generate_instance(rng: &mut impl Rng, id: u64, config: ToyConfig, vocab: &Vocabulary) -> Result<VQAInstance, Error> {
    let ToyConfig { width, height } = config;
    if width < 2 || height < 2 {
        return Err(Error::Data(format!("grid must be at least 2x2, got {width}x{height}")));
    }
    let n_answers = COLORS.len() + SHAPES.len() + 2;
    let class = rng.random_range(0..n_answers);
    let mut scene = ToyScene {
        width,
        height,
        objects: Vec::new(),
    };
    let distractors = rng.random_range(1..=3usize.min(width * height - 1));
    let place = |rng: &mut ChaCha8Rng, scene: &mut ToyScene, color: usize, shape: usize| {
        let (x, y) = free_cell(rng, scene);
        scene.objects.push(ToyObject { color, shape, x, y });
    };
    // The scene is sampled on a private stream so the caller's RNG advances
    // by a fixed amount per instance.
    let mut srng = ChaCha8Rng::seed_from_u64(rng.random());
    let question: String;
    let answer: String;
    let explanation: String;
    let target: Option<ToyObject>;
    if class < COLORS.len() {
        let (color, shape) = (class, srng.random_range(0..SHAPES.len()));
        place(&mut srng, &mut scene, color, shape);
        for _ in 0..distractors {
            let s = (shape + srng.random_range(1..SHAPES.len())) % SHAPES.len();
            let c = srng.random_range(0..COLORS.len());
            place(&mut srng, &mut scene, c, s);
        }
        target = Some(scene.objects[0]);
        question = format!("what color is the {}", SHAPES[shape]);
        answer = COLORS[color].to_string();
    } else if class < COLORS.len() + SHAPES.len() {
        let (color, shape) = (srng.random_range(0..COLORS.len()), class - COLORS.len());
        place(&mut srng, &mut scene, color, shape);
        for _ in 0..distractors {
            let c = (color + srng.random_range(1..COLORS.len())) % COLORS.len();
            let s = srng.random_range(0..SHAPES.len());
            place(&mut srng, &mut scene, c, s);
        }
        target = Some(scene.objects[0]);
        question = format!("what shape is the {} object", COLORS[color]);
        answer = SHAPES[shape].to_string();
    } else {
        let yes = class == COLORS.len() + SHAPES.len();
        let (color, shape) = (srng.random_range(0..COLORS.len()), srng.random_range(0..SHAPES.len()));
        let pairs = COLORS.len() * SHAPES.len();
        let queried = color * SHAPES.len() + shape;
        if yes {
            place(&mut srng, &mut scene, color, shape);
        }
        let others = if yes { distractors } else { distractors + 1 };
        for _ in 0..others {
            let p = (queried + srng.random_range(1..pairs)) % pairs;
            place(&mut srng, &mut scene, p / SHAPES.len(), p % SHAPES.len());
        }
        target = yes.then(|| scene.objects[0]);
        question = format!("is there a {} {}", COLORS[color], SHAPES[shape]);
        answer = if yes { "yes" } else { "no" }.to_string();
        if !yes {
            explanation = format!("because there is no {} {}", COLORS[color], SHAPES[shape]);
            return finish(&mut srng, id, scene, target, &question, &answer, &explanation, vocab);
        }
    }
    let t = target.expect("target placed");
    let (v, h) = quadrant_words(quadrant(width, height, t.x, t.y));
    explanation = format!("because the {} {} is in the {v} {h}", COLORS[t.color], SHAPES[t.shape]);
    finish(&mut srng, id, scene, target, &question, &answer, &explanation, vocab)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    rng: &mut ChaCha8Rng,
    id: u64,
    scene: ToyScene,
    target: Option<ToyObject>,
    question: &str,
    answer: &str,
    explanation: &str,
    vocab: &Vocabulary,
) -> Result<VQAInstance, Error> {
    let (w, h) = (scene.width, scene.height);
    let jitter = Normal::new(0.0, JITTER_STD).expect("valid std");
    let mut values = Vec::with_capacity(w * h * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let base = scene.object_at(x, y).map(|o| cell_code(w, h, o)).unwrap_or([0.0; CHANNELS]);
            values.extend(base.iter().map(|b| quantise(b + jitter.sample(rng))));
        }
    }
    let mut gt_attention = vec![0.0; w * h];
    match target {
        Some(t) => gt_attention[t.y * w + t.x] = 1.0,
        None => {
            // Absence is evidenced by every object present; spread the mass
            // so the quantised weights still sum to exactly one.
            let k = scene.objects.len();
            let share = quantise(1.0 / k as f64);
            for o in &scene.objects {
                gt_attention[o.y * w + o.x] = share;
            }
            let first = &scene.objects[0];
            gt_attention[first.y * w + first.x] = quantise(1.0 - share * (k - 1) as f64);
        }
    }
    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }
    let mut expl = vocab.explanation.encode(&words(explanation))?;
    expl.push(END);
    Ok(VQAInstance {
        id,
        features: ImageFeatureGrid::new(w, h, CHANNELS, values)?,
        question: vocab.question.encode(&words(question))?,
        answer: vocab.answers.id(answer).ok_or_else(|| Error::Data(format!("unknown answer {answer}")))?,
        explanation: expl,
        gt_attention,
    })
}

/// Instance `index` of the stream for `seed`; independent of every other index.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate_dataset(n: usize, seed: u64, config: ToyConfig) -> Result<Dataset, Error> {
    if n == 0 {
        return Err(Error::Data("dataset size must be at least 1".into()));
    }
    let vocab = Vocabulary::toy();
    let instances = (0..n as u64)
        .map(|i| generate_instance(&mut instance_rng(seed, i), i, config, &vocab))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        width: config.width,
        height: config.height,
        channels: CHANNELS,
        vocab,
        instances,
    })
}

fn json_str_list(tokens: &[String]) -> String {
    let quoted: Vec<String> = tokens.iter().map(|t| Value::String(t.clone()).to_string()).collect();
    format!("[{}]", quoted.join(","))
}

fn fixed(v: f64) -> String {
    let s = format!("{v:.9}");
    if s == "-0.000000000" {
        "0.000000000".to_string()
    } else {
        s
    }
}

fn header_line(ds: &Dataset) -> String {
    format!(
        "{{\"format\":\"{FORMAT_NAME}\",\"version\":{FORMAT_VERSION},\"width\":{},\"height\":{},\"channels\":{},\"count\":{},\"vocab\":{{\"question\":{},\"explanation\":{},\"answers\":{}}}}}",
        ds.width,
        ds.height,
        ds.channels,
        ds.instances.len(),
        json_str_list(ds.vocab.question.tokens()),
        json_str_list(ds.vocab.explanation.tokens()),
        json_str_list(ds.vocab.answers.tokens()),
    )
}

fn instance_line(inst: &VQAInstance) -> String {
    let g = &inst.features;
    let mut s = String::with_capacity(g.values.len() * 14);
    write!(s, "{{\"id\":{},\"features\":[", inst.id).unwrap();
    for y in 0..g.height {
        s.push_str(if y == 0 { "[" } else { ",[" });
        for x in 0..g.width {
            s.push_str(if x == 0 { "[" } else { ",[" });
            let region = g.region(y * g.width + x);
            let cells: Vec<String> = region.iter().map(|v| fixed(*v)).collect();
            s.push_str(&cells.join(","));
            s.push(']');
        }
        s.push(']');
    }
    let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    write!(
        s,
        "],\"question\":[{}],\"answer\":{},\"explanation\":[{}],\"gt_attention\":[",
        ids(&inst.question),
        inst.answer,
        ids(&inst.explanation)
    )
    .unwrap();
    for y in 0..g.height {
        s.push_str(if y == 0 { "[" } else { ",[" });
        let row: Vec<String> = (0..g.width).map(|x| fixed(inst.gt_attention[y * g.width + x])).collect();
        s.push_str(&row.join(","));
        s.push(']');
    }
    s.push_str("]}");
    s
}

pub fn write_dataset(ds: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", header_line(ds))?;
    for inst in &ds.instances {
        writeln!(out, "{}", instance_line(inst))?;
    }
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, Error> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dataset(ds, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(BufReader::new(file))
}

fn bad(line: usize, field: &str, detail: impl Into<String>) -> Error {
    Error::Format {
        line,
        field: field.to_string(),
        detail: detail.into(),
    }
}

fn field<'a>(obj: &'a Value, line: usize, name: &str) -> Result<&'a Value, Error> {
    obj.get(name).ok_or_else(|| bad(line, name, "missing"))
}

fn as_usize(v: &Value, line: usize, name: &str) -> Result<usize, Error> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| bad(line, name, format!("expected a non-negative integer, got {v}")))
}

fn as_array<'a>(v: &'a Value, line: usize, name: &str) -> Result<&'a Vec<Value>, Error> {
    v.as_array().ok_or_else(|| bad(line, name, "expected an array"))
}

fn as_f64(v: &Value, line: usize, name: &str) -> Result<f64, Error> {
    v.as_f64().ok_or_else(|| bad(line, name, format!("expected a number, got {v}")))
}

fn token_list(v: &Value, line: usize, name: &str) -> Result<TokenMap, Error> {
    let tokens = as_array(v, line, name)?
        .iter()
        .map(|t| t.as_str().map(String::from).ok_or_else(|| bad(line, name, "expected strings")))
        .collect::<Result<Vec<_>, _>>()?;
    TokenMap::from_tokens(tokens).map_err(|e| bad(line, name, e.to_string()))
}

fn id_list(v: &Value, line: usize, name: &str, limit: usize) -> Result<Vec<usize>, Error> {
    let ids = as_array(v, line, name)?
        .iter()
        .map(|x| as_usize(x, line, name))
        .collect::<Result<Vec<_>, _>>()?;
    if ids.is_empty() {
        return Err(bad(line, name, "empty sequence"));
    }
    if let Some(bad_id) = ids.iter().find(|&&i| i >= limit) {
        return Err(bad(line, name, format!("id {bad_id} outside vocabulary of {limit}")));
    }
    Ok(ids)
}

pub fn read_dataset(reader: impl BufRead) -> Result<Dataset, Error> {
    let mut lines = reader.lines();
    let header_text = match lines.next() {
        Some(l) => l.map_err(|e| bad(1, "header", e.to_string()))?,
        None => return Err(bad(1, "header", "empty file")),
    };
    let header: Value = serde_json::from_str(&header_text).map_err(|e| bad(1, "header", e.to_string()))?;
    let format = field(&header, 1, "format")?;
    if format.as_str() != Some(FORMAT_NAME) {
        return Err(bad(1, "format", format!("expected {FORMAT_NAME:?}, got {format}")));
    }
    let version = as_usize(field(&header, 1, "version")?, 1, "version")?;
    if version as u64 != FORMAT_VERSION {
        return Err(bad(1, "version", format!("unsupported version {version}")));
    }
    let width = as_usize(field(&header, 1, "width")?, 1, "width")?;
    let height = as_usize(field(&header, 1, "height")?, 1, "height")?;
    let channels = as_usize(field(&header, 1, "channels")?, 1, "channels")?;
    let count = as_usize(field(&header, 1, "count")?, 1, "count")?;
    let vocab_v = field(&header, 1, "vocab")?;
    let vocab = Vocabulary {
        question: token_list(
            vocab_v.get("question").ok_or_else(|| bad(1, "vocab.question", "missing"))?,
            1,
            "vocab.question",
        )?,
        explanation: token_list(
            vocab_v.get("explanation").ok_or_else(|| bad(1, "vocab.explanation", "missing"))?,
            1,
            "vocab.explanation",
        )?,
        answers: token_list(
            vocab_v.get("answers").ok_or_else(|| bad(1, "vocab.answers", "missing"))?,
            1,
            "vocab.answers",
        )?,
    };
    let mut instances = Vec::with_capacity(count);
    for (i, text) in lines.enumerate() {
        let line = i + 2;
        let text = text.map_err(|e| bad(line, "record", e.to_string()))?;
        if instances.len() == count {
            return Err(bad(line, "record", format!("more records than the declared {count}")));
        }
        let obj: Value = serde_json::from_str(&text).map_err(|e| bad(line, "record", e.to_string()))?;
        let id = field(&obj, line, "id")?.as_u64().ok_or_else(|| bad(line, "id", "expected an integer"))?;
        let rows = as_array(field(&obj, line, "features")?, line, "features")?;
        if rows.len() != height {
            return Err(bad(line, "features", format!("expected {height} rows, got {}", rows.len())));
        }
        let mut values = Vec::with_capacity(width * height * channels);
        for row in rows {
            let cells = as_array(row, line, "features")?;
            if cells.len() != width {
                return Err(bad(line, "features", format!("expected {width} cells per row, got {}", cells.len())));
            }
            for cell in cells {
                let chans = as_array(cell, line, "features")?;
                if chans.len() != channels {
                    return Err(bad(line, "features", format!("expected {channels} channels, got {}", chans.len())));
                }
                for c in chans {
                    values.push(as_f64(c, line, "features")?);
                }
            }
        }
        let features = ImageFeatureGrid::new(width, height, channels, values).map_err(|e| bad(line, "features", e.to_string()))?;
        let question = id_list(field(&obj, line, "question")?, line, "question", vocab.question.len())?;
        let answer = as_usize(field(&obj, line, "answer")?, line, "answer")?;
        if answer >= vocab.answers.len() {
            return Err(bad(line, "answer", format!("answer {answer} outside {} classes", vocab.answers.len())));
        }
        let explanation = id_list(field(&obj, line, "explanation")?, line, "explanation", vocab.explanation.len())?;
        if explanation.last() != Some(&END) {
            return Err(bad(line, "explanation", "must end with the end token"));
        }
        let att_rows = as_array(field(&obj, line, "gt_attention")?, line, "gt_attention")?;
        let mut gt_attention = Vec::with_capacity(width * height);
        for row in att_rows {
            for v in as_array(row, line, "gt_attention")? {
                gt_attention.push(as_f64(v, line, "gt_attention")?);
            }
        }
        if gt_attention.len() != width * height {
            return Err(bad(
                line,
                "gt_attention",
                format!("expected {} weights, got {}", width * height, gt_attention.len()),
            ));
        }
        instances.push(VQAInstance {
            id,
            features,
            question,
            answer,
            explanation,
            gt_attention,
        });
    }
    if instances.len() != count {
        return Err(bad(
            instances.len() + 2,
            "record",
            format!("file ends after {} of {count} records", instances.len()),
        ));
    }
    Ok(Dataset {
        width,
        height,
        channels,
        vocab,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, seed: u64) -> Dataset {
        generate_dataset(n, seed, ToyConfig::default()).unwrap()
    }

    fn to_bytes(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        write_dataset(ds, &mut out).unwrap();
        out
    }

    #[test]
    fn codes_are_orthonormal() {
        let h = orthonormal_codes();
        for i in 0..CHANNELS {
            for j in 0..CHANNELS {
                let d: f64 = (0..CHANNELS).map(|k| h[i][k] * h[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(to_bytes(&small(20, 7)), to_bytes(&small(20, 7)));
        assert_ne!(to_bytes(&small(20, 7)), to_bytes(&small(20, 8)));
    }

    #[test]
    fn instances_are_independent_of_dataset_size() {
        let a = small(5, 3);
        let b = small(9, 3);
        assert_eq!(a.instances[..], b.instances[..5]);
    }

    #[test]
    fn instance_invariants() {
        let ds = small(300, 1);
        for inst in &ds.instances {
            assert_eq!(inst.explanation.last(), Some(&END));
            assert!(inst.answer < ds.vocab.answers.len());
            let total: f64 = inst.gt_attention.iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "{total}");
            assert!(inst.gt_attention.iter().all(|v| *v >= 0.0));
            assert!(inst.question.iter().all(|&q| q >= RESERVED.len()));
        }
    }

    #[test]
    fn attention_sits_on_the_queried_object() {
        let vocab = Vocabulary::toy();
        for i in 0..200 {
            let inst = generate_instance(&mut instance_rng(4, i), i, ToyConfig::default(), &vocab).unwrap();
            let answer = vocab.answers.token(inst.answer).unwrap();
            if answer == "no" {
                continue;
            }
            let hot: Vec<usize> = (0..16).filter(|&n| inst.gt_attention[n] == 1.0).collect();
            assert_eq!(hot.len(), 1);
            let words = vocab.explanation.decode(&inst.explanation);
            // "because the <color> <shape> is in the <v> <h>"
            let cell = hot[0];
            let (x, y) = (cell % 4, cell / 4);
            let (v, h) = quadrant_words(quadrant(4, 4, x, y));
            assert_eq!(words[7], v);
            assert_eq!(words[8], h);
            let code = &inst.features.region(cell);
            let color = COLORS.iter().position(|c| *c == words[2]).unwrap();
            let shape = SHAPES.iter().position(|s| *s == words[3]).unwrap();
            let clean = cell_code(4, 4, &ToyObject { color, shape, x, y });
            let dist: f64 = code.iter().zip(clean).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 0.5);
        }
    }

    #[test]
    fn vocabulary_round_trips_tokens() {
        let vocab = Vocabulary::toy();
        let words = ["what", "color", "is", "the", "circle"];
        let ids = vocab.question.encode(&words).unwrap();
        assert_eq!(vocab.question.decode(&ids), words);
        assert_eq!(vocab.question.token(PAD), Some("<pad>"));
        assert_eq!(vocab.question.token(END), Some("<end>"));
        assert_eq!(vocab.question.token(UNK), Some("<unk>"));
    }

    #[test]
    fn build_vocab_rejects_empty_and_orders_by_appearance() {
        assert!(build_vocab(&[]).is_err());
        let a = build_vocab(&[TextRecord::new("a b", "x", "c"), TextRecord::new("b a", "y", "d")]).unwrap();
        let b = build_vocab(&[TextRecord::new("b a", "y", "d"), TextRecord::new("a b", "x", "c")]).unwrap();
        let mut ta = a.question.tokens().to_vec();
        let mut tb = b.question.tokens().to_vec();
        assert_ne!(ta, tb);
        ta.sort();
        tb.sort();
        assert_eq!(ta, tb);
        assert_eq!(a.question.id("a"), Some(3));
        assert_eq!(b.question.id("a"), Some(4));
    }

    #[test]
    fn answer_classes_are_balanced() {
        let ds = small(10_000, 2024);
        let k = ds.vocab.answers.len();
        let mut counts = vec![0usize; k];
        for inst in &ds.instances {
            counts[inst.answer] += 1;
        }
        let uniform = ds.len() as f64 / k as f64;
        for (class, c) in counts.iter().enumerate() {
            let ratio = *c as f64 / uniform;
            assert!((0.7..=1.3).contains(&ratio), "class {class}: {ratio}");
        }
    }

    #[test]
    fn file_round_trip() {
        let ds = small(100, 9);
        let bytes = to_bytes(&ds);
        let back = read_dataset(&bytes[..]).unwrap();
        assert_eq!(back, ds);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn truncated_file_reports_the_line() {
        let bytes = to_bytes(&small(5, 1));
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        // cut record 3 (file line 4) in half
        let mut cut = lines[..3].join("\n");
        cut.push('\n');
        cut.push_str(&lines[3][..lines[3].len() / 2]);
        match read_dataset(cut.as_bytes()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected format error, got {other:?}"),
        }
        let whole = lines[..3].join("\n");
        match read_dataset(whole.as_bytes()) {
            Err(Error::Format { line, field, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(field, "record");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_field_is_named() {
        let text = String::from_utf8(to_bytes(&small(2, 1))).unwrap();
        let broken = text.replacen("\"answer\":", "\"answer\":\"x\",\"_\":", 1);
        match read_dataset(broken.as_bytes()) {
            Err(Error::Format { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "answer");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
