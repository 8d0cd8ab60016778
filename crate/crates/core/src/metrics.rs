//! Caption metrics, rank correlation and the Friedman/Nemenyi procedure.
//!
//! Sentence metrics take token slices. An empty candidate scores 0 on every
//! metric. METEOR here is the exact-match stage only (no stemming or
//! synonyms), so its scores are not comparable with full METEOR.

use std::collections::HashMap;
use std::hash::Hash;

use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::Error;

/// Lowercases, splits on whitespace and strips sentence-final punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    let trimmed = text.trim().trim_end_matches(['.', '!', '?', ',', ';', ':']);
    trimmed.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *counts.entry(g).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches of `cand` against `refs`, and the candidate's
/// n-gram count.
fn clipped_matches<T: Eq + Hash>(cand: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, k) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(k);
        }
    }
    let matched = c.iter().map(|(g, k)| (*k).min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

/// Reference length closest to `c`, the shorter one on ties.
fn closest_ref_len<T>(c: usize, refs: &[&[T]]) -> usize {
    refs.iter().map(|r| r.len()).min_by_key(|&r| (r.abs_diff(c), r)).unwrap_or(0)
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    }
}

fn check_order(n: usize) -> Result<(), Error> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::Metric(format!("BLEU order must be 1..=4, got {n}")))
    }
}

fn check_refs<T>(refs: &[&[T]]) -> Result<(), Error> {
    if refs.is_empty() || refs.iter().any(|r| r.is_empty()) {
        Err(Error::Metric("every pair needs at least one nonempty reference".into()))
    } else {
        Ok(())
    }
}

/// Sentence BLEU-n with add-one smoothing on orders above one.
pub fn sentence_bleu<T: Eq + Hash>(cand: &[T], refs: &[&[T]], n: usize) -> Result<f64, Error> {
    check_order(n)?;
    check_refs(refs)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = clipped_matches(cand, refs, k);
        let p = if k == 1 {
            m as f64 / t as f64
        } else {
            (m as f64 + 1.0) / (t as f64 + 1.0)
        };
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let bp = brevity_penalty(cand.len(), closest_ref_len(cand.len(), refs));
    Ok(bp * (log_sum / n as f64).exp())
}

/// One candidate with its references.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair<T> {
    pub candidate: Vec<T>,
    pub references: Vec<Vec<T>>,
}

impl<T> EvalPair<T> {
    pub fn new(candidate: Vec<T>, references: Vec<Vec<T>>) -> Self {
        Self { candidate, references }
    }

    fn refs(&self) -> Vec<&[T]> {
        self.references.iter().map(Vec::as_slice).collect()
    }
}

/// Corpus BLEU-n: pooled clipped precisions, pooled brevity penalty, no smoothing.
pub fn corpus_bleu<T: Eq + Hash>(pairs: &[EvalPair<T>], n: usize) -> Result<f64, Error> {
    check_order(n)?;
    if pairs.is_empty() {
        return Err(Error::Metric("empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for p in pairs {
        let refs = p.refs();
        check_refs(&refs)?;
        for k in 1..=n {
            let (m, t) = clipped_matches(&p.candidate, &refs, k);
            matched[k - 1] += m;
            total[k - 1] += t;
        }
        c += p.candidate.len();
        r += closest_ref_len(p.candidate.len(), &refs);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        if matched[k] == 0 || total[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (matched[k] as f64 / total[k] as f64).ln();
    }
    Ok(brevity_penalty(c, r) * (log_sum / n as f64).exp())
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure, best over references.
pub fn rouge_l<T: Eq>(cand: &[T], refs: &[&[T]], beta: f64) -> Result<f64, Error> {
    check_refs(refs)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let b2 = beta * beta;
    let best = refs
        .iter()
        .map(|r| {
            let l = lcs_len(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let p = l / cand.len() as f64;
            let rec = l / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CiderScores {
    pub per_pair: Vec<f64>,
    pub mean: f64,
}

/// Plain CIDEr (no length penalty) over `pairs`, n-grams 1..=`n_max`.
///
/// Document frequencies count the pairs whose reference set contains an
/// n-gram; the vector weight is `tf * (ln N - ln max(1, df))`. Per order the
/// score is the clipped cosine `sum min(c, r) r / (|c| |r|)`, averaged over
/// references; orders are averaged and the result scaled by 10.
pub fn cider<T: Eq + Hash>(pairs: &[EvalPair<T>], n_max: usize) -> Result<CiderScores, Error> {
    if pairs.len() < 2 {
        return Err(Error::Metric(
            "CIDEr needs a corpus of at least 2 pairs for idf; use a sentence-level metric instead".into(),
        ));
    }
    if n_max == 0 {
        return Err(Error::Metric("CIDEr order must be at least 1".into()));
    }
    for p in pairs {
        check_refs(&p.refs())?;
    }
    let log_n = (pairs.len() as f64).ln();
    let mut per_pair = vec![0.0; pairs.len()];
    for n in 1..=n_max {
        let mut df: HashMap<&[T], usize> = HashMap::new();
        for p in pairs {
            let mut seen: HashMap<&[T], ()> = HashMap::new();
            for r in &p.references {
                for g in ngram_counts(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (score, p) in per_pair.iter_mut().zip(pairs) {
            let (vc, nc) = tfidf(&p.candidate, n, &df, log_n);
            let mut acc = 0.0;
            for r in &p.references {
                let (vr, nr) = tfidf(r, n, &df, log_n);
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc.iter().filter_map(|(g, c)| vr.get(g).map(|rv| c.min(*rv) * rv)).sum();
                acc += dot / (nc * nr);
            }
            *score += acc / p.references.len() as f64;
        }
    }
    for s in &mut per_pair {
        *s = *s / n_max as f64 * 10.0;
    }
    let mean = per_pair.iter().sum::<f64>() / per_pair.len() as f64;
    Ok(CiderScores { per_pair, mean })
}

type Weighted<'a, T> = (HashMap<&'a [T], f64>, f64);

fn tfidf<'a, T: Eq + Hash>(tokens: &'a [T], n: usize, df: &HashMap<&[T], usize>, log_n: f64) -> Weighted<'a, T> {
    let v: HashMap<&[T], f64> = ngram_counts(tokens, n)
        .into_iter()
        .map(|(g, tf)| {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, tf as f64 * (log_n - d.ln()))
        })
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Fewest chunks over all maximum exact-match alignments, with the match count.
fn meteor_alignment<T: Eq>(cand: &[T], reference: &[T]) -> (usize, usize) {
    // Maximum matching size for exact matches: per token type, the smaller count.
    let mut matches = 0;
    for (i, x) in cand.iter().enumerate() {
        if cand[..i].contains(x) {
            continue;
        }
        let a = cand.iter().filter(|y| *y == x).count();
        let b = reference.iter().filter(|y| *y == x).count();
        matches += a.min(b);
    }
    if matches == 0 {
        return (0, 0);
    }
    struct Search<'a, T> {
        cand: &'a [T],
        reference: &'a [T],
        target: usize,
        used: Vec<bool>,
        best: usize,
    }
    impl<T: Eq> Search<'_, T> {
        // `last` is the reference index of the previous aligned candidate
        // token when that token was aligned at position i - 1.
        fn go(&mut self, i: usize, made: usize, chunks: usize, last: Option<usize>) {
            if chunks >= self.best {
                return;
            }
            let remaining = self.cand.len() - i;
            if made + remaining < self.target {
                return;
            }
            if i == self.cand.len() {
                if made == self.target {
                    self.best = chunks;
                }
                return;
            }
            for j in 0..self.reference.len() {
                if self.used[j] || self.reference[j] != self.cand[i] {
                    continue;
                }
                let extends = last.is_some_and(|l| l + 1 == j);
                self.used[j] = true;
                self.go(i + 1, made + 1, chunks + usize::from(!extends), Some(j));
                self.used[j] = false;
            }
            self.go(i + 1, made, chunks, None);
        }
    }
    let mut s = Search {
        cand,
        reference,
        target: matches,
        used: vec![false; reference.len()],
        best: usize::MAX,
    };
    s.go(0, 0, 0, None);
    (matches, s.best)
}

/// Exact-match METEOR: `Fmean = 10PR / (R + 9P)` times `1 - 0.5 (chunks/m)^3`,
/// best over references.
pub fn meteor_exact<T: Eq>(cand: &[T], refs: &[&[T]]) -> Result<f64, Error> {
    check_refs(refs)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let best = refs
        .iter()
        .map(|r| {
            let (m, chunks) = meteor_alignment(cand, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / cand.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let fmean = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            fmean * (1.0 - penalty)
        })
        .fold(0.0, f64::max);
    Ok(best)
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankCorrelation {
    pub value: f64,
    /// Set when one side has zero variance; `value` is then 0.
    pub degenerate: bool,
}

fn pearson(x: &[f64], y: &[f64]) -> RankCorrelation {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return RankCorrelation {
            value: 0.0,
            degenerate: true,
        };
    }
    RankCorrelation {
        value: (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), Error> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Metric(format!(
            "rank correlation needs two equal-length series of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Metric("rank correlation inputs must be finite".into()));
    }
    Ok(())
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<RankCorrelation, Error> {
    check_pair(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

/// Kendall's tau-b.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<RankCorrelation, Error> {
    check_pair(x, y)?;
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            let dx = x[i].total_cmp(&x[j]) as i64;
            let dy = y[i].total_cmp(&y[j]) as i64;
            match (dx, dy) {
                (0, 0) => {}
                (0, _) => tie_x += 1,
                (_, 0) => tie_y += 1,
                _ if dx == dy => concordant += 1,
                _ => discordant += 1,
            }
        }
    }
    let n0 = (concordant + discordant + tie_x) as f64 * (concordant + discordant + tie_y) as f64;
    if n0 == 0.0 {
        return Ok(RankCorrelation {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorrelation {
        value: (concordant - discordant) as f64 / n0.sqrt(),
        degenerate: false,
    })
}

/// Scores of `k` models (rows) on `N` conditions (columns); higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub models: Vec<String>,
    pub conditions: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(models: Vec<String>, conditions: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self, Error> {
        if scores.len() != models.len() || scores.iter().any(|r| r.len() != conditions.len()) {
            return Err(Error::Metric("score matrix must be models x conditions".into()));
        }
        if scores.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Metric("score matrix entries must be finite".into()));
        }
        Ok(Self { models, conditions, scores })
    }
}

/// Studentized-range critical values divided by sqrt(2), for k = 2..=10.
pub const NEMENYI_Q_005: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
pub const NEMENYI_Q_010: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

pub fn nemenyi_q(k: usize, alpha: f64) -> Result<f64, Error> {
    let table = if alpha == 0.05 {
        &NEMENYI_Q_005
    } else if alpha == 0.10 {
        &NEMENYI_Q_010
    } else {
        return Err(Error::Metric(format!("no Nemenyi table for alpha {alpha}; use 0.05 or 0.10")));
    };
    if !(2..=10).contains(&k) {
        return Err(Error::Metric(format!("Nemenyi table covers 2..=10 models, got {k}")));
    }
    Ok(table[k - 2])
}

/// `q * sqrt(k (k + 1) / (6 N))`.
pub fn critical_difference(k: usize, n: usize, alpha: f64) -> Result<f64, Error> {
    Ok(nemenyi_q(k, alpha)? * ((k * (k + 1)) as f64 / (6 * n) as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FriedmanNemenyi {
    /// Mean rank per model, rank 1 being the best.
    pub mean_ranks: Vec<f64>,
    pub chi_square: f64,
    pub p_value: f64,
    pub critical_difference: f64,
    /// Conditions in which every model tied.
    pub tied_conditions: usize,
}

pub fn friedman_nemenyi(m: &ScoreMatrix, alpha: f64) -> Result<FriedmanNemenyi, Error> {
    let k = m.models.len();
    let n = m.conditions.len();
    if k < 2 || n < 2 {
        return Err(Error::Metric(format!("need at least 2 models and 2 conditions, got {k} and {n}")));
    }
    let mut sums = vec![0.0; k];
    let mut tied_conditions = 0;
    for c in 0..n {
        // Negate so the highest score gets rank 1.
        let column: Vec<f64> = m.scores.iter().map(|row| -row[c]).collect();
        if column.iter().all(|v| *v == column[0]) {
            tied_conditions += 1;
        }
        for (s, r) in sums.iter_mut().zip(average_ranks(&column)) {
            *s += r;
        }
    }
    let mean_ranks: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let (kf, nf) = (k as f64, n as f64);
    let sq: f64 = mean_ranks.iter().map(|r| r * r).sum();
    let chi_square = (12.0 * nf / (kf * (kf + 1.0)) * (sq - kf * (kf + 1.0).powi(2) / 4.0)).max(0.0);
    let dist = ChiSquared::new(kf - 1.0).map_err(|e| Error::Metric(e.to_string()))?;
    let p_value = 1.0 - dist.cdf(chi_square);
    Ok(FriedmanNemenyi {
        mean_ranks,
        chi_square,
        p_value,
        critical_difference: critical_difference(k, n, alpha)?,
        tied_conditions,
    })
}
