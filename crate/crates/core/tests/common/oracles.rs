//! Slow, direct re-implementations of the caption metrics used as oracles.
//! They share no code with the library.

pub fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn grams(tokens: &[String], n: usize) -> Vec<Vec<String>> {
    if tokens.len() < n {
        return Vec::new();
    }
    (0..=tokens.len() - n).map(|i| tokens[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

fn modified_precision(cand: &[String], refs: &[Vec<String>], n: usize) -> (f64, f64) {
    let cg = grams(cand, n);
    let mut matched = 0;
    for g in distinct(&cg) {
        let best_ref = refs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap_or(0);
        matched += count(&cg, &g).min(best_ref);
    }
    (matched as f64, cg.len() as f64)
}

fn closest(c: usize, refs: &[Vec<String>]) -> usize {
    let mut best = refs[0].len();
    for r in refs {
        let d = (r.len() as i64 - c as i64).abs();
        let bd = (best as i64 - c as i64).abs();
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

pub fn bleu(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut product = 1.0;
    for k in 1..=n {
        let (m, t) = modified_precision(cand, refs, k);
        let p = if k == 1 { m / t } else { (m + 1.0) / (t + 1.0) };
        product *= p;
    }
    let c = cand.len() as f64;
    let r = closest(cand.len(), refs) as f64;
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    bp * product.powf(1.0 / n as f64)
}

pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0.0, 0.0);
        for (c, refs) in pairs {
            let (a, b) = modified_precision(c, refs, k);
            m += a;
            t += b;
        }
        if m == 0.0 {
            return 0.0;
        }
        log_p += (m / t).ln() / n as f64;
    }
    let c: usize = pairs.iter().map(|(c, _)| c.len()).sum();
    let r: usize = pairs.iter().map(|(c, refs)| closest(c.len(), refs)).sum();
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * log_p.exp()
}

fn is_subsequence(sub: &[String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i].clone()).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>], beta: f64) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        let l = lcs_brute(cand, r) as f64;
        if l == 0.0 {
            continue;
        }
        let p = l / cand.len() as f64;
        let rec = l / r.len() as f64;
        best = best.max((1.0 + beta * beta) * p * rec / (rec + beta * beta * p));
    }
    best
}

/// Every injective exact-match alignment; returns `(matches, fewest chunks)`
/// over the alignments with the most matches.
fn best_alignment(cand: &[String], reference: &[String]) -> (usize, usize) {
    fn rec(
        i: usize,
        cand: &[String],
        reference: &[String],
        used: &mut Vec<bool>,
        current: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if i == cand.len() {
            out.push(current.clone());
            return;
        }
        rec(i + 1, cand, reference, used, current, out);
        for j in 0..reference.len() {
            if !used[j] && reference[j] == cand[i] {
                used[j] = true;
                current.push((i, j));
                rec(i + 1, cand, reference, used, current, out);
                current.pop();
                used[j] = false;
            }
        }
    }
    let mut all = Vec::new();
    rec(0, cand, reference, &mut vec![false; reference.len()], &mut Vec::new(), &mut all);
    let most = all.iter().map(Vec::len).max().unwrap_or(0);
    let chunks = all
        .iter()
        .filter(|a| a.len() == most && most > 0)
        .map(|a| {
            let mut c = 1;
            for w in a.windows(2) {
                if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
                    c += 1;
                }
            }
            c
        })
        .min()
        .unwrap_or(0);
    (most, chunks)
}

pub fn meteor(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        let (m, ch) = best_alignment(cand, r);
        if m == 0 {
            continue;
        }
        let p = m as f64 / cand.len() as f64;
        let rc = m as f64 / r.len() as f64;
        let f = p * rc / (0.9 * p + 0.1 * rc);
        best = best.max(f * (1.0 - 0.5 * (ch as f64 / m as f64).powi(3)));
    }
    best
}

/// CIDEr over explicit n-gram vectors spanning the union of all n-grams seen.
pub fn cider(pairs: &[(Vec<String>, Vec<Vec<String>>)]) -> Vec<f64> {
    let n_docs = pairs.len() as f64;
    let mut scores = vec![0.0; pairs.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = Vec::new();
        for (c, refs) in pairs {
            for g in grams(c, n).into_iter().chain(refs.iter().flat_map(|r| grams(r, n))) {
                if !vocab.contains(&g) {
                    vocab.push(g);
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| pairs.iter().filter(|(_, refs)| refs.iter().any(|r| count(&grams(r, n), g) > 0)).count() as f64)
            .collect();
        let vector = |tokens: &[String]| -> Vec<f64> {
            let gs = grams(tokens, n);
            vocab
                .iter()
                .zip(&df)
                .map(|(g, d)| count(&gs, g) as f64 * (n_docs.ln() - d.max(1.0).ln()))
                .collect()
        };
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (s, (c, refs)) in scores.iter_mut().zip(pairs) {
            let vc = vector(c);
            let mut total = 0.0;
            for r in refs {
                let vr = vector(r);
                let (nc, nr) = (norm(&vc), norm(&vr));
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().zip(&vr).map(|(a, b)| a.min(*b) * b).sum();
                    total += dot / (nc * nr);
                }
            }
            *s += total / refs.len() as f64 / 4.0 * 10.0;
        }
    }
    scores
}

/// Rank of each value: count of smaller values plus the mean position among ties.
fn ranks(v: &[f64]) -> Vec<f64> {
    v.iter()
        .map(|x| {
            let less = v.iter().filter(|y| *y < x).count() as f64;
            let equal = v.iter().filter(|y| *y == x).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Candidate/reference pairs covering repeats, reordering, disjoint
/// vocabularies, length mismatches and multiple references.
pub fn hand_built_pairs() -> Vec<(Vec<String>, Vec<Vec<String>>)> {
    let raw: Vec<(&str, Vec<&str>)> = vec![
        ("the cat sat", vec!["the cat sat on mat"]),
        ("the cat sat on mat", vec!["the cat sat on mat"]),
        ("a b c d e f", vec!["a b c d e f"]),
        ("mat on sat cat the", vec!["the cat sat on mat"]),
        ("the the the the", vec!["the cat sat on the mat"]),
        ("x y z", vec!["a b c"]),
        (
            "because the red circle is in the top left",
            vec!["because the red circle is in the top left"],
        ),
        (
            "because the red circle is in the top right",
            vec!["because the red circle is in the top left"],
        ),
        ("because the blue square is left", vec!["because the blue square is in the bottom left"]),
        ("because there is no green triangle", vec!["because there is no green triangle"]),
        ("because there is no red circle", vec!["because there is no green triangle"]),
        ("the red circle the red circle", vec!["the red circle is here"]),
        ("a a b b a a", vec!["a b a b a"]),
        ("one two three four five six seven", vec!["seven six five four three two one"]),
        ("one", vec!["one two"]),
        ("the cat is on the mat", vec!["there is a cat on the mat", "the cat is on the mat"]),
        ("a cat on a mat", vec!["the cat sat on the mat", "there is a cat on a mat"]),
        (
            "red square top left",
            vec!["because the red square is in the top left", "red square in the top left"],
        ),
        (
            "left top the in is square red the because",
            vec!["because the red square is in the top left"],
        ),
        ("because because because", vec!["because the yellow triangle is in the bottom right"]),
        (
            "the yellow triangle is in the bottom right corner of the grid",
            vec!["because the yellow triangle is in the bottom right"],
        ),
        (
            "in the bottom right",
            vec!["because the yellow triangle is in the bottom right", "bottom right"],
        ),
        ("a b a b a b", vec!["b a b a b a"]),
    ];
    raw.into_iter()
        .map(|(c, refs)| (words(c), refs.into_iter().map(words).collect()))
        .collect()
}

/// Paired series for rank correlation, with and without ties.
pub fn rank_series() -> Vec<(Vec<f64>, Vec<f64>)> {
    vec![
        (vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 3.0, 2.0, 4.0]),
        (vec![1.0, 2.0, 3.0, 4.0, 5.0], vec![5.0, 6.0, 7.0, 8.0, 7.0]),
        (vec![0.1, 0.1, 0.5, 0.3, 0.3, 0.9], vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        (vec![3.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]),
        (vec![1.0, 1.0, 1.0, 2.0], vec![4.0, 3.0, 2.0, 1.0]),
        (vec![0.25, 0.25, 0.25, 0.25], vec![1.0, 0.0, 0.0, 0.0]),
        (vec![2.5, -1.0, 0.0, 7.0, 3.0, 3.0, 1.0], vec![1.0, 2.0, 2.0, 9.0, 4.0, 4.0, 0.5]),
    ]
}
