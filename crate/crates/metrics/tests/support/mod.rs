//! Naive reference implementations used as test oracles.
#![allow(dead_code)]

use mscl_metrics::EvalPair;

fn count_occurrences(tokens: &[String], gram: &[String]) -> usize {
    if tokens.len() < gram.len() {
        return 0;
    }
    (0..=tokens.len() - gram.len()).filter(|&i| tokens[i..i + gram.len()] == *gram).count()
}

/// Clipped n-gram matches and total candidate n-grams, by linear scans.
pub fn clipped_counts(cand: &[String], reference: &[String], n: usize) -> (usize, usize) {
    if cand.len() < n {
        return (0, 0);
    }
    let mut matched = 0;
    for i in 0..=cand.len() - n {
        let gram = &cand[i..i + n];
        // count each distinct gram once, at its first position
        if (0..i).any(|k| cand[k..k + n] == *gram) {
            continue;
        }
        matched += count_occurrences(cand, gram).min(count_occurrences(reference, gram));
    }
    (matched, cand.len() - n + 1)
}

pub fn bleu(pairs: &[EvalPair], max_n: usize) -> f64 {
    let mut precisions = Vec::new();
    for n in 1..=max_n {
        let (mut m, mut t) = (0, 0);
        for p in pairs {
            let (a, b) = clipped_counts(&p.candidate, &p.reference, n);
            m += a;
            t += b;
        }
        if m == 0 {
            return 0.0;
        }
        precisions.push(m as f64 / t as f64);
    }
    let c: usize = pairs.iter().map(|p| p.candidate.len()).sum();
    let r: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let geo = precisions.iter().product::<f64>().powf(1.0 / max_n as f64);
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    bp * geo
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|s| it.any(|t| t == *s))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
pub fn lcs_enumerate(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16, "enumeration oracle is exponential");
    let mut best = 0;
    for bits in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| bits >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

/// LCS by the textbook full-table recurrence.
pub fn lcs_table(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    let mut total = 0.0;
    for p in pairs {
        let l = lcs_table(&p.candidate, &p.reference) as f64;
        if l > 0.0 {
            let prec = l / p.candidate.len() as f64;
            let rec = l / p.reference.len() as f64;
            total += 2.0 * prec * rec / (prec + rec);
        }
    }
    total / pairs.len() as f64
}

/// Exact-match alignment as (candidate index, reference index) pairs.
fn align(cand: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut taken = Vec::new();
    let mut out = Vec::new();
    for (i, c) in cand.iter().enumerate() {
        for (j, r) in reference.iter().enumerate() {
            if c == r && !taken.contains(&j) {
                taken.push(j);
                out.push((i, j));
                break;
            }
        }
    }
    out
}

pub fn meteor_pair(p: &EvalPair) -> f64 {
    let a = align(&p.candidate, &p.reference);
    if a.is_empty() {
        return 0.0;
    }
    // a new chunk starts unless both sides advance by exactly one
    let chunks = 1 + a.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let m = a.len() as f64;
    let prec = m / p.candidate.len() as f64;
    let rec = m / p.reference.len() as f64;
    let f = 10.0 * prec * rec / (rec + 9.0 * prec);
    f * (1.0 - 0.5 * (chunks as f64 / m).powi(3))
}

/// Harmonic mean term alone, before the fragmentation penalty.
pub fn meteor_f_mean(p: &EvalPair) -> f64 {
    let m = align(&p.candidate, &p.reference).len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let prec = m / p.candidate.len() as f64;
    let rec = m / p.reference.len() as f64;
    10.0 * prec * rec / (rec + 9.0 * prec)
}

pub fn meteor(pairs: &[EvalPair]) -> f64 {
    pairs.iter().map(meteor_pair).sum::<f64>() / pairs.len() as f64
}

/// Random token sequences over a small vocabulary so n-grams recur.
pub fn random_pairs(seed: u64, count: usize, max_len: usize) -> Vec<EvalPair> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let vocab = ["the", "heart", "is", "normal", "no", "effusion", "lungs", "clear", "."];
    let seq = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<String> {
        let len = rng.random_range(1..=max_len);
        (0..len).map(|_| vocab[rng.random_range(0..vocab.len())].to_string()).collect()
    };
    (0..count)
        .map(|_| {
            let reference = seq(&mut rng);
            // half the candidates are perturbed copies so high-order n-grams match
            let candidate = if rng.random_bool(0.5) {
                let mut c = reference.clone();
                if rng.random_bool(0.5) {
                    let k = rng.random_range(0..c.len());
                    c[k] = vocab[rng.random_range(0..vocab.len())].to_string();
                }
                if rng.random_bool(0.5) {
                    c.push("clear".to_string());
                }
                c
            } else {
                seq(&mut rng)
            };
            EvalPair::new(candidate, reference)
        })
        .collect()
}
