//! Slow, obviously-correct reference implementations used by the property
//! and acceptance tests. Nothing here calls into the library's algorithms.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use chrono::{Datelike, NaiveDate};

/// Clipped n-gram overlap by repeatedly removing matched reference grams.
pub fn clipped_matches(cand: &[String], reference: &[String], n: usize) -> (usize, usize, usize) {
    let grams = |t: &[String]| -> Vec<Vec<String>> {
        if t.len() < n {
            Vec::new()
        } else {
            (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
        }
    };
    let c = grams(cand);
    let mut pool = grams(reference);
    let ref_total = pool.len();
    let mut matched = 0;
    for g in &c {
        if let Some(pos) = pool.iter().position(|p| p == g) {
            pool.swap_remove(pos);
            matched += 1;
        }
    }
    (matched, c.len(), ref_total)
}

fn div(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn rouge_n(cand: &[String], reference: &[String], n: usize) -> (f64, f64, f64) {
    let (m, c, r) = clipped_matches(cand, reference, n);
    let (p, rc) = (div(m, c), div(m, r));
    (p, rc, f1(p, rc))
}

/// LCS by trying every subsequence of the shorter side, longest first.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    assert!(short.len() <= 16, "exhaustive LCS is for short inputs");
    let is_subseq = |s: &[&String]| {
        let mut it = long.iter();
        s.iter().all(|x| it.any(|y| y == *x))
    };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let bits = mask.count_ones() as usize;
        if bits <= best {
            continue;
        }
        let sub: Vec<&String> = (0..short.len())
            .filter(|i| mask >> i & 1 == 1)
            .map(|i| &short[i])
            .collect();
        if is_subseq(&sub) {
            best = bits;
        }
    }
    best
}

pub fn rouge_l(cand: &[String], reference: &[String]) -> (f64, f64, f64) {
    let l = lcs(cand, reference);
    let (p, r) = (div(l, cand.len()), div(l, reference.len()));
    (p, r, f1(p, r))
}

/// Sentence BLEU with uniform weights over orders `1..=max_n`, no smoothing.
pub fn bleu(cand: &[String], reference: &[String], weights: &[f64]) -> f64 {
    if cand.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let (m, c, _) = clipped_matches(cand, reference, i + 1);
        if m == 0 {
            return 0.0;
        }
        log_sum += w * (m as f64 / c as f64).ln();
    }
    let bp = if cand.len() > reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / cand.len() as f64).exp()
    };
    bp * log_sum.exp()
}

/// Fraction of candidate (resp. reference) tokens that occur anywhere in the
/// other sentence.
pub fn unigram_hit_rates(cand: &[String], reference: &[String]) -> (f64, f64) {
    let cs: BTreeSet<&String> = cand.iter().collect();
    let rs: BTreeSet<&String> = reference.iter().collect();
    let p = cand.iter().filter(|t| rs.contains(t)).count();
    let r = reference.iter().filter(|t| cs.contains(t)).count();
    (div(p, cand.len()), div(r, reference.len()))
}

/// At least twelve whole months from `a` to `b`, decided by comparing
/// `(year, month, day)` against `a` shifted one year forward.
pub fn twelve_months_apart(a: NaiveDate, b: NaiveDate) -> bool {
    (b.year(), b.month(), b.day()) >= (a.year() + 1, a.month(), a.day())
}

/// Image id pairs from the chained walk: every location's images sorted by
/// `(date, id)`, then from each anchor the first later image at least a year
/// away is taken as partner and new anchor.
pub fn chain_pairs(images: &[(String, String, NaiveDate)]) -> Vec<(String, String)> {
    let mut locs: BTreeMap<&str, Vec<(NaiveDate, &str)>> = BTreeMap::new();
    for (id, loc, d) in images {
        locs.entry(loc).or_default().push((*d, id));
    }
    let mut out = Vec::new();
    for (_, mut list) in locs {
        list.sort();
        let mut anchor = 0;
        'walk: loop {
            for j in anchor + 1..list.len() {
                if twelve_months_apart(list[anchor].0, list[j].0) {
                    out.push((list[anchor].1.to_string(), list[j].1.to_string()));
                    anchor = j;
                    continue 'walk;
                }
            }
            break;
        }
    }
    out
}

/// `(layer, index)` of the `k` smallest magnitudes under a full sort with
/// ties broken by layer name then index.
pub fn smallest_k(weights: &BTreeMap<String, Vec<f64>>, k: usize) -> BTreeSet<(String, usize)> {
    let mut all: Vec<(f64, String, usize)> = weights
        .iter()
        .flat_map(|(l, w)| w.iter().enumerate().map(move |(i, v)| (v.abs(), l.clone(), i)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.into_iter().take(k).map(|(_, l, i)| (l, i)).collect()
}

/// Central differences of `f` around every coordinate of `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut dn = x.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Plain triple-loop product of row-major matrices.
pub fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            for t in 0..k {
                out[i * m + j] += a[i * k + t] * b[t * m + j];
            }
        }
    }
    out
}
