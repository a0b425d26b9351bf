use std::collections::{HashMap, HashSet};

use super::{ngram_counts, EvalCorpus};

const SIGMA: f64 = 6.0;

struct Vector<'a> {
    weights: [HashMap<&'a [String], f64>; 4],
    norms: [f64; 4],
    length: usize,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, ref_len: f64) -> Vector<'a> {
    let mut weights: [HashMap<&[String], f64>; 4] = Default::default();
    let mut norms = [0.0; 4];
    for n in 1..=4 {
        for (g, tf) in ngram_counts(tokens, n) {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            let w = tf as f64 * (ref_len - d.ln());
            norms[n - 1] += w * w;
            weights[n - 1].insert(g, w);
        }
        norms[n - 1] = norms[n - 1].sqrt();
    }
    Vector { weights, norms, length: tokens.len() }
}

fn sim(hyp: &Vector, r: &Vector) -> [f64; 4] {
    let delta = hyp.length as f64 - r.length as f64;
    let penalty = (-(delta * delta) / (2.0 * SIGMA * SIGMA)).exp();
    let mut out = [0.0; 4];
    for n in 0..4 {
        let mut v = 0.0;
        for (g, wh) in &hyp.weights[n] {
            if let Some(wr) = r.weights[n].get(g) {
                v += wh.min(*wr) * wr;
            }
        }
        if hyp.norms[n] != 0.0 && r.norms[n] != 0.0 {
            v /= hyp.norms[n] * r.norms[n];
        }
        out[n] = v * penalty;
    }
    out
}

/// CIDEr-D: clipped TF-IDF n-gram cosine (n = 1..4) with a Gaussian length
/// penalty, averaged over orders and references, scaled by 10 and averaged
/// over items. Document frequencies come from the references of all items.
pub fn cider_d(corpus: &EvalCorpus) -> f64 {
    let items = &corpus.items;
    if items.is_empty() {
        return 0.0;
    }
    if items.len() == 1 {
        log::warn!("CIDEr-D over a single item: every reference n-gram has zero idf");
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for it in items {
        let mut seen = HashSet::new();
        for r in &it.references {
            for n in 1..=4 {
                seen.extend(ngram_counts(r, n).into_keys());
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let ref_len = (items.len() as f64).ln();
    let mut total = 0.0;
    for it in items {
        let hyp = tfidf(&it.candidate, &df, ref_len);
        let mut acc = 0.0;
        for r in &it.references {
            let rv = tfidf(r, &df, ref_len);
            acc += sim(&hyp, &rv).iter().sum::<f64>() / 4.0;
        }
        total += 10.0 * acc / it.references.len() as f64;
    }
    total / items.len() as f64
}
