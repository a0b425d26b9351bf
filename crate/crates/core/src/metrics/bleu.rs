use super::{ngram_counts, EvalCorpus};

/// Corpus BLEU-4 with the closest-reference-length brevity penalty (ties go
/// to the shorter reference). Any order without a matching n-gram gives 0.
pub fn bleu4(corpus: &EvalCorpus) -> f64 {
    bleu(corpus, false)
}

/// BLEU-4 with add-one smoothing on orders 2..4.
pub fn bleu4_smoothed(corpus: &EvalCorpus) -> f64 {
    bleu(corpus, true)
}

fn bleu(corpus: &EvalCorpus, smooth: bool) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for item in &corpus.items {
        let c = item.candidate.len();
        c_len += c;
        r_len += item
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for n in 1..=4 {
            let cand = ngram_counts(&item.candidate, n);
            let refs: Vec<_> = item.references.iter().map(|r| ngram_counts(r, n)).collect();
            for (g, count) in &cand {
                let max_ref = refs.iter().map(|m| m.get(g).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[n - 1] += (*count).min(max_ref);
            }
            total[n - 1] += c.saturating_sub(n - 1);
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        let (m, t) = if smooth && n > 0 { (matched[n] + 1, total[n] + 1) } else { (matched[n], total[n]) };
        if m == 0 || t == 0 {
            return 0.0;
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
    bp * (log_sum / 4.0).exp()
}
