use super::EvalCorpus;

const BETA: f64 = 1.2;

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
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

fn f_lcs(c: &[String], r: &[String]) -> f64 {
    let l = lcs_len(c, r);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / c.len() as f64;
    let rec = l as f64 / r.len() as f64;
    (1.0 + BETA * BETA) * p * rec / (rec + BETA * BETA * p)
}

/// ROUGE-L F-measure (β = 1.2) against the best reference, averaged over items.
pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    if corpus.items.is_empty() {
        return 0.0;
    }
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| it.references.iter().map(|r| f_lcs(&it.candidate, r)).fold(0.0, f64::max))
        .sum();
    sum / corpus.items.len() as f64
}
