use rust_stemmers::{Algorithm, Stemmer};

use super::EvalCorpus;

const ALPHA: f64 = 0.9;
const GAMMA: f64 = 0.5;
const BETA: i32 = 3;
/// Search nodes allowed per alignment stage before falling back to greedy.
const NODE_BUDGET: usize = 200_000;

/// Alignment as `ref_for[i] = Some(j)` for candidate token `i`.
type Alignment = Vec<Option<usize>>;

fn chunks(al: &Alignment) -> usize {
    let mut count = 0;
    let mut prev: Option<usize> = None;
    for m in al {
        match (m, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => count += 1,
            (None, _) => {}
        }
        prev = *m;
    }
    count
}

fn matches(al: &Alignment) -> usize {
    al.iter().filter(|m| m.is_some()).count()
}

struct Search<'a> {
    options: &'a [Vec<usize>],
    best: Alignment,
    best_key: (usize, usize),
    nodes: usize,
}

impl Search<'_> {
    fn key(al: &Alignment) -> (usize, usize) {
        (matches(al), usize::MAX - chunks(al))
    }

    fn dfs(&mut self, i: usize, al: &mut Alignment, used: &mut Vec<bool>, found: usize) -> bool {
        self.nodes += 1;
        if self.nodes > NODE_BUDGET {
            return false;
        }
        if i == al.len() {
            let k = Self::key(al);
            if k > self.best_key {
                self.best_key = k;
                self.best = al.clone();
            }
            return true;
        }
        // bound: cannot beat the best match count even if every remaining token matched
        let remaining = self.options[i..].iter().filter(|o| !o.is_empty()).count();
        if found + remaining < self.best_key.0 {
            return true;
        }
        if al[i].is_some() {
            return self.dfs(i + 1, al, used, found);
        }
        for &j in self.options[i].iter() {
            if !used[j] {
                used[j] = true;
                al[i] = Some(j);
                let ok = self.dfs(i + 1, al, used, found + 1);
                al[i] = None;
                used[j] = false;
                if !ok {
                    return false;
                }
            }
        }
        self.dfs(i + 1, al, used, found)
    }
}

/// Extends `fixed` with matches from `options`, maximizing the number of
/// matches and then minimizing chunks.
fn align_stage(fixed: &Alignment, ref_len: usize, options: &[Vec<usize>]) -> Alignment {
    let mut used = vec![false; ref_len];
    for j in fixed.iter().flatten() {
        used[*j] = true;
    }
    let mut search = Search { options, best: fixed.clone(), best_key: Search::key(fixed), nodes: 0 };
    let mut al = fixed.clone();
    let base = matches(fixed);
    if search.dfs(0, &mut al, &mut used.clone(), base) {
        return search.best;
    }
    // greedy: continue the previous match where possible, else the first free match
    let mut al = fixed.clone();
    for i in 0..al.len() {
        if al[i].is_some() {
            continue;
        }
        let next = i.checked_sub(1).and_then(|p| al[p]).map(|p| p + 1);
        let pick = match next {
            Some(n) if options[i].contains(&n) && !used[n] => Some(n),
            _ => options[i].iter().copied().find(|j| !used[*j]),
        };
        if let Some(j) = pick {
            used[j] = true;
            al[i] = Some(j);
        }
    }
    al
}

/// METEOR with exact and stem matching stages only.
pub fn meteor_sentence(candidate: &[String], reference: &[String], stemmer: &Stemmer) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let exact: Vec<Vec<usize>> =
        candidate.iter().map(|c| reference.iter().enumerate().filter(|(_, r)| *r == c).map(|(j, _)| j).collect()).collect();
    let al = align_stage(&vec![None; candidate.len()], reference.len(), &exact);
    let ref_stems: Vec<String> = reference.iter().map(|r| stemmer.stem(r).into_owned()).collect();
    let stem: Vec<Vec<usize>> = candidate
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if al[i].is_some() {
                return Vec::new();
            }
            let s = stemmer.stem(c);
            ref_stems.iter().enumerate().filter(|(_, r)| **r == s).map(|(j, _)| j).collect()
        })
        .collect();
    let al = align_stage(&al, reference.len(), &stem);
    let m = matches(&al);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = p * r / (ALPHA * p + (1.0 - ALPHA) * r);
    let penalty = GAMMA * (chunks(&al) as f64 / m as f64).powi(BETA);
    fmean * (1.0 - penalty)
}

/// Mean over items of the best-reference METEOR-lite score.
pub fn meteor_lite(corpus: &EvalCorpus) -> f64 {
    if corpus.items.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let sum: f64 = corpus
        .items
        .iter()
        .map(|it| it.references.iter().map(|r| meteor_sentence(&it.candidate, r, &stemmer)).fold(0.0, f64::max))
        .sum();
    sum / corpus.items.len() as f64
}
