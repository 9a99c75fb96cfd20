//! Generation metrics (corpus BLEU, ROUGE-L, an exact-match METEOR) and
//! structure precision@1.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_lengths(candidates: usize, references: usize) -> Result<()> {
    if candidates != references {
        return Err(Error::LengthMismatch { candidates, references });
    }
    if candidates == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU up to order `n` with uniform weights and brevity penalty.
/// With `smooth`, orders above 1 use add-one counts.
pub fn bleu_n<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>], n: usize, smooth: bool) -> Result<f64> {
    check_lengths(candidates.len(), references.len())?;
    if !(1..=4).contains(&n) {
        return Err(Error::Config(format!("BLEU order {n} not in 1..=4")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for k in 1..=n {
            let rc = ngram_counts(r, k);
            for (gram, count) in ngram_counts(c, k) {
                matched[k - 1] += count.min(rc.get(&gram).copied().unwrap_or(0));
                total[k - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let (m, t) = if smooth && k > 0 {
            (matched[k] + 1, total[k] + 1)
        } else {
            (matched[k], total[k])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-pair LCS F1.
pub fn rouge_l<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    check_lengths(candidates.len(), references.len())?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let lcs = lcs_len(c, r);
            if lcs == 0 {
                return 0.0;
            }
            let p = lcs as f64 / c.len() as f64;
            let rec = lcs as f64 / r.len() as f64;
            2.0 * p * rec / (p + rec)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Unigram alignment by exact match: each candidate token takes the unused
/// reference occurrence that continues the current chunk, else the first
/// unused one. Returns (matches, chunks).
fn align<S: AsRef<str>>(c: &[S], r: &[S]) -> (usize, usize) {
    let mut used = vec![false; r.len()];
    let mut matches = 0;
    let mut chunks = 0;
    let mut last: Option<usize> = None;
    for tok in c {
        let tok = tok.as_ref();
        let next = last.map(|l| l + 1).filter(|&j| j < r.len() && !used[j] && r[j].as_ref() == tok);
        let pick = next.or_else(|| (0..r.len()).find(|&j| !used[j] && r[j].as_ref() == tok));
        match pick {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if last.is_none_or(|l| l + 1 != j) {
                    chunks += 1;
                }
                last = Some(j);
            }
            None => last = None,
        }
    }
    (matches, chunks)
}

/// Exact-match METEOR: recall-weighted harmonic mean (9:1) times a
/// fragmentation penalty of 0.5·(chunks/matches)³, averaged over pairs.
pub fn meteor_lite<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    check_lengths(candidates.len(), references.len())?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, r)| {
            let (m, chunks) = align(c, r);
            if m == 0 {
                return 0.0;
            }
            let p = m as f64 / c.len() as f64;
            let rec = m as f64 / r.len() as f64;
            let fmean = 10.0 * p * rec / (rec + 9.0 * p);
            let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
            fmean * (1.0 - penalty)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Fraction of predictions equal to the gold value.
pub fn precision_at_1<T: PartialEq>(predictions: &[T], gold: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), gold.len())?;
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotPrecision {
    pub slot: String,
    pub count: usize,
    pub precision: f64,
}

/// Scores in [0, 1]; rendered as percentages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: usize,
    pub bleu: [f64; 4],
    pub meteor: f64,
    pub rouge_l: f64,
    pub structure: Vec<SlotPrecision>,
}

impl EvalReport {
    pub fn from_pairs<S: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<S>]) -> Result<Self> {
        let mut bleu = [0.0; 4];
        for (n, b) in bleu.iter_mut().enumerate() {
            *b = bleu_n(candidates, references, n + 1, false)?;
        }
        Ok(EvalReport {
            pairs: candidates.len(),
            bleu,
            meteor: meteor_lite(candidates, references)?,
            rouge_l: rouge_l(candidates, references)?,
            structure: Vec::new(),
        })
    }

    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:>7} {:>7} {:>7} {:>7} {:>7} {:>7}  pairs\n",
            "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "METEOR", "ROUGE-L"
        );
        out.push_str(&format!(
            "{:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}  {}\n",
            self.bleu[0] * 100.0,
            self.bleu[1] * 100.0,
            self.bleu[2] * 100.0,
            self.bleu[3] * 100.0,
            self.meteor * 100.0,
            self.rouge_l * 100.0,
            self.pairs
        ));
        for s in &self.structure {
            out.push_str(&format!("P@1 {:<10} {:>7.2}  ({} slots)\n", s.slot, s.precision * 100.0, s.count));
        }
        out
    }

    /// One `{"metric", "value"}` record per score, values as percentages.
    pub fn records(&self) -> Vec<serde_json::Value> {
        let mut out: Vec<serde_json::Value> = (0..4)
            .map(|i| serde_json::json!({"metric": format!("bleu-{}", i + 1), "value": self.bleu[i] * 100.0}))
            .collect();
        out.push(serde_json::json!({"metric": "meteor", "value": self.meteor * 100.0}));
        out.push(serde_json::json!({"metric": "rouge-l", "value": self.rouge_l * 100.0}));
        for s in &self.structure {
            out.push(serde_json::json!({
                "metric": format!("precision@1/{}", s.slot),
                "value": s.precision * 100.0,
                "count": s.count,
            }));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn bleu_identity_and_disjoint() {
        let c = vec![toks("a b c d e")];
        for n in 1..=4 {
            assert_eq!(bleu_n(&c, &c, n, false).unwrap(), 1.0);
        }
        assert_eq!(bleu_n(&[toks("x y")], &[toks("a b")], 1, false).unwrap(), 0.0);
        assert!(bleu_n(&c, &[], 1, false).is_err());
        assert!(bleu_n(&c, &c, 5, false).is_err());
    }

    #[test]
    fn bleu_brevity_penalty() {
        let v = bleu_n(&[toks("the cat")], &[toks("the cat sat")], 1, false).unwrap();
        assert!((v - (1.0f64 - 1.5).exp()).abs() < 1e-12);
    }

    #[test]
    fn smoothing_keeps_short_matches_nonzero() {
        let c = [toks("a b x")];
        let r = [toks("a b c")];
        assert!(bleu_n(&c, &r, 4, false).unwrap() == 0.0);
        assert!(bleu_n(&c, &r, 4, true).unwrap() > 0.0);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&[toks("a b")], &[toks("a b")]).unwrap(), 1.0);
        let v = rouge_l(&[toks("a b c")], &[toks("a c d")]).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[toks("")], &[toks("a")]).unwrap(), 0.0);
    }

    #[test]
    fn meteor_cases() {
        let id = toks("a b c d");
        let v = meteor_lite(&[id.clone()], &[id]).unwrap();
        assert!((v - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        let v = meteor_lite(&[toks("the cat sat")], &[toks("the sat cat")]).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(meteor_lite(&[toks("x")], &[toks("y")]).unwrap(), 0.0);
    }

    #[test]
    fn precision_cases() {
        assert!((precision_at_1(&[1, 2, 3], &[1, 2, 4]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(precision_at_1::<usize>(&[], &[]).is_err());
        assert!(precision_at_1(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn report_renders_percentages() {
        let c = vec![toks("a b c d")];
        let r = EvalReport::from_pairs(&c, &c).unwrap();
        assert!(r.render_table().contains("100.00"));
        assert_eq!(r.records().len(), 6);
    }
}
