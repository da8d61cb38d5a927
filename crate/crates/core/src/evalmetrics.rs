//! Full-catalog ranking metrics: HR@K and NDCG@K with a single relevant item.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::model::{ForwardOptions, TokenId, TransformerModel};
use crate::recdata::{RecDataset, Split};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub ppl: f64,
    pub n_evaluated: usize,
    pub param_count_non_embedding: usize,
}

impl EvalReport {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.hr {
            let _ = writeln!(s, "hr@{k}={v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(s, "ndcg@{k}={v:.6}");
        }
        let _ = writeln!(s, "ppl={:.6}", self.ppl);
        let _ = writeln!(s, "n_evaluated={}", self.n_evaluated);
        let _ = writeln!(s, "param_count_non_embedding={}", self.param_count_non_embedding);
        s
    }

    /// Tab-separated header matching [`Self::tsv_row`].
    pub fn tsv_header(&self) -> String {
        let mut cols: Vec<String> = self.hr.keys().map(|k| format!("hr@{k}")).collect();
        cols.extend(self.ndcg.keys().map(|k| format!("ndcg@{k}")));
        cols.extend(["ppl", "n_evaluated", "param_count_non_embedding"].map(String::from));
        cols.join("\t")
    }

    pub fn tsv_row(&self) -> String {
        let mut cols: Vec<String> = self.hr.values().map(|v| format!("{v:.6}")).collect();
        cols.extend(self.ndcg.values().map(|v| format!("{v:.6}")));
        cols.push(format!("{:.6}", self.ppl));
        cols.push(self.n_evaluated.to_string());
        cols.push(self.param_count_non_embedding.to_string());
        cols.join("\t")
    }
}

/// 1-based rank of `target` among item logits `0..n_items`, descending;
/// equal logits rank the lower token id first.
pub fn rank_target(item_logits: &[f64], target: TokenId) -> Result<usize> {
    let t = target as usize;
    if t >= item_logits.len() {
        return Err(contract(format!(
            "target token {target} is not one of {} items",
            item_logits.len()
        )));
    }
    let lt = item_logits[t];
    let ahead = item_logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > lt || (l == lt && j < t))
        .count();
    Ok(ahead + 1)
}

fn check_ranks(ranks: &[usize], k: usize) -> Result<()> {
    if ranks.is_empty() {
        return Err(contract("no ranks to aggregate"));
    }
    if k == 0 || ranks.contains(&0) {
        return Err(contract("ranks and k are 1-based"));
    }
    Ok(())
}

pub fn hr_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn ndcg_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks, k)?;
    let gain: f64 = ranks
        .iter()
        .filter(|&&r| r <= k)
        .map(|&r| 1.0 / ((r + 1) as f64).log2())
        .sum();
    Ok(gain / ranks.len() as f64)
}

/// Ranks of every example in `split`, scored by the logits at the SEP position.
///
/// With `jitter = Some((amplitude, seed))`, uniform noise in `[0, amplitude)`
/// is added to every item logit before ranking.
pub fn split_ranks(
    model: &TransformerModel,
    data: &RecDataset,
    split: Split,
    jitter: Option<(f64, u64)>,
) -> Result<Vec<usize>> {
    let idx = data.split(split);
    if idx.is_empty() {
        return Err(contract(format!("{} split is empty", split.name())));
    }
    let mut rng = jitter.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
    let mut ranks = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(256) {
        let enc: Vec<_> = chunk.iter().map(|&i| data.encode(i)).collect::<Result<_>>()?;
        let seqs: Vec<&[TokenId]> = enc.iter().map(|e| e.tokens.as_slice()).collect();
        let logits = model.last_logits(&seqs, ForwardOptions::default())?;
        for (r, e) in enc.iter().enumerate() {
            let mut items = logits.row(r)[..data.n_items].to_vec();
            if let (Some(rng), Some((amp, _))) = (rng.as_mut(), jitter) {
                for v in &mut items {
                    *v += amp * rng.random::<f64>();
                }
            }
            ranks.push(rank_target(&items, e.target)?);
        }
    }
    Ok(ranks)
}

pub fn evaluate(model: &TransformerModel, data: &RecDataset, split: Split, k_list: &[usize]) -> Result<EvalReport> {
    evaluate_with(model, data, split, k_list, None)
}

pub fn evaluate_with(
    model: &TransformerModel,
    data: &RecDataset,
    split: Split,
    k_list: &[usize],
    jitter: Option<(f64, u64)>,
) -> Result<EvalReport> {
    let ranks = split_ranks(model, data, split, jitter)?;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in k_list {
        hr.insert(k, hr_at_k(&ranks, k)?);
        ndcg.insert(k, ndcg_at_k(&ranks, k)?);
    }
    let full: Vec<Vec<TokenId>> = data
        .split(split)
        .iter()
        .map(|&i| data.full_tokens(i))
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = full.iter().map(Vec::as_slice).collect();
    Ok(EvalReport {
        hr,
        ndcg,
        ppl: model.perplexity(&refs, None)?,
        n_evaluated: ranks.len(),
        param_count_non_embedding: model.param_count(false),
    })
}
