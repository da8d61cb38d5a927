//! Synthetic next-item corpus: clustered Markov walks over an item catalog.
//!
//! Every user walks the catalog, staying inside the current item's cluster
//! with probability `within_cluster_prob` and jumping uniformly otherwise.
//! Each step of a walk becomes one `(history, target)` example; examples are
//! ordered by timestamp and split chronologically 8:1:1.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::model::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_items: usize,
    pub n_users: usize,
    pub n_clusters: usize,
    pub within_cluster_prob: f64,
    pub h_max: usize,
    /// Length of every user's walk; each walk yields `walk_len - 1` examples.
    pub walk_len: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_items: 500,
            n_users: 300,
            n_clusters: 20,
            within_cluster_prob: 0.9,
            h_max: 10,
            walk_len: 51,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 || self.n_clusters == 0 || self.n_users == 0 || self.h_max == 0 {
            return Err(contract("n_items, n_users, n_clusters and h_max must be positive"));
        }
        if self.n_clusters > self.n_items {
            return Err(contract(format!(
                "n_clusters {} exceeds n_items {}",
                self.n_clusters, self.n_items
            )));
        }
        if !(self.within_cluster_prob >= 0.0 && self.within_cluster_prob <= 1.0) {
            return Err(contract(format!(
                "within_cluster_prob {} outside [0,1]",
                self.within_cluster_prob
            )));
        }
        if self.walk_len < 2 {
            return Err(contract("walk_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Interaction {
    pub history: Vec<u32>,
    pub target: u32,
    pub timestamp: u64,
}

/// Split proportions, train:valid:test.
pub const SPLIT_RATIOS: [usize; 3] = [8, 1, 1];

#[derive(Debug, Clone, PartialEq)]
pub struct RecDataset {
    pub n_items: usize,
    pub h_max: usize,
    pub seed: u64,
    /// Examples in increasing timestamp order.
    pub sequences: Vec<Interaction>,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Token scaffolding of one example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    /// `[BOS, item…, SEP]`.
    pub tokens: Vec<TokenId>,
    pub target: TokenId,
    /// Index the target occupies in the full sequence (the position after SEP).
    pub target_position: usize,
}

impl Encoded {
    /// `tokens` followed by the target token.
    pub fn full(&self) -> Vec<TokenId> {
        let mut f = self.tokens.clone();
        f.push(self.target);
        f
    }
}

/// A right-padded batch of full sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaddedBatch {
    pub indices: Vec<usize>,
    pub tokens: Vec<Vec<TokenId>>,
    /// 1 where a position's token is a supervised prediction target.
    pub loss_mask: Vec<Vec<u8>>,
    pub lengths: Vec<usize>,
}

impl PaddedBatch {
    /// Sequences with padding stripped.
    pub fn unpadded(&self) -> Vec<&[TokenId]> {
        self.tokens
            .iter()
            .zip(&self.lengths)
            .map(|(t, &l)| &t[..l])
            .collect()
    }
}

impl RecDataset {
    pub fn generate(cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let clusters: Vec<Vec<u32>> = (0..cfg.n_clusters)
            .map(|c| {
                (0..cfg.n_items)
                    .filter(|i| i % cfg.n_clusters == c)
                    .map(|i| i as u32)
                    .collect()
            })
            .collect();
        let mut raw: Vec<(u64, usize, Interaction)> = Vec::with_capacity(cfg.n_users * (cfg.walk_len - 1));
        for user in 0..cfg.n_users {
            let start: u64 = rng.random_range(0..cfg.walk_len as u64);
            let mut walk = Vec::with_capacity(cfg.walk_len);
            walk.push(rng.random_range(0..cfg.n_items as u32));
            while walk.len() < cfg.walk_len {
                let cur = *walk.last().unwrap() as usize;
                let next = if rng.random_bool(cfg.within_cluster_prob) {
                    *clusters[cur % cfg.n_clusters].choose(&mut rng).unwrap()
                } else {
                    rng.random_range(0..cfg.n_items as u32)
                };
                walk.push(next);
            }
            for t in 1..walk.len() {
                let lo = t.saturating_sub(cfg.h_max);
                raw.push((
                    start + t as u64,
                    user,
                    Interaction {
                        history: walk[lo..t].to_vec(),
                        target: walk[t],
                        timestamp: 0,
                    },
                ));
            }
        }
        raw.sort_by_key(|(time, user, _)| (*time, *user));
        // Drop repeated (history, target) pairs so no evaluation example also occurs in train.
        let mut seen = HashSet::new();
        let mut sequences = Vec::with_capacity(raw.len());
        for (_, _, mut it) in raw {
            if seen.insert((it.history.clone(), it.target)) {
                it.timestamp = sequences.len() as u64;
                sequences.push(it);
            }
        }
        Ok(RecDataset::from_sequences(cfg.n_items, cfg.h_max, cfg.seed, sequences))
    }

    fn from_sequences(n_items: usize, h_max: usize, seed: u64, sequences: Vec<Interaction>) -> Self {
        let n = sequences.len();
        let total: usize = SPLIT_RATIOS.iter().sum();
        let n_train = (n * SPLIT_RATIOS[0] + total / 2) / total;
        let n_valid = (n * SPLIT_RATIOS[1] + total / 2) / total;
        let n_valid = n_valid.min(n - n_train);
        RecDataset {
            n_items,
            h_max,
            seed,
            train: (0..n_train).collect(),
            valid: (n_train..n_train + n_valid).collect(),
            test: (n_train + n_valid..n).collect(),
            sequences,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn split(&self, s: Split) -> &[usize] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn bos(&self) -> TokenId {
        self.n_items as TokenId
    }

    pub fn sep(&self) -> TokenId {
        self.n_items as TokenId + 1
    }

    pub fn pad(&self) -> TokenId {
        self.n_items as TokenId + 2
    }

    /// Items plus BOS, SEP and PAD.
    pub fn vocab_size(&self) -> usize {
        self.n_items + 3
    }

    /// Item ids map to themselves as token ids.
    pub fn item_token(&self, item: u32) -> TokenId {
        item
    }

    pub fn is_item_token(&self, t: TokenId) -> bool {
        (t as usize) < self.n_items
    }

    /// Longest full sequence (`BOS + history + SEP + target`).
    pub fn max_full_len(&self) -> usize {
        self.h_max + 3
    }

    pub fn encode(&self, index: usize) -> Result<Encoded> {
        let it = self.sequences.get(index).ok_or_else(|| {
            Error::Index(format!("sequence {index} of {}", self.sequences.len()))
        })?;
        let mut tokens = Vec::with_capacity(it.history.len() + 2);
        tokens.push(self.bos());
        tokens.extend(it.history.iter().map(|&i| self.item_token(i)));
        tokens.push(self.sep());
        Ok(Encoded {
            target_position: tokens.len(),
            tokens,
            target: self.item_token(it.target),
        })
    }

    /// Item ids of an encoded `[BOS, item…, SEP]` token sequence.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u32>> {
        if tokens.len() < 2 || tokens[0] != self.bos() || *tokens.last().unwrap() != self.sep() {
            return Err(contract("token sequence is not [BOS, item…, SEP]"));
        }
        let body = &tokens[1..tokens.len() - 1];
        if let Some(&bad) = body.iter().find(|&&t| !self.is_item_token(t)) {
            return Err(Error::Index(format!("token {bad} is not an item")));
        }
        Ok(body.to_vec())
    }

    /// Full token sequence (prompt plus target) of an example.
    pub fn full_tokens(&self, index: usize) -> Result<Vec<TokenId>> {
        Ok(self.encode(index)?.full())
    }

    /// Batches of full sequences. Train order is shuffled by `seed`; other splits keep index order.
    pub fn batches(&self, split: Split, batch_size: usize, seed: u64) -> Result<Vec<PaddedBatch>> {
        if batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        let mut order = self.split(split).to_vec();
        if order.is_empty() {
            return Err(contract(format!("{} split is empty", split.name())));
        }
        if split == Split::Train {
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        order
            .chunks(batch_size)
            .map(|chunk| {
                let seqs: Vec<Vec<TokenId>> = chunk
                    .iter()
                    .map(|&i| self.full_tokens(i))
                    .collect::<Result<_>>()?;
                let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
                let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
                let loss_mask = lengths
                    .iter()
                    .map(|&l| (0..width).map(|p| u8::from(p >= 1 && p < l)).collect())
                    .collect();
                let tokens = seqs
                    .into_iter()
                    .map(|mut s| {
                        s.resize(width, self.pad());
                        s
                    })
                    .collect();
                Ok(PaddedBatch {
                    indices: chunk.to_vec(),
                    tokens,
                    loss_mask,
                    lengths,
                })
            })
            .collect()
    }

    /// Seeded uniform sample of `b` distinct train indices, in sampled order.
    pub fn sample_train(&self, b: usize, seed: u64) -> Result<Vec<usize>> {
        if b == 0 {
            return Err(contract("sample size must be positive"));
        }
        if b > self.train.len() {
            return Err(contract(format!(
                "sample of {b} from a train split of {}",
                self.train.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.train.choose_multiple(&mut rng, b).copied().collect())
    }

    /// Serializes to the line-oriented text format: `#` header lines, then
    /// `timestamp<TAB>item,item,…<TAB>target` per example.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let ratios: Vec<String> = SPLIT_RATIOS.iter().map(|r| r.to_string()).collect();
        let _ = writeln!(s, "# recdata v1");
        let _ = writeln!(s, "# n_items={}", self.n_items);
        let _ = writeln!(s, "# h_max={}", self.h_max);
        let _ = writeln!(s, "# seed={}", self.seed);
        let _ = writeln!(s, "# split={}", ratios.join(":"));
        for it in &self.sequences {
            let hist: Vec<String> = it.history.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{}\t{}\t{}", it.timestamp, hist.join(","), it.target);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut n_items = None;
        let mut h_max = None;
        let mut seed = None;
        let mut sequences = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::Format(format!("dataset line {}: {what}", ln + 1));
            if let Some(h) = line.strip_prefix('#') {
                if let Some((k, v)) = h.trim().split_once('=') {
                    let parse = |v: &str| v.parse::<u64>().map_err(|_| bad("bad header value"));
                    match k {
                        "n_items" => n_items = Some(parse(v)? as usize),
                        "h_max" => h_max = Some(parse(v)? as usize),
                        "seed" => seed = Some(parse(v)?),
                        "split" => {
                            let expect: Vec<String> = SPLIT_RATIOS.iter().map(|r| r.to_string()).collect();
                            if v != expect.join(":") {
                                return Err(bad("unsupported split ratios"));
                            }
                        }
                        _ => {}
                    }
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad("expected three tab-separated fields"));
            }
            let timestamp = fields[0].parse().map_err(|_| bad("bad timestamp"))?;
            let history = fields[1]
                .split(',')
                .map(|x| x.parse::<u32>().map_err(|_| bad("bad item id")))
                .collect::<Result<Vec<_>>>()?;
            let target = fields[2].parse().map_err(|_| bad("bad target"))?;
            sequences.push(Interaction {
                history,
                target,
                timestamp,
            });
        }
        let (Some(n_items), Some(h_max), Some(seed)) = (n_items, h_max, seed) else {
            return Err(Error::Format("dataset header missing n_items, h_max or seed".into()));
        };
        for (i, it) in sequences.iter().enumerate() {
            if it.history.is_empty() || it.history.len() > h_max {
                return Err(Error::Format(format!("example {i} has history length {}", it.history.len())));
            }
            if it.history.iter().chain([&it.target]).any(|&x| x as usize >= n_items) {
                return Err(Error::Format(format!("example {i} has an item id ≥ {n_items}")));
            }
            if i > 0 && it.timestamp <= sequences[i - 1].timestamp {
                return Err(Error::Format(format!("example {i} breaks timestamp order")));
            }
        }
        Ok(RecDataset::from_sequences(n_items, h_max, seed, sequences))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        RecDataset::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            n_items: 40,
            n_users: 20,
            n_clusters: 4,
            walk_len: 21,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = RecDataset::generate(&small()).unwrap();
        let b = RecDataset::generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = RecDataset::generate(&GeneratorConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn more_clusters_than_items_is_rejected() {
        let cfg = GeneratorConfig {
            n_items: 3,
            n_clusters: 4,
            ..small()
        };
        assert!(matches!(RecDataset::generate(&cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn default_split_sizes_are_eight_one_one() {
        let d = RecDataset::generate(&GeneratorConfig::default()).unwrap();
        let n = d.len() as f64;
        assert!(d.len() > 14_000, "{} examples", d.len());
        assert!((d.train.len() as f64 - 0.8 * n).abs() <= 1.0);
        assert!((d.valid.len() as f64 - 0.1 * n).abs() <= 1.0);
        assert!((d.test.len() as f64 - 0.1 * n).abs() <= 1.0);
        assert_eq!(d.train.len() + d.valid.len() + d.test.len(), d.len());
    }

    #[test]
    fn splits_respect_time_and_do_not_leak() {
        let d = RecDataset::generate(&small()).unwrap();
        let max_train = d.train.iter().map(|&i| d.sequences[i].timestamp).max().unwrap();
        let min_valid = d.valid.iter().map(|&i| d.sequences[i].timestamp).min().unwrap();
        let max_valid = d.valid.iter().map(|&i| d.sequences[i].timestamp).max().unwrap();
        let min_test = d.test.iter().map(|&i| d.sequences[i].timestamp).min().unwrap();
        assert!(max_train <= min_valid && max_valid <= min_test);
        let train: HashSet<_> = d
            .train
            .iter()
            .map(|&i| (&d.sequences[i].history, d.sequences[i].target))
            .collect();
        for &i in &d.test {
            assert!(!train.contains(&(&d.sequences[i].history, d.sequences[i].target)));
        }
        for it in &d.sequences {
            assert!(!it.history.is_empty() && it.history.len() <= d.h_max);
        }
    }

    #[test]
    fn singleton_clusters_with_certain_stay_repeat_the_item() {
        let cfg = GeneratorConfig {
            n_items: 6,
            n_clusters: 6,
            within_cluster_prob: 1.0,
            n_users: 5,
            walk_len: 8,
            ..GeneratorConfig::default()
        };
        let d = RecDataset::generate(&cfg).unwrap();
        // A bigram predictor (next = last history item) is always right.
        for it in &d.sequences {
            assert_eq!(*it.history.last().unwrap(), it.target);
        }
    }

    #[test]
    fn encode_format_and_round_trip() {
        let d = RecDataset::generate(&small()).unwrap();
        let idx = d.sequences.iter().position(|s| s.history.len() == 2).unwrap();
        let it = &d.sequences[idx];
        let e = d.encode(idx).unwrap();
        assert_eq!(e.tokens, vec![d.bos(), it.history[0], it.history[1], d.sep()]);
        assert_eq!(e.target, it.target);
        assert_eq!(e.target_position, 4);
        assert_eq!(e.tokens.len(), it.history.len() + 2);
        assert_eq!(d.decode(&e.tokens).unwrap(), it.history);
        assert!(matches!(d.encode(d.len()), Err(Error::Index(_))));
    }

    #[test]
    fn batches_pad_and_mask() {
        let d = RecDataset::generate(&small()).unwrap();
        let bs = 7;
        let b = d.batches(Split::Train, bs, 3).unwrap();
        assert_eq!(b.len(), d.train.len().div_ceil(bs));
        for batch in &b {
            for ((toks, mask), &len) in batch.tokens.iter().zip(&batch.loss_mask).zip(&batch.lengths) {
                for p in len..toks.len() {
                    assert_eq!(toks[p], d.pad());
                    assert_eq!(mask[p], 0);
                }
                assert_eq!(mask[0], 0);
                assert!(mask[1..len].iter().all(|&m| m == 1));
            }
        }
        assert_eq!(b, d.batches(Split::Train, bs, 3).unwrap());
        assert_ne!(b, d.batches(Split::Train, bs, 4).unwrap());
        let v = d.batches(Split::Valid, bs, 3).unwrap();
        let order: Vec<usize> = v.iter().flat_map(|x| x.indices.clone()).collect();
        assert_eq!(order, d.valid);
        assert!(d.batches(Split::Train, 0, 0).is_err());
    }

    #[test]
    fn text_round_trip_is_byte_identical() {
        let d = RecDataset::generate(&small()).unwrap();
        let text = d.to_text();
        let back = RecDataset::from_text(&text).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), text);
    }
}
