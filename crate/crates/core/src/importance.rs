//! Importance estimators for attention heads, hidden dimensions, MLP
//! intermediate dimensions and whole layers.

use std::fmt::Write as _;

use crate::error::{contract, Error, Result};
use crate::model::{ForwardOptions, GradScope, LayerMask, SuppressionSpec, TokenId, TransformerModel};
use crate::prune::drop_layers;
use crate::recdata::RecDataset;
use crate::tensor::{kl_divergence, softmax, Tape};

/// Seeded sample of training examples used for every importance score.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub seed: u64,
    pub indices: Vec<usize>,
    /// `[BOS, items…, SEP]`: scored at the last position.
    pub prompts: Vec<Vec<TokenId>>,
    /// Prompt followed by the target token.
    pub full: Vec<Vec<TokenId>>,
}

impl CalibrationSet {
    pub fn sample(data: &RecDataset, b: usize, seed: u64) -> Result<Self> {
        if b == 0 {
            return Err(contract("calibration size must be positive"));
        }
        let indices = data.sample_train(b, seed)?;
        let mut prompts = Vec::with_capacity(indices.len());
        let mut full = Vec::with_capacity(indices.len());
        for &i in &indices {
            let e = data.encode(i)?;
            full.push(e.full());
            prompts.push(e.tokens);
        }
        Ok(CalibrationSet {
            seed,
            indices,
            prompts,
            full,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn prompt_refs(&self) -> Vec<&[TokenId]> {
        self.prompts.iter().map(Vec::as_slice).collect()
    }

    pub fn full_refs(&self) -> Vec<&[TokenId]> {
        self.full.iter().map(Vec::as_slice).collect()
    }
}

fn last_position_probs(model: &TransformerModel, seqs: &[&[TokenId]], opts: ForwardOptions) -> Result<Vec<Vec<f64>>> {
    let logits = model.last_logits(seqs, opts)?;
    Ok((0..logits.rows()).map(|r| softmax(logits.row(r))).collect())
}

/// Mean KL between the intact and the head-suppressed (ε = 0) next-token
/// distribution at the final position, for every head of every layer.
pub fn head_importance_raw(model: &TransformerModel, calib: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
    if calib.is_empty() {
        return Err(contract("empty calibration set"));
    }
    let base = last_position_probs(model, calib, ForwardOptions::default())?;
    let mut scores = Vec::with_capacity(model.n_layers());
    for (layer, l) in model.layers.iter().enumerate() {
        let mut row = Vec::with_capacity(l.n_heads);
        for head in 0..l.n_heads {
            let opts = ForwardOptions {
                suppress: Some(SuppressionSpec {
                    layer,
                    head,
                    epsilon: 0.0,
                }),
                mask: None,
            };
            let supp = last_position_probs(model, calib, opts)?;
            let mut total = 0.0;
            for (p, q) in base.iter().zip(&supp) {
                total += kl_divergence(p, q)?;
            }
            row.push(total / calib.len() as f64);
        }
        scores.push(row);
    }
    Ok(scores)
}

/// Per-row `(x − min)/(max − min)`; constant rows become 0.5.
pub fn minmax_normalize_rows(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|row| {
            let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                row.iter().map(|&x| (x - lo) / (hi - lo)).collect()
            } else {
                vec![0.5; row.len()]
            }
        })
        .collect()
}

/// What the recursive update blends with the previous layer's score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// The current layer's normalized score.
    Normalized,
    /// The current layer's raw score, as the pseudo-code literally writes it.
    LiteralRaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadImportance {
    pub scores: Vec<Vec<f64>>,
    pub alpha: f64,
    pub calibration_size: usize,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(contract(format!("alpha {alpha} outside [0,1]")))
    }
}

/// `Imp^1 = Norm^1`, `Imp^l = α·Imp^{l−1} + (1−α)·Norm^l`.
///
/// Layers with different head counts blend position-wise over the heads
/// both layers have; extra heads keep their normalized score.
pub fn propagate_importance(normalized: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    propagate_with(normalized, normalized, alpha)
}

fn propagate_with(normalized: &[Vec<f64>], current: &[Vec<f64>], alpha: f64) -> Result<Vec<Vec<f64>>> {
    check_alpha(alpha)?;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(normalized.len());
    for (l, row) in current.iter().enumerate() {
        let next = match out.last() {
            None => normalized[0].clone(),
            Some(prev) => row
                .iter()
                .enumerate()
                .map(|(i, &c)| match prev.get(i) {
                    Some(&p) => alpha * p + (1.0 - alpha) * c,
                    None => normalized[l][i],
                })
                .collect(),
        };
        out.push(next);
    }
    Ok(out)
}

/// Normalizes raw scores per layer and propagates them across depth.
pub fn head_importance(raw: &[Vec<f64>], alpha: f64, mode: Propagation, calibration_size: usize) -> Result<HeadImportance> {
    let norm = minmax_normalize_rows(raw);
    let scores = match mode {
        Propagation::Normalized => propagate_importance(&norm, alpha)?,
        Propagation::LiteralRaw => propagate_with(&norm, raw, alpha)?,
    };
    Ok(HeadImportance {
        scores,
        alpha,
        calibration_size,
    })
}

/// Indices of the `k` lowest scores, lower index first on ties, ascending.
fn lowest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Indices of the `k` highest scores, lower index first on ties, ascending.
fn highest_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

/// Per layer, the `k_attn` least important heads.
pub fn select_heads(scores: &[Vec<f64>], k_attn: usize) -> Result<Vec<Vec<usize>>> {
    scores
        .iter()
        .enumerate()
        .map(|(l, row)| {
            if k_attn >= row.len() {
                return Err(contract(format!(
                    "cannot prune {k_attn} of {} heads in layer {l}",
                    row.len()
                )));
            }
            Ok(lowest_k(row, k_attn))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DimImportance {
    pub scores: Vec<f64>,
    pub calibration_size: usize,
    pub total_positions: usize,
}

/// Mean of `|E ⊙ ∇E|` over the embedding rows used at each input position.
///
/// Each sample's gradient comes from its own backward pass of the mean
/// next-token loss; position terms are averaged within a sample and then
/// across samples.
pub fn embedding_dim_importance(model: &TransformerModel, calib_full: &[&[TokenId]]) -> Result<DimImportance> {
    if calib_full.is_empty() {
        return Err(contract("empty calibration set"));
    }
    let d = model.d_model();
    let e = &model.token_embedding;
    let mut scores = vec![0.0; d];
    let mut total_positions = 0;
    for seq in calib_full {
        if seq.len() < 2 {
            return Err(contract("embedding importance needs sequences of at least two tokens"));
        }
        let input = &seq[..seq.len() - 1];
        let targets: Vec<usize> = seq[1..].iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let g = model.record(&mut tape, &[input], ForwardOptions::default(), GradScope::EmbeddingOnly, None)?;
        let loss = tape.cross_entropy(g.logits, &targets)?;
        tape.backward(loss)?;
        let grad = tape
            .grad(g.embedding)
            .ok_or_else(|| contract("embedding received no gradient"))?;
        let inv_s = 1.0 / input.len() as f64;
        for &tok in input {
            let row = tok as usize * d;
            for j in 0..d {
                scores[j] += inv_s * (e.data()[row + j] * grad[row + j]).abs();
            }
        }
        total_positions += input.len();
    }
    let inv_b = 1.0 / calib_full.len() as f64;
    scores.iter_mut().for_each(|s| *s *= inv_b);
    Ok(DimImportance {
        scores,
        calibration_size: calib_full.len(),
        total_positions,
    })
}

/// The `keep` most important hidden dimensions, ascending.
pub fn select_hidden_dims(imp: &DimImportance, keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > imp.scores.len() {
        return Err(contract(format!("cannot keep {keep} of {} hidden dims", imp.scores.len())));
    }
    Ok(highest_k(&imp.scores, keep))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPolicy {
    /// Per-layer median of `|H_last|` over all dimensions and samples.
    Auto,
    Fixed(f64),
}

impl TauPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(TauPolicy::Auto);
        }
        match s.parse::<f64>() {
            Ok(t) if t >= 0.0 && t.is_finite() => Ok(TauPolicy::Fixed(t)),
            _ => Err(contract(format!("tau must be \"auto\" or a nonnegative number, got {s:?}"))),
        }
    }

    pub fn as_string(&self) -> String {
        match self {
            TauPolicy::Auto => "auto".to_string(),
            TauPolicy::Fixed(t) => t.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpDimStats {
    /// `counts[l][d]`: samples whose last-token `|H|` exceeds `tau[l]`.
    pub counts: Vec<Vec<usize>>,
    pub tau: Vec<f64>,
    pub calibration_size: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Counts threshold exceedances from last-token up-projection rows, one
/// matrix `B × d_ff_l` per layer.
pub fn count_exceedances(h_last: &[Vec<Vec<f64>>], tau: TauPolicy) -> Result<MlpDimStats> {
    let mut counts = Vec::with_capacity(h_last.len());
    let mut taus = Vec::with_capacity(h_last.len());
    let mut b = 0;
    for rows in h_last {
        b = rows.len();
        if b == 0 {
            return Err(contract("empty calibration set"));
        }
        let t = match tau {
            TauPolicy::Fixed(t) if t >= 0.0 => t,
            TauPolicy::Fixed(t) => return Err(contract(format!("negative tau {t}"))),
            TauPolicy::Auto => median(rows.iter().flatten().map(|x| x.abs()).collect()),
        };
        let width = rows[0].len();
        let mut c = vec![0usize; width];
        for r in rows {
            for (ci, x) in c.iter_mut().zip(r) {
                if x.abs() > t {
                    *ci += 1;
                }
            }
        }
        counts.push(c);
        taus.push(t);
    }
    Ok(MlpDimStats {
        counts,
        tau: taus,
        calibration_size: b,
    })
}

/// Last-token MLP up-projection statistics over the calibration prompts.
pub fn mlp_dim_stats(model: &TransformerModel, calib: &[&[TokenId]], tau: TauPolicy) -> Result<MlpDimStats> {
    if calib.is_empty() {
        return Err(contract("empty calibration set"));
    }
    let (caps, layout) = model.capture_batch(calib)?;
    let last = layout.last_rows();
    let h_last: Vec<Vec<Vec<f64>>> = caps
        .iter()
        .map(|c| last.iter().map(|&r| c.mlp_up.row(r).to_vec()).collect())
        .collect();
    count_exceedances(&h_last, tau)
}

/// Per layer, the `k_mlp` most frequently active dimensions, ascending.
pub fn select_mlp_dims(stats: &MlpDimStats, k_mlp: usize) -> Result<Vec<Vec<usize>>> {
    stats
        .counts
        .iter()
        .enumerate()
        .map(|(l, c)| {
            if k_mlp == 0 || k_mlp > c.len() {
                return Err(contract(format!("cannot keep {k_mlp} of {} MLP dims in layer {l}", c.len())));
            }
            let s: Vec<f64> = c.iter().map(|&x| x as f64).collect();
            Ok(highest_k(&s, k_mlp))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerImportance {
    pub delta_ppl: Vec<f64>,
    pub baseline_ppl: f64,
}

/// Perplexity increase from bypassing each layer on its own.
pub fn layer_delta_ppl(model: &TransformerModel, calib_full: &[&[TokenId]]) -> Result<LayerImportance> {
    let baseline_ppl = model.perplexity(calib_full, None)?;
    let delta_ppl = (0..model.n_layers())
        .map(|l| Ok(model.perplexity(calib_full, Some(&LayerMask::single(l)))? - baseline_ppl))
        .collect::<Result<_>>()?;
    Ok(LayerImportance {
        delta_ppl,
        baseline_ppl,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    /// Layers to remove, in removal order, as indices into the original model.
    pub removal_order: Vec<usize>,
    /// Scores seen at each round, indexed by the layers still present then.
    pub rounds: Vec<LayerImportance>,
}

/// Removes the layer with the smallest ΔPPL until `k_layer` layers remain.
///
/// With `recompute`, scores are re-measured on the reduced model after
/// every removal; otherwise the initial scores decide all removals.
pub fn select_layers(
    model: &TransformerModel,
    calib_full: &[&[TokenId]],
    k_layer: usize,
    recompute: bool,
) -> Result<LayerSelection> {
    if k_layer == 0 || k_layer > model.n_layers() {
        return Err(contract(format!(
            "cannot keep {k_layer} of {} layers",
            model.n_layers()
        )));
    }
    let n_remove = model.n_layers() - k_layer;
    let mut rounds = Vec::new();
    if !recompute {
        let imp = layer_delta_ppl(model, calib_full)?;
        let mut removal_order: Vec<usize> = (0..imp.delta_ppl.len()).collect();
        removal_order.sort_by(|&a, &b| imp.delta_ppl[a].total_cmp(&imp.delta_ppl[b]).then(a.cmp(&b)));
        removal_order.truncate(n_remove);
        rounds.push(imp);
        return Ok(LayerSelection { removal_order, rounds });
    }
    let mut current = model.clone();
    let mut original: Vec<usize> = (0..model.n_layers()).collect();
    let mut removal_order = Vec::with_capacity(n_remove);
    for _ in 0..n_remove {
        let imp = layer_delta_ppl(&current, calib_full)?;
        let pick = (0..imp.delta_ppl.len())
            .min_by(|&a, &b| imp.delta_ppl[a].total_cmp(&imp.delta_ppl[b]).then(a.cmp(&b)))
            .ok_or_else(|| Error::Plan("no layer left to remove".into()))?;
        removal_order.push(original.remove(pick));
        current = drop_layers(&current, &[pick])?;
        rounds.push(imp);
    }
    Ok(LayerSelection { removal_order, rounds })
}

/// Tabular score dump: `kind<TAB>layer<TAB>index<TAB>score`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportanceReport {
    /// Free-form `key=value` provenance lines.
    pub provenance: Vec<(String, String)>,
    pub rows: Vec<(String, Option<usize>, usize, f64)>,
}

impl ImportanceReport {
    pub fn with_provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.push((key.to_string(), value.to_string()));
        self
    }

    pub fn add_matrix(&mut self, kind: &str, m: &[Vec<f64>]) {
        for (l, row) in m.iter().enumerate() {
            for (i, &s) in row.iter().enumerate() {
                self.rows.push((kind.to_string(), Some(l), i, s));
            }
        }
    }

    pub fn add_vector(&mut self, kind: &str, v: &[f64]) {
        for (i, &s) in v.iter().enumerate() {
            self.rows.push((kind.to_string(), None, i, s));
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("kind\tlayer\tindex\tscore\n");
        for (kind, layer, i, score) in &self.rows {
            let layer = layer.map_or("-".to_string(), |l| l.to_string());
            let _ = writeln!(s, "{kind}\t{layer}\t{i}\t{score:e}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rep = ImportanceReport::default();
        let mut header = false;
        for (n, line) in text.lines().enumerate() {
            if let Some(p) = line.strip_prefix("# ") {
                let (k, v) = p
                    .split_once('=')
                    .ok_or_else(|| Error::Format(format!("line {}: bad provenance", n + 1)))?;
                rep.provenance.push((k.to_string(), v.to_string()));
                continue;
            }
            if !header {
                if line != "kind\tlayer\tindex\tscore" {
                    return Err(Error::Format(format!("line {}: missing header", n + 1)));
                }
                header = true;
                continue;
            }
            let bad = || Error::Format(format!("line {}: malformed row", n + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let layer = if f[1] == "-" { None } else { Some(f[1].parse().map_err(|_| bad())?) };
            rep.rows.push((
                f[0].to_string(),
                layer,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ));
        }
        if !header {
            return Err(Error::Format("missing header".into()));
        }
        Ok(rep)
    }
}
