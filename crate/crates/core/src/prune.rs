//! Structural surgery producing strictly smaller models, and pruning plans.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::model::TransformerModel;

/// Explicit index sets for every kind of surgery.
///
/// Head and MLP sets are indexed by the layers of the model the plan is
/// applied to; `layers_to_remove` is applied last.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruningPlan {
    pub heads_to_prune: Vec<Vec<usize>>,
    pub hidden_dims_to_keep: Option<Vec<usize>>,
    pub mlp_dims_to_keep: Option<Vec<Vec<usize>>>,
    pub layers_to_remove: Option<Vec<usize>>,
    /// Which report produced which component, as `key=value` pairs.
    pub provenance: Vec<(String, String)>,
}

fn plan_err(msg: impl Into<String>) -> Error {
    Error::Plan(msg.into())
}

fn strictly_increasing(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

fn check_keep(keep: &[usize], width: usize, what: &str) -> Result<()> {
    if keep.is_empty() {
        return Err(contract(format!("{what}: keep set is empty")));
    }
    if !strictly_increasing(keep) {
        return Err(plan_err(format!("{what}: keep set must be strictly increasing")));
    }
    if let Some(&bad) = keep.iter().find(|&&i| i >= width) {
        return Err(plan_err(format!("{what}: index {bad} out of range for width {width}")));
    }
    Ok(())
}

impl PruningPlan {
    pub fn with_provenance(mut self, key: &str, value: impl ToString) -> Self {
        self.provenance.push((key.to_string(), value.to_string()));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.heads_to_prune.iter().all(Vec::is_empty)
            && self.hidden_dims_to_keep.is_none()
            && self.mlp_dims_to_keep.is_none()
            && self.layers_to_remove.as_ref().is_none_or(Vec::is_empty)
    }

    /// Checks every component against `model` before any surgery happens.
    pub fn validate(&self, model: &TransformerModel) -> Result<()> {
        let heads = model.heads_per_layer();
        if !self.heads_to_prune.is_empty() {
            if self.heads_to_prune.len() != heads.len() {
                return Err(plan_err(format!(
                    "head sets for {} layers, model has {}",
                    self.heads_to_prune.len(),
                    heads.len()
                )));
            }
            for (l, set) in self.heads_to_prune.iter().enumerate() {
                check_head_set(set, heads[l], l)?;
            }
        }
        if let Some(keep) = &self.hidden_dims_to_keep {
            check_keep(keep, model.d_model(), "hidden dims")?;
        }
        if let Some(per_layer) = &self.mlp_dims_to_keep {
            if per_layer.len() != heads.len() {
                return Err(plan_err(format!(
                    "MLP keep sets for {} layers, model has {}",
                    per_layer.len(),
                    heads.len()
                )));
            }
            for (l, keep) in per_layer.iter().enumerate() {
                check_keep(keep, model.layers[l].d_ff, &format!("layer {l} MLP dims"))?;
            }
        }
        if let Some(remove) = &self.layers_to_remove {
            check_layer_removal(remove, model.n_layers())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::from("# pruning plan v1\n");
        for (k, v) in &self.provenance {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("kind\tlayer\tindices\n");
        for (l, set) in self.heads_to_prune.iter().enumerate() {
            let _ = writeln!(s, "heads\t{l}\t{}", join(set));
        }
        if let Some(keep) = &self.hidden_dims_to_keep {
            let _ = writeln!(s, "hidden_keep\t-\t{}", join(keep));
        }
        if let Some(per_layer) = &self.mlp_dims_to_keep {
            for (l, keep) in per_layer.iter().enumerate() {
                let _ = writeln!(s, "mlp_keep\t{l}\t{}", join(keep));
            }
        }
        if let Some(remove) = &self.layers_to_remove {
            let _ = writeln!(s, "layers_remove\t-\t{}", join(remove));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "# pruning plan v1")) => {}
            _ => return Err(Error::Format("not a pruning plan (missing version line)".into())),
        }
        let mut plan = PruningPlan::default();
        let mut header = false;
        let mut mlp: Vec<Vec<usize>> = Vec::new();
        for (n, line) in lines {
            let bad = |what: &str| Error::Format(format!("plan line {}: {what}", n + 1));
            if let Some(p) = line.strip_prefix("# ") {
                let (k, v) = p.split_once('=').ok_or_else(|| bad("bad provenance"))?;
                plan.provenance.push((k.to_string(), v.to_string()));
                continue;
            }
            if !header {
                if line != "kind\tlayer\tindices" {
                    return Err(bad("missing header"));
                }
                header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(bad("expected three fields"));
            }
            let idx: Vec<usize> = if f[2].is_empty() {
                Vec::new()
            } else {
                f[2].split(',')
                    .map(|x| x.parse().map_err(|_| bad("bad index")))
                    .collect::<Result<_>>()?
            };
            let layer = |expect: usize| -> Result<()> {
                match f[1].parse::<usize>() {
                    Ok(l) if l == expect => Ok(()),
                    _ => Err(bad("layers must be listed in order")),
                }
            };
            match f[0] {
                "heads" => {
                    layer(plan.heads_to_prune.len())?;
                    plan.heads_to_prune.push(idx);
                }
                "mlp_keep" => {
                    layer(mlp.len())?;
                    mlp.push(idx);
                }
                "hidden_keep" => plan.hidden_dims_to_keep = Some(idx),
                "layers_remove" => plan.layers_to_remove = Some(idx),
                _ => return Err(bad("unknown kind")),
            }
        }
        if !header {
            return Err(Error::Format("pruning plan has no header".into()));
        }
        if !mlp.is_empty() {
            plan.mlp_dims_to_keep = Some(mlp);
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn check_head_set(set: &[usize], n_heads: usize, layer: usize) -> Result<()> {
    let uniq: BTreeSet<usize> = set.iter().copied().collect();
    if uniq.len() != set.len() {
        return Err(plan_err(format!("layer {layer}: duplicate head index")));
    }
    if let Some(&bad) = set.iter().find(|&&h| h >= n_heads) {
        return Err(plan_err(format!("layer {layer}: head {bad} out of range ({n_heads} heads)")));
    }
    if set.len() >= n_heads {
        return Err(plan_err(format!("layer {layer}: pruning {} of {n_heads} heads leaves none", set.len())));
    }
    Ok(())
}

fn check_layer_removal(remove: &[usize], n_layers: usize) -> Result<()> {
    if let Some(&bad) = remove.iter().find(|&&l| l >= n_layers) {
        return Err(plan_err(format!("layer {bad} out of range ({n_layers} layers)")));
    }
    let uniq: BTreeSet<usize> = remove.iter().copied().collect();
    if uniq.len() >= n_layers {
        return Err(contract("removing every layer"));
    }
    Ok(())
}

/// Deletes the listed heads' query/key/value columns and output-projection rows.
pub fn prune_heads(model: &TransformerModel, heads_to_prune: &[Vec<usize>]) -> Result<TransformerModel> {
    if heads_to_prune.len() != model.n_layers() {
        return Err(plan_err(format!(
            "head sets for {} layers, model has {}",
            heads_to_prune.len(),
            model.n_layers()
        )));
    }
    let dk = model.config.d_k;
    let mut out = model.clone();
    for (l, (layer, set)) in out.layers.iter_mut().zip(heads_to_prune).enumerate() {
        check_head_set(set, layer.n_heads, l)?;
        if set.is_empty() {
            continue;
        }
        let cols: Vec<usize> = (0..layer.n_heads)
            .filter(|h| !set.contains(h))
            .flat_map(|h| h * dk..(h + 1) * dk)
            .collect();
        layer.wq = layer.wq.select_cols(&cols);
        layer.wk = layer.wk.select_cols(&cols);
        layer.wv = layer.wv.select_cols(&cols);
        layer.wo = layer.wo.select_rows(&cols);
        layer.n_heads -= set.len();
    }
    Ok(out)
}

/// Restricts the residual stream to `keep`.
///
/// Norm weights are multiplied by `√(d/k)` and the norm epsilon by `d/k`,
/// so a model whose discarded dimensions carry no signal computes exactly
/// the same function after surgery.
pub fn prune_hidden_dims(model: &TransformerModel, keep: &[usize]) -> Result<TransformerModel> {
    let d = model.d_model();
    check_keep(keep, d, "hidden dims")?;
    if keep.len() == d {
        return Ok(model.clone());
    }
    let ratio = d as f64 / keep.len() as f64;
    let rescale = |t: &crate::tensor::Tensor| {
        let s = t.select(keep);
        let data = s.data().iter().map(|w| w * ratio.sqrt()).collect();
        crate::tensor::Tensor::vector(data)
    };
    let mut out = model.clone();
    out.token_embedding = model.token_embedding.select_cols(keep);
    for layer in &mut out.layers {
        layer.wq = layer.wq.select_rows(keep);
        layer.wk = layer.wk.select_rows(keep);
        layer.wv = layer.wv.select_rows(keep);
        layer.wo = layer.wo.select_cols(keep);
        layer.w_gate = layer.w_gate.select_rows(keep);
        layer.w_up = layer.w_up.select_rows(keep);
        layer.w_down = layer.w_down.select_cols(keep);
        layer.b_down = layer.b_down.as_ref().map(|b| b.select(keep));
        layer.attn_norm = rescale(&layer.attn_norm)?;
        layer.mlp_norm = rescale(&layer.mlp_norm)?;
    }
    out.final_norm = rescale(&model.final_norm)?;
    out.lm_head = model.lm_head.as_ref().map(|h| h.select_rows(keep));
    out.config.d_model = keep.len();
    out.config.norm_eps = model.config.norm_eps * ratio;
    Ok(out)
}

/// Keeps the listed intermediate dimensions of every layer's MLP.
pub fn prune_mlp_dims(model: &TransformerModel, keep_per_layer: &[Vec<usize>]) -> Result<TransformerModel> {
    if keep_per_layer.len() != model.n_layers() {
        return Err(plan_err(format!(
            "MLP keep sets for {} layers, model has {}",
            keep_per_layer.len(),
            model.n_layers()
        )));
    }
    let mut out = model.clone();
    for (l, (layer, keep)) in out.layers.iter_mut().zip(keep_per_layer).enumerate() {
        check_keep(keep, layer.d_ff, &format!("layer {l} MLP dims"))?;
        if keep.len() == layer.d_ff {
            continue;
        }
        layer.w_gate = layer.w_gate.select_cols(keep);
        layer.w_up = layer.w_up.select_cols(keep);
        layer.w_down = layer.w_down.select_rows(keep);
        layer.b_gate = layer.b_gate.as_ref().map(|b| b.select(keep));
        layer.b_up = layer.b_up.as_ref().map(|b| b.select(keep));
        layer.d_ff = keep.len();
    }
    Ok(out)
}

/// Physically deletes layers; survivors keep their relative order.
pub fn drop_layers(model: &TransformerModel, remove: &[usize]) -> Result<TransformerModel> {
    check_layer_removal(remove, model.n_layers())?;
    let mut out = model.clone();
    out.layers = model
        .layers
        .iter()
        .enumerate()
        .filter(|(i, _)| !remove.contains(i))
        .map(|(_, l)| l.clone())
        .collect();
    out.config.n_layers = out.layers.len();
    Ok(out)
}

/// Applies heads, hidden dims, MLP dims and layer removal, in that order.
pub fn apply_plan(model: &TransformerModel, plan: &PruningPlan) -> Result<TransformerModel> {
    plan.validate(model)?;
    let mut m = model.clone();
    if !plan.heads_to_prune.is_empty() {
        m = prune_heads(&m, &plan.heads_to_prune)?;
    }
    if let Some(keep) = &plan.hidden_dims_to_keep {
        m = prune_hidden_dims(&m, keep)?;
    }
    if let Some(keep) = &plan.mlp_dims_to_keep {
        m = prune_mlp_dims(&m, keep)?;
    }
    if let Some(remove) = &plan.layers_to_remove {
        m = drop_layers(&m, remove)?;
    }
    m.validate()?;
    Ok(m)
}

/// Uniformly random head sets of size `k_attn` per layer.
pub fn random_plan(model: &TransformerModel, k_attn: usize, seed: u64) -> Result<PruningPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut heads = Vec::with_capacity(model.n_layers());
    for (l, &h) in model.heads_per_layer().iter().enumerate() {
        if k_attn >= h {
            return Err(contract(format!("cannot prune {k_attn} of {h} heads in layer {l}")));
        }
        let mut set = sample(&mut rng, h, k_attn).into_vec();
        set.sort_unstable();
        heads.push(set);
    }
    Ok(PruningPlan {
        heads_to_prune: heads,
        ..Default::default()
    }
    .with_provenance("heads", format!("random seed={seed}")))
}
