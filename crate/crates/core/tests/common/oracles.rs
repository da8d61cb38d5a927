//! Reference computations the library is checked against. Each one is
//! written independently of the code path it verifies.

use recprune::tensor::finite_diff_grad;
use recprune::{Result, Tape, Tensor, TransformerModel, Var};

use super::{zero_cols, zero_rows};

/// The original model with the pruned heads' output-projection rows zeroed.
pub fn heads_zeroed(model: &TransformerModel, heads: &[Vec<usize>]) -> TransformerModel {
    let dk = model.config.d_k;
    let mut m = model.clone();
    for (layer, hs) in m.layers.iter_mut().zip(heads) {
        for &h in hs {
            zero_rows(&mut layer.wo, h * dk..(h + 1) * dk);
        }
    }
    m
}

/// The original model with every residual-stream dimension outside `keep`
/// forced to zero: the embedding column and every write into the stream.
pub fn residual_dims_zeroed(model: &TransformerModel, keep: &[usize]) -> TransformerModel {
    let drop: Vec<usize> = (0..model.d_model()).filter(|d| !keep.contains(d)).collect();
    let mut m = model.clone();
    zero_cols(&mut m.token_embedding, drop.iter().copied());
    for layer in &mut m.layers {
        zero_cols(&mut layer.wo, drop.iter().copied());
        zero_cols(&mut layer.w_down, drop.iter().copied());
        if let Some(b) = layer.b_down.as_mut() {
            zero_cols(b, drop.iter().copied());
        }
    }
    if let Some(h) = m.lm_head.as_mut() {
        zero_rows(h, drop.iter().copied());
    }
    m
}

/// The original model with discarded intermediate dimensions cut after the
/// gate-times-up product, i.e. the matching rows of the down projection zeroed.
pub fn mlp_dims_zeroed(model: &TransformerModel, keep: &[Vec<usize>]) -> TransformerModel {
    let mut m = model.clone();
    for (layer, k) in m.layers.iter_mut().zip(keep) {
        let drop: Vec<usize> = (0..layer.d_ff).filter(|d| !k.contains(d)).collect();
        zero_rows(&mut layer.w_down, drop);
    }
    m
}

/// Head-importance propagation written as the published loop: outer loop
/// over layers, per-layer min-max normalization in place, then the recursive
/// update of every head from the previous layer's final score. `literal_raw`
/// blends the raw score instead of the normalized one.
pub fn propagate_loop(raw: &[Vec<f64>], alpha: f64, literal_raw: bool) -> Vec<Vec<f64>> {
    let l_count = raw.len();
    let h = raw[0].len();
    let mut imp = vec![vec![0.0; h]; l_count];
    for l in 0..l_count {
        let mut min = raw[l][0];
        let mut max = raw[l][0];
        for j in 0..h {
            if raw[l][j] < min {
                min = raw[l][j];
            }
            if raw[l][j] > max {
                max = raw[l][j];
            }
        }
        for i in 0..h {
            imp[l][i] = if max == min { 0.5 } else { (raw[l][i] - min) / (max - min) };
        }
        if l > 0 {
            for i in 0..h {
                let current = if literal_raw { raw[l][i] } else { imp[l][i] };
                imp[l][i] = alpha * imp[l - 1][i] + (1.0 - alpha) * current;
            }
        }
    }
    imp
}

/// 1-based rank by sorting a copy: descending logit, ties by lower index.
pub fn rank_by_sort(logits: &[f64], target: usize) -> usize {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.iter().position(|&i| i == target).unwrap() + 1
}

pub fn hr_by_count(ranks: &[usize], k: usize) -> f64 {
    let mut hits = 0usize;
    for &r in ranks {
        if r <= k {
            hits += 1;
        }
    }
    hits as f64 / ranks.len() as f64
}

pub fn ndcg_by_count(ranks: &[usize], k: usize) -> f64 {
    let mut gain = 0.0;
    for &r in ranks {
        if r <= k {
            gain += 1.0 / ((r + 1) as f64).log2();
        }
    }
    gain / ranks.len() as f64
}

/// Result of comparing reverse-mode gradients with central differences.
pub struct GradCheck {
    pub worst_rel_err: f64,
}

/// Checks `build` at one point: every input is a gradient-requiring leaf; a
/// non-scalar output is reduced with the fixed random `weights` so that every
/// output entry influences the loss.
pub fn grad_check<F>(inputs: &[Tensor], weights: Option<&Tensor>, h: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
        let mut out = build(&mut tape, &vars)?;
        if let Some(w) = weights {
            let wv = tape.leaf(w.clone(), false);
            let prod = tape.mul(out, wv)?;
            out = tape.sum(prod)?;
        }
        let value = tape.value(out).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        tape.backward(out)?;
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(&v, x)| tape.grad(v).map_or(vec![0.0; x.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                Ok(eval(&xs, false)?.0)
            },
            x,
            h,
        )?;
        worst = worst.max(super::rel_err(&analytic[i], numeric.data(), 1e-9));
    }
    Ok(GradCheck { worst_rel_err: worst })
}
