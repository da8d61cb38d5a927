//! Activation-mass concentration probes and the weight-times-activation score.

use std::fmt::Write as _;

use crate::error::{contract, Error, Result};
use crate::model::{TokenId, TransformerModel};
use crate::recdata::RecDataset;
use crate::tensor::Tensor;

pub const DEFAULT_K_GRID: [f64; 6] = [1.0, 5.0, 10.0, 25.0, 50.0, 100.0];

/// Share of total absolute mass held by the top `k_percent` entries by magnitude.
pub fn concentration_ratio(values: &[f64], k_percent: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("concentration of an empty vector"));
    }
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(contract(format!("k_percent {k_percent} outside (0,100]")));
    }
    let mut mags: Vec<f64> = values.iter().map(|v| v.abs()).collect();
    let total: f64 = mags.iter().sum();
    if total == 0.0 {
        return Err(contract("concentration ratio undefined for an all-zero vector"));
    }
    mags.sort_by(|a, b| b.total_cmp(a));
    let n = ((values.len() as f64 * k_percent / 100.0).ceil() as usize).clamp(1, values.len());
    Ok(mags[..n].iter().sum::<f64>() / total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Site {
    AttentionOutput,
    MlpIntermediate,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::AttentionOutput => "attn_out",
            Site::MlpIntermediate => "mlp_up",
        }
    }
}

/// Which token positions a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbePosition {
    LastToken,
    /// Ratio computed at every position, then averaged within the sample.
    MeanOverPositions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationReport {
    pub samples: usize,
    pub k_grid: Vec<f64>,
    /// `(layer, site, k_percent, mean ratio)`.
    pub rows: Vec<(usize, Site, f64, f64)>,
}

impl ConcentrationReport {
    pub fn ratio(&self, layer: usize, site: Site, k_percent: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.0 == layer && r.1 == site && r.2 == k_percent)
            .map(|r| r.3)
    }

    /// Mean ratio over layers for one site and K.
    pub fn layer_mean(&self, site: Site, k_percent: f64) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.1 == site && r.2 == k_percent)
            .map(|r| r.3)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# samples={}\nlayer\tsite\tk_percent\tratio\n", self.samples);
        for (l, site, k, r) in &self.rows {
            let _ = writeln!(s, "{l}\t{}\t{k}\t{r:.9}", site.name());
        }
        s
    }
}

fn probe_rows(t: &Tensor, span: (usize, usize), pos: ProbePosition) -> Vec<&[f64]> {
    match pos {
        ProbePosition::LastToken => vec![t.row(span.0 + span.1 - 1)],
        ProbePosition::MeanOverPositions => (span.0..span.0 + span.1).map(|r| t.row(r)).collect(),
    }
}

/// Averages concentration ratios over `b` seeded training samples.
pub fn observe(
    model: &TransformerModel,
    data: &RecDataset,
    b: usize,
    k_grid: &[f64],
    seed: u64,
    pos: ProbePosition,
) -> Result<ConcentrationReport> {
    if b == 0 {
        return Err(contract("observation needs at least one sample"));
    }
    if k_grid.is_empty() {
        return Err(contract("empty K grid"));
    }
    let idx = data.sample_train(b, seed)?;
    let prompts: Vec<Vec<TokenId>> = idx
        .iter()
        .map(|&i| data.encode(i).map(|e| e.tokens))
        .collect::<Result<_>>()?;
    let refs: Vec<&[TokenId]> = prompts.iter().map(Vec::as_slice).collect();
    let (caps, layout) = model.capture_batch(&refs)?;
    let mut rows = Vec::new();
    for (l, cap) in caps.iter().enumerate() {
        for (site, t) in [(Site::AttentionOutput, &cap.attn_out), (Site::MlpIntermediate, &cap.mlp_up)] {
            for &k in k_grid {
                let mut acc = 0.0;
                for &span in layout.spans() {
                    let probes = probe_rows(t, span, pos);
                    let mut s = 0.0;
                    for r in &probes {
                        s += concentration_ratio(r, k)?;
                    }
                    acc += s / probes.len() as f64;
                }
                rows.push((l, site, k, acc / idx.len() as f64));
            }
        }
    }
    Ok(ConcentrationReport {
        samples: idx.len(),
        k_grid: k_grid.to_vec(),
        rows,
    })
}

/// `score[i,j] = |W[i,j]| · ‖X[:,i]‖₂` for `W: in×out`, `X: S×in`.
pub fn wanda_score(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.shape().len() != 2 || x.shape().len() != 2 || x.cols() != w.rows() {
        return Err(Error::Dimension(format!(
            "weight {:?} vs activations {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let norms: Vec<f64> = (0..x.cols())
        .map(|i| (0..x.rows()).map(|s| x.at2(s, i).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut out = Vec::with_capacity(w.len());
    for (i, n) in norms.iter().enumerate() {
        out.extend(w.row(i).iter().map(|v| v.abs() * n));
    }
    Tensor::new(w.shape().to_vec(), out)
}

/// Per-head sums of the output-projection scores, with activations taken
/// from the concatenated head outputs at every calibration position.
pub fn wanda_head_scores(model: &TransformerModel, calib: &[&[TokenId]]) -> Result<Vec<Vec<f64>>> {
    if calib.is_empty() {
        return Err(contract("empty calibration set"));
    }
    let (caps, _) = model.capture_batch(calib)?;
    let dk = model.config.d_k;
    model
        .layers
        .iter()
        .zip(&caps)
        .map(|(layer, cap)| {
            let s = wanda_score(&layer.wo, &cap.attn_heads)?;
            Ok((0..layer.n_heads)
                .map(|h| (h * dk..(h + 1) * dk).map(|r| s.row(r).iter().sum::<f64>()).sum())
                .collect())
        })
        .collect()
}
