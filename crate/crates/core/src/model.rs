//! Pre-norm decoder-only transformer with rotary attention and a gated MLP.
//!
//! Layers may be ragged after pruning: every layer records its own head
//! count and MLP width, while the residual width `d_model` is global.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::tensor::{HeadGeometry, HeadScale, SeqLayout, Tape, Tensor, Var};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_base: f64,
    pub tie_embeddings: bool,
    pub mlp_bias: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Desk-scale geometry used by the pipeline defaults.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 8,
            n_heads: 8,
            d_k: 8,
            d_model: 64,
            d_ff: 256,
            vocab_size,
            max_seq_len: 16,
            rope_base: 10000.0,
            tie_embeddings: true,
            mlp_bias: true,
            norm_eps: 1e-6,
        }
    }

    /// Checks the construction-time invariants, including `d_model == n_heads·d_k`.
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be at least 1")));
        }
        if self.d_model != self.n_heads * self.d_k {
            return Err(contract(format!(
                "d_model {} != n_heads {} × d_k {}",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.d_k % 2 != 0 {
            return Err(contract(format!("rotary encoding needs an even d_k, got {}", self.d_k)));
        }
        if !(self.rope_base > 0.0) || !(self.norm_eps > 0.0) {
            return Err(contract("rope_base and norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub n_heads: usize,
    pub d_ff: usize,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub b_gate: Option<Tensor>,
    pub b_up: Option<Tensor>,
    pub b_down: Option<Tensor>,
    pub attn_norm: Tensor,
    pub mlp_norm: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        let mut v = vec![
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_gate", &self.w_gate),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ];
        for (name, b) in [("b_gate", &self.b_gate), ("b_up", &self.b_up), ("b_down", &self.b_down)] {
            if let Some(b) = b {
                v.push((name, b));
            }
        }
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ];
        for b in [&mut self.b_gate, &mut self.b_up, &mut self.b_down] {
            if let Some(b) = b.as_mut() {
                v.push(b);
            }
        }
        v
    }

    /// Checks every extent against the recorded head count, MLP width and `d_model`.
    pub fn validate(&self, d_model: usize, d_k: usize, mlp_bias: bool) -> Result<()> {
        if self.n_heads == 0 || self.d_ff == 0 {
            return Err(contract("a layer needs at least one head and one MLP dimension"));
        }
        let hd = self.n_heads * d_k;
        let expect: [(&str, &Tensor, Vec<usize>); 9] = [
            ("wq", &self.wq, vec![d_model, hd]),
            ("wk", &self.wk, vec![d_model, hd]),
            ("wv", &self.wv, vec![d_model, hd]),
            ("wo", &self.wo, vec![hd, d_model]),
            ("w_gate", &self.w_gate, vec![d_model, self.d_ff]),
            ("w_up", &self.w_up, vec![d_model, self.d_ff]),
            ("w_down", &self.w_down, vec![self.d_ff, d_model]),
            ("attn_norm", &self.attn_norm, vec![d_model]),
            ("mlp_norm", &self.mlp_norm, vec![d_model]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        let biases = [
            ("b_gate", &self.b_gate, self.d_ff),
            ("b_up", &self.b_up, self.d_ff),
            ("b_down", &self.b_down, d_model),
        ];
        for (name, b, n) in biases {
            match (b, mlp_bias) {
                (Some(t), true) if t.shape() == [n] => {}
                (None, false) => {}
                _ => return Err(Error::Dimension(format!("{name} inconsistent with mlp_bias={mlp_bias}"))),
            }
        }
        Ok(())
    }
}

/// Scales one head's pre-softmax attention logits by `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuppressionSpec {
    pub layer: usize,
    pub head: usize,
    pub epsilon: f64,
}

/// Layers to bypass entirely (both sublayers) during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LayerMask {
    pub skip: BTreeSet<usize>,
}

impl LayerMask {
    pub fn single(layer: usize) -> Self {
        LayerMask {
            skip: BTreeSet::from([layer]),
        }
    }

    pub fn of(layers: impl IntoIterator<Item = usize>) -> Self {
        LayerMask {
            skip: layers.into_iter().collect(),
        }
    }
}

/// Which parameter leaves of a recorded forward pass require gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    None,
    All,
    EmbeddingOnly,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'m> {
    pub suppress: Option<SuppressionSpec>,
    pub mask: Option<&'m LayerMask>,
}

/// Intermediate values recorded during a forward pass, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    /// Concatenated per-head attention outputs before the output projection, `S × heads_l·d_k`.
    pub attn_heads: Tensor,
    /// Attention sublayer output after the output projection, `S × d_model`.
    pub attn_out: Tensor,
    /// MLP up-projection pre-activation `X·W_up + b_up`, `S × d_ff_l`.
    pub mlp_up: Tensor,
}

/// Handles to the values a forward pass recorded on a tape.
pub struct Graph {
    pub logits: Var,
    pub embedding: Var,
    /// Parameter leaves in [`TransformerModel::named_params`] order.
    pub params: Vec<Var>,
    pub layout: SeqLayout,
    /// Attention nodes of every executed layer, indexed by layer.
    pub attention: Vec<Option<Var>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    /// `d_model × V`; `None` when the output head is tied to the token embedding.
    pub lm_head: Option<Tensor>,
}

impl TransformerModel {
    /// Deterministic seeded initialization.
    ///
    /// Matrices are drawn from N(0, 0.02²); the residual-output projections
    /// (`W_o`, `W_down`) are further scaled by `1/√(2L)`. Norm weights start
    /// at one and biases at zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut draw = |rows: usize, cols: usize, scale: f64| -> Tensor {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng) * scale).collect();
            Tensor::matrix(rows, cols, data).expect("finite init")
        };
        let (d, hd, ff) = (config.d_model, config.n_heads * config.d_k, config.d_ff);
        let token_embedding = draw(config.vocab_size, d, 1.0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let wq = draw(d, hd, 1.0);
            let wk = draw(d, hd, 1.0);
            let wv = draw(d, hd, 1.0);
            let wo = draw(hd, d, resid);
            let w_gate = draw(d, ff, 1.0);
            let w_up = draw(d, ff, 1.0);
            let w_down = draw(ff, d, resid);
            let bias = |n: usize| config.mlp_bias.then(|| Tensor::zeros(&[n]));
            layers.push(LayerWeights {
                n_heads: config.n_heads,
                d_ff: ff,
                wq,
                wk,
                wv,
                wo,
                w_gate,
                w_up,
                w_down,
                b_gate: bias(ff),
                b_up: bias(ff),
                b_down: bias(d),
                attn_norm: ones(d),
                mlp_norm: ones(d),
            });
        }
        let lm_head = (!config.tie_embeddings).then(|| draw(d, config.vocab_size, 1.0));
        Ok(TransformerModel {
            config: config.clone(),
            token_embedding,
            layers,
            final_norm: ones(d),
            lm_head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn heads_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.n_heads).collect()
    }

    pub fn d_ff_per_layer(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.d_ff).collect()
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            v.extend(l.tensors().into_iter().map(|(n, t)| (format!("layers.{i}.{n}"), t)));
        }
        v.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            v.push(("lm_head".to_string(), h));
        }
        v
    }

    /// Mutable parameters in [`Self::named_params`] order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.token_embedding];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.final_norm);
        if let Some(h) = self.lm_head.as_mut() {
            v.push(h);
        }
        v
    }

    /// Total scalar parameters; a tied output head is counted once, with the embedding.
    pub fn param_count(&self, include_embeddings: bool) -> usize {
        self.named_params()
            .iter()
            .filter(|(n, _)| include_embeddings || n != "token_embedding")
            .map(|(_, t)| t.len())
            .sum()
    }

    /// SHA-256 over every parameter's shape and bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_params() {
            h.update(name.as_bytes());
            for &e in t.shape() {
                h.update((e as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Checks all structural invariants of the (possibly pruned) model.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        if self.layers.is_empty() || self.layers.len() != c.n_layers {
            return Err(contract(format!(
                "config says {} layers, model has {}",
                c.n_layers,
                self.layers.len()
            )));
        }
        if self.token_embedding.shape() != [c.vocab_size, c.d_model] {
            return Err(Error::Dimension(format!(
                "token_embedding {:?} vs vocab {} × d_model {}",
                self.token_embedding.shape(),
                c.vocab_size,
                c.d_model
            )));
        }
        if self.final_norm.shape() != [c.d_model] {
            return Err(Error::Dimension("final_norm width".into()));
        }
        match (&self.lm_head, c.tie_embeddings) {
            (None, true) => {}
            (Some(h), false) if h.shape() == [c.d_model, c.vocab_size] => {}
            _ => return Err(Error::Dimension("lm_head inconsistent with tie_embeddings".into())),
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.validate(c.d_model, c.d_k, c.mlp_bias)
                .map_err(|e| Error::Dimension(format!("layer {i}: {e}")))?;
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        if tokens.is_empty() {
            return Err(contract("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {bad} with vocab_size {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_options(&self, opts: &ForwardOptions) -> Result<()> {
        if let Some(s) = opts.suppress {
            if s.layer >= self.n_layers() || s.head >= self.layers[s.layer].n_heads {
                return Err(Error::Index(format!(
                    "suppression of layer {} head {}",
                    s.layer, s.head
                )));
            }
            if !(0.0..=1.0).contains(&s.epsilon) {
                return Err(contract(format!("epsilon {} outside [0,1]", s.epsilon)));
            }
        }
        if let Some(m) = opts.mask {
            if let Some(&bad) = m.skip.iter().find(|&&l| l >= self.n_layers()) {
                return Err(Error::Index(format!(
                    "mask layer {bad} of {}",
                    self.n_layers()
                )));
            }
        }
        Ok(())
    }

    /// Records a forward pass over packed sequences on `tape`.
    ///
    /// Parameters enter the tape as borrowed leaves; `grad` selects which of
    /// them require gradients. When `capture` is given, per-layer
    /// intermediates are copied out as they are computed.
    pub fn record<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        seqs: &[&[TokenId]],
        opts: ForwardOptions,
        grad: GradScope,
        mut capture: Option<&mut Vec<LayerCapture>>,
    ) -> Result<Graph> {
        if seqs.is_empty() {
            return Err(contract("forward over an empty batch"));
        }
        for s in seqs {
            self.check_tokens(s)?;
        }
        self.check_options(&opts)?;
        let c = &self.config;
        let layout = SeqLayout::from_lengths(&seqs.iter().map(|s| s.len()).collect::<Vec<_>>());
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();

        let mut params = Vec::new();
        let embedding = tape.leaf_ref(&self.token_embedding, grad != GradScope::None);
        params.push(embedding);
        let mut leaf = |tape: &mut Tape<'a>, t: &'a Tensor| {
            let v = tape.leaf_ref(t, grad == GradScope::All);
            params.push(v);
            v
        };
        let mut x = tape.gather_rows(embedding, &ids)?;
        let mut attention = vec![None; self.n_layers()];
        for (li, layer) in self.layers.iter().enumerate() {
            let attn_norm = leaf(tape, &layer.attn_norm);
            let wq = leaf(tape, &layer.wq);
            let wk = leaf(tape, &layer.wk);
            let wv = leaf(tape, &layer.wv);
            let wo = leaf(tape, &layer.wo);
            let mlp_norm = leaf(tape, &layer.mlp_norm);
            let w_gate = leaf(tape, &layer.w_gate);
            let w_up = leaf(tape, &layer.w_up);
            let w_down = leaf(tape, &layer.w_down);
            let b_gate = layer.b_gate.as_ref().map(|b| leaf(tape, b));
            let b_up = layer.b_up.as_ref().map(|b| leaf(tape, b));
            let b_down = layer.b_down.as_ref().map(|b| leaf(tape, b));
            if opts.mask.is_some_and(|m| m.skip.contains(&li)) {
                continue;
            }
            let geom = HeadGeometry {
                n_heads: layer.n_heads,
                d_k: c.d_k,
            };
            let h = tape.rms_norm(x, attn_norm, c.norm_eps)?;
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let q = tape.rope(q, &layout, geom, c.rope_base)?;
            let k = tape.rope(k, &layout, geom, c.rope_base)?;
            let scale = opts
                .suppress
                .filter(|s| s.layer == li)
                .map(|s| HeadScale {
                    head: s.head,
                    epsilon: s.epsilon,
                });
            let a = tape.causal_attention(q, k, v, &layout, geom, scale)?;
            attention[li] = Some(a);
            let attn_out = tape.matmul(a, wo)?;
            x = tape.add(x, attn_out)?;

            let h = tape.rms_norm(x, mlp_norm, c.norm_eps)?;
            let mut gate = tape.matmul(h, w_gate)?;
            if let Some(b) = b_gate {
                gate = tape.add_bias(gate, b)?;
            }
            let mut up = tape.matmul(h, w_up)?;
            if let Some(b) = b_up {
                up = tape.add_bias(up, b)?;
            }
            if let Some(cap) = capture.as_deref_mut() {
                cap.push(LayerCapture {
                    attn_heads: tape.value(a).clone(),
                    attn_out: tape.value(attn_out).clone(),
                    mlp_up: tape.value(up).clone(),
                });
            }
            let act = tape.silu(gate)?;
            let prod = tape.mul(act, up)?;
            let mut down = tape.matmul(prod, w_down)?;
            if let Some(b) = b_down {
                down = tape.add_bias(down, b)?;
            }
            x = tape.add(x, down)?;
        }
        let final_norm = leaf(tape, &self.final_norm);
        let xn = tape.rms_norm(x, final_norm, c.norm_eps)?;
        let logits = match &self.lm_head {
            Some(h) => {
                let head = leaf(tape, h);
                tape.matmul(xn, head)?
            }
            None => tape.matmul_bt(xn, embedding)?,
        };
        Ok(Graph {
            logits,
            embedding,
            params,
            layout,
            attention,
        })
    }

    /// Logits `S × V` for one sequence.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        suppress: Option<SuppressionSpec>,
        mask: Option<&LayerMask>,
    ) -> Result<Tensor> {
        self.forward_batch(&[tokens], ForwardOptions { suppress, mask })
    }

    /// Logits for packed sequences, `Σ len × V`, rows in input order.
    pub fn forward_batch(&self, seqs: &[&[TokenId]], opts: ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.record(&mut tape, seqs, opts, GradScope::None, None)?;
        Ok(tape.value(g.logits).clone())
    }

    /// Logits at the final position of every sequence, `B × V`.
    pub fn last_logits(&self, seqs: &[&[TokenId]], opts: ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.record(&mut tape, seqs, opts, GradScope::None, None)?;
        Ok(tape.value(g.logits).select_rows(&g.layout.last_rows()))
    }

    /// Per-layer attention outputs and MLP up-projections for one sequence.
    /// Layers are reported in model order.
    pub fn capture_activations(&self, tokens: &[TokenId]) -> Result<Vec<LayerCapture>> {
        Ok(self.capture_batch(&[tokens])?.0)
    }

    /// Captures for packed sequences, with the packing layout.
    pub fn capture_batch(&self, seqs: &[&[TokenId]]) -> Result<(Vec<LayerCapture>, SeqLayout)> {
        let mut tape = Tape::new();
        let mut cap = Vec::with_capacity(self.n_layers());
        let g = self.record(&mut tape, seqs, ForwardOptions::default(), GradScope::None, Some(&mut cap))?;
        Ok((cap, g.layout))
    }

    /// Mean next-token negative log-likelihood and the number of predicted positions.
    ///
    /// Each sequence of length `S` contributes the predictions of tokens
    /// `2..S` from their prefixes.
    pub fn nll(&self, seqs: &[&[TokenId]], mask: Option<&LayerMask>) -> Result<(f64, usize)> {
        let mut total = 0.0;
        let mut count = 0;
        // Bounded batches keep tape memory flat for large slices.
        for chunk in seqs.chunks(256) {
            let inputs: Vec<&[TokenId]> = chunk
                .iter()
                .filter(|s| s.len() >= 2)
                .map(|s| &s[..s.len() - 1])
                .collect();
            if inputs.is_empty() {
                continue;
            }
            let targets: Vec<usize> = chunk
                .iter()
                .filter(|s| s.len() >= 2)
                .flat_map(|s| s[1..].iter().map(|&t| t as usize))
                .collect();
            let mut tape = Tape::new();
            let g = self.record(
                &mut tape,
                &inputs,
                ForwardOptions { suppress: None, mask },
                GradScope::None,
                None,
            )?;
            let ce = tape.cross_entropy(g.logits, &targets)?;
            total += tape.value(ce).data()[0] * targets.len() as f64;
            count += targets.len();
        }
        if count == 0 {
            return Err(contract("perplexity over a slice with no predicted positions"));
        }
        Ok((total / count as f64, count))
    }

    /// `exp` of the mean next-token negative log-likelihood over all predicted positions.
    pub fn perplexity(&self, seqs: &[&[TokenId]], mask: Option<&LayerMask>) -> Result<f64> {
        if seqs.is_empty() {
            return Err(contract("perplexity over an empty slice"));
        }
        Ok(self.nll(seqs, mask)?.0.exp())
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n]).expect("finite")
}
