//! Versioned binary checkpoints.
//!
//! Layout: `PRCK`, u32 version, u64 header length, UTF-8 header, tensor
//! payload (little-endian IEEE-754), SHA-256 of everything before it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{LayerWeights, ModelConfig, TransformerModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PRCK";
pub const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;
const DIGEST: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(crate::error::contract(format!("unknown precision {s:?}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMeta {
    pub stage: String,
    pub seed_lineage: String,
}

#[derive(Debug, Clone, PartialEq)]
struct DirEntry {
    name: String,
    dtype: Precision,
    shape: Vec<usize>,
    offset: usize,
}

fn config_lines(c: &ModelConfig) -> Vec<(String, String)> {
    [
        ("n_layers", c.n_layers.to_string()),
        ("n_heads", c.n_heads.to_string()),
        ("d_k", c.d_k.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("vocab_size", c.vocab_size.to_string()),
        ("max_seq_len", c.max_seq_len.to_string()),
        ("rope_base", format!("{:?}", c.rope_base)),
        ("tie_embeddings", c.tie_embeddings.to_string()),
        ("mlp_bias", c.mlp_bias.to_string()),
        ("norm_eps", format!("{:?}", c.norm_eps)),
    ]
    .into_iter()
    .map(|(k, v)| (format!("config.{k}"), v))
    .collect()
}

/// Serializes `model` with metadata; tensors are stored at `precision`.
pub fn to_bytes(model: &TransformerModel, meta: &CheckpointMeta, precision: Precision) -> Result<Vec<u8>> {
    if meta.stage.contains('\n') || meta.seed_lineage.contains('\n') {
        return Err(crate::error::contract("checkpoint metadata must be single-line"));
    }
    let mut header = String::new();
    let _ = writeln!(header, "stage={}", meta.stage);
    let _ = writeln!(header, "seed_lineage={}", meta.seed_lineage);
    for (k, v) in config_lines(&model.config) {
        let _ = writeln!(header, "{k}={v}");
    }
    for (i, l) in model.layers.iter().enumerate() {
        let _ = writeln!(header, "layer.{i}.n_heads={}", l.n_heads);
        let _ = writeln!(header, "layer.{i}.d_ff={}", l.d_ff);
    }
    let mut payload = Vec::new();
    for (name, t) in model.named_params() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(
            header,
            "tensor={name}\t{}\t{}\t{}",
            precision.as_str(),
            shape.join(","),
            payload.len()
        );
        for &v in t.data() {
            match precision {
                Precision::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len() + DIGEST);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

fn shape_err(msg: impl Into<String>) -> Error {
    CheckpointError::ShapeMismatch(msg.into()).into()
}

struct Parsed<'b> {
    meta: CheckpointMeta,
    fields: BTreeMap<String, String>,
    dir: Vec<DirEntry>,
    header: &'b str,
    payload: &'b [u8],
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < PREFIX {
        return Err(CheckpointError::Truncated.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version).into());
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let hend = PREFIX.checked_add(hlen).ok_or(CheckpointError::Truncated)?;
    if bytes.len() < hend + DIGEST {
        return Err(CheckpointError::Truncated.into());
    }
    let header = std::str::from_utf8(&bytes[PREFIX..hend]).map_err(|_| header_err("header is not UTF-8"))?;
    let mut meta = CheckpointMeta::default();
    let mut fields = BTreeMap::new();
    let mut dir = Vec::new();
    let mut expected_payload = 0usize;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| header_err(format!("line without '=': {line:?}")))?;
        match k {
            "stage" => meta.stage = v.to_string(),
            "seed_lineage" => meta.seed_lineage = v.to_string(),
            "tensor" => {
                let f: Vec<&str> = v.split('\t').collect();
                if f.len() != 4 {
                    return Err(header_err(format!("bad tensor entry {v:?}")));
                }
                let dtype = Precision::parse(f[1]).map_err(|_| header_err(format!("bad dtype {:?}", f[1])))?;
                let shape: Vec<usize> = f[2]
                    .split(',')
                    .map(|x| x.parse().map_err(|_| header_err(format!("bad shape {:?}", f[2]))))
                    .collect::<Result<_>>()?;
                let offset: usize = f[3].parse().map_err(|_| header_err(format!("bad offset {:?}", f[3])))?;
                if offset != expected_payload {
                    return Err(shape_err(format!("tensor {} at offset {offset}, expected {expected_payload}", f[0])));
                }
                expected_payload += shape.iter().product::<usize>() * dtype.width();
                dir.push(DirEntry {
                    name: f[0].to_string(),
                    dtype,
                    shape,
                    offset,
                });
            }
            _ => {
                fields.insert(k.to_string(), v.to_string());
            }
        }
    }
    let pend = hend + expected_payload;
    if bytes.len() < pend + DIGEST {
        return Err(CheckpointError::Truncated.into());
    }
    if bytes.len() > pend + DIGEST {
        return Err(shape_err("trailing bytes after the payload"));
    }
    if Sha256::digest(&bytes[..pend]).as_slice() != &bytes[pend..] {
        return Err(CheckpointError::ChecksumMismatch.into());
    }
    Ok(Parsed {
        meta,
        fields,
        dir,
        header,
        payload: &bytes[hend..pend],
    })
}

fn field<T: std::str::FromStr>(fields: &BTreeMap<String, String>, key: &str) -> Result<T> {
    fields
        .get(key)
        .ok_or_else(|| header_err(format!("missing {key}")))?
        .parse()
        .map_err(|_| header_err(format!("unparsable {key}")))
}

fn decode_tensor(e: &DirEntry, payload: &[u8]) -> Result<Tensor> {
    let n: usize = e.shape.iter().product();
    let bytes = &payload[e.offset..e.offset + n * e.dtype.width()];
    let data: Vec<f64> = match e.dtype {
        Precision::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Precision::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(e.shape.clone(), data).map_err(|err| shape_err(format!("{}: {err}", e.name)))
}

fn take(tensors: &mut BTreeMap<&str, Tensor>, name: &str) -> Result<Tensor> {
    tensors
        .remove(name)
        .ok_or_else(|| shape_err(format!("missing tensor {name}")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TransformerModel, CheckpointMeta)> {
    let p = parse(bytes)?;
    let f = &p.fields;
    let config = ModelConfig {
        n_layers: field(f, "config.n_layers")?,
        n_heads: field(f, "config.n_heads")?,
        d_k: field(f, "config.d_k")?,
        d_model: field(f, "config.d_model")?,
        d_ff: field(f, "config.d_ff")?,
        vocab_size: field(f, "config.vocab_size")?,
        max_seq_len: field(f, "config.max_seq_len")?,
        rope_base: field(f, "config.rope_base")?,
        tie_embeddings: field(f, "config.tie_embeddings")?,
        mlp_bias: field(f, "config.mlp_bias")?,
        norm_eps: field(f, "config.norm_eps")?,
    };
    let mut tensors: BTreeMap<&str, Tensor> = BTreeMap::new();
    for e in &p.dir {
        if tensors.insert(&e.name, decode_tensor(e, p.payload)?).is_some() {
            return Err(shape_err(format!("duplicate tensor {}", e.name)));
        }
    }
    let n_entries = tensors.len();
    let token_embedding = take(&mut tensors, "token_embedding")?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let mut t = |n: &str| take(&mut tensors, &format!("layers.{i}.{n}"));
        let (attn_norm, wq, wk, wv, wo) = (t("attn_norm")?, t("wq")?, t("wk")?, t("wv")?, t("wo")?);
        let (mlp_norm, w_gate, w_up, w_down) = (t("mlp_norm")?, t("w_gate")?, t("w_up")?, t("w_down")?);
        let (b_gate, b_up, b_down) = if config.mlp_bias {
            (Some(t("b_gate")?), Some(t("b_up")?), Some(t("b_down")?))
        } else {
            (None, None, None)
        };
        layers.push(LayerWeights {
            n_heads: field(f, &format!("layer.{i}.n_heads"))?,
            d_ff: field(f, &format!("layer.{i}.d_ff"))?,
            wq,
            wk,
            wv,
            wo,
            w_gate,
            w_up,
            w_down,
            b_gate,
            b_up,
            b_down,
            attn_norm,
            mlp_norm,
        });
    }
    let final_norm = take(&mut tensors, "final_norm")?;
    let lm_head = if config.tie_embeddings {
        None
    } else {
        Some(take(&mut tensors, "lm_head")?)
    };
    let model = TransformerModel {
        config,
        token_embedding,
        layers,
        final_norm,
        lm_head,
    };
    if model.named_params().len() != n_entries {
        return Err(shape_err("directory lists tensors the model does not use"));
    }
    model.validate().map_err(|e| shape_err(e.to_string()))?;
    Ok((model, p.meta))
}

pub fn save(model: &TransformerModel, meta: &CheckpointMeta, precision: Precision, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model, meta, precision)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(TransformerModel, CheckpointMeta)> {
    from_bytes(&std::fs::read(path)?)
}

/// The verified header text of a checkpoint file.
pub fn inspect(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let p = parse(&bytes)?;
    Ok(format!("format=PRCK v{VERSION}\n{}", p.header))
}
