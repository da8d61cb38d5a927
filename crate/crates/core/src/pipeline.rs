//! Three-stage prune-and-restore orchestration, configuration, ledger and
//! baseline comparison.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, CheckpointMeta, Precision};
use crate::diagnostics::{observe, wanda_head_scores, ProbePosition, DEFAULT_K_GRID};
use crate::distill::{restore, train_base, DistillConfig, KlDirection, TrainReport};
use crate::error::{contract, Error, Result};
use crate::evalmetrics::{evaluate, EvalReport};
use crate::importance::{
    embedding_dim_importance, head_importance, head_importance_raw, mlp_dim_stats, select_heads,
    select_hidden_dims, select_layers, select_mlp_dims, CalibrationSet, ImportanceReport, Propagation, TauPolicy,
};
use crate::model::{ModelConfig, TransformerModel};
use crate::prune::{apply_plan, prune_heads, random_plan, PruningPlan};
use crate::recdata::{GeneratorConfig, RecDataset, Split};

/// HR/NDCG cutoff tracked by the stage ledger.
pub const LEDGER_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeacherMode {
    /// The model as it was immediately before the stage's surgery.
    Previous,
    /// The base model, for every stage.
    Original,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    /// Load the dataset from this file instead of generating it.
    pub data_path: Option<PathBuf>,
    /// Model geometry; `vocab_size` is taken from the dataset at run time.
    pub model: ModelConfig,
    /// Load the base model from this checkpoint instead of training it.
    pub base_checkpoint: Option<PathBuf>,
    pub base: DistillConfig,
    pub calibration_size: usize,
    pub alpha: f64,
    pub propagation: Propagation,
    pub k_attn: usize,
    /// `None`: `d_k × (n_heads − k_attn)`.
    pub hidden_keep: Option<usize>,
    pub tau: TauPolicy,
    /// `None`: twice the residual width at the time stage II runs.
    pub k_mlp: Option<usize>,
    pub k_layer: usize,
    pub layer_recompute: bool,
    /// Restoration settings for stages I, II and III.
    pub distill: [DistillConfig; 3],
    pub teacher: TeacherMode,
    pub observe_samples: usize,
    pub observe_k_grid: Vec<f64>,
    pub observe_position: ProbePosition,
    pub eval_k: Vec<usize>,
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let data = GeneratorConfig::default();
        let distill = DistillConfig::default();
        PipelineConfig {
            seed: 0,
            model: ModelConfig::desk(data.n_items + 3),
            data,
            data_path: None,
            base_checkpoint: None,
            base: DistillConfig {
                lambda: 0.0,
                ..distill.clone()
            },
            calibration_size: 100,
            alpha: 0.3,
            propagation: Propagation::Normalized,
            k_attn: 4,
            hidden_keep: None,
            tau: TauPolicy::Auto,
            k_mlp: None,
            k_layer: 5,
            layer_recompute: true,
            distill: [distill.clone(), distill.clone(), distill],
            teacher: TeacherMode::Previous,
            observe_samples: 100,
            observe_k_grid: DEFAULT_K_GRID.to_vec(),
            observe_position: ProbePosition::LastToken,
            eval_k: vec![10, 20],
            precision: Precision::F64,
        }
    }
}

fn parse_val<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Format(format!("config key {key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_val(key, x.trim())).collect()
}

fn auto_or<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_val(key, v).map(Some)
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn fmt_auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), T::to_string)
}

fn set_distill(d: &mut DistillConfig, field: &str, key: &str, v: &str) -> Result<()> {
    match field {
        "lambda" => d.lambda = parse_val(key, v)?,
        "kl_direction" => d.kl_direction = KlDirection::parse(v).map_err(|_| Error::Format(format!("{key}: {v:?}")))?,
        "learning_rate" => d.learning_rate = parse_val(key, v)?,
        "epochs" => d.epochs = parse_val(key, v)?,
        "batch_size" => d.batch_size = parse_val(key, v)?,
        _ => return Err(Error::Format(format!("unknown config key {key}"))),
    }
    Ok(())
}

impl PipelineConfig {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        match key {
            "seed" => self.seed = parse_val(key, v)?,
            "data.path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.n_items" => self.data.n_items = parse_val(key, v)?,
            "data.n_users" => self.data.n_users = parse_val(key, v)?,
            "data.n_clusters" => self.data.n_clusters = parse_val(key, v)?,
            "data.within_cluster_prob" => self.data.within_cluster_prob = parse_val(key, v)?,
            "data.h_max" => self.data.h_max = parse_val(key, v)?,
            "data.walk_len" => self.data.walk_len = parse_val(key, v)?,
            "model.n_layers" => self.model.n_layers = parse_val(key, v)?,
            "model.n_heads" => self.model.n_heads = parse_val(key, v)?,
            "model.d_k" => self.model.d_k = parse_val(key, v)?,
            "model.d_ff" => self.model.d_ff = parse_val(key, v)?,
            "model.max_seq_len" => self.model.max_seq_len = parse_val(key, v)?,
            "model.rope_base" => self.model.rope_base = parse_val(key, v)?,
            "model.tie_embeddings" => self.model.tie_embeddings = parse_val(key, v)?,
            "model.mlp_bias" => self.model.mlp_bias = parse_val(key, v)?,
            "model.norm_eps" => self.model.norm_eps = parse_val(key, v)?,
            "base.checkpoint" => self.base_checkpoint = (!v.is_empty()).then(|| PathBuf::from(v)),
            "base.learning_rate" => self.base.learning_rate = parse_val(key, v)?,
            "base.epochs" => self.base.epochs = parse_val(key, v)?,
            "base.batch_size" => self.base.batch_size = parse_val(key, v)?,
            "calibration.size" => self.calibration_size = parse_val(key, v)?,
            "stage1.alpha" => self.alpha = parse_val(key, v)?,
            "stage1.propagation" => {
                self.propagation = match v {
                    "normalized" => Propagation::Normalized,
                    "literal_raw" => Propagation::LiteralRaw,
                    _ => return Err(Error::Format(format!("{key}: {v:?}"))),
                }
            }
            "stage1.k_attn" => self.k_attn = parse_val(key, v)?,
            "stage1.hidden_keep" => self.hidden_keep = auto_or(key, v)?,
            "stage2.tau" => self.tau = TauPolicy::parse(v).map_err(|_| Error::Format(format!("{key}: {v:?}")))?,
            "stage2.k_mlp" => self.k_mlp = auto_or(key, v)?,
            "stage3.k_layer" => self.k_layer = parse_val(key, v)?,
            "stage3.recompute" => self.layer_recompute = parse_val(key, v)?,
            "distill.teacher" => {
                self.teacher = match v {
                    "previous" => TeacherMode::Previous,
                    "original" => TeacherMode::Original,
                    _ => return Err(Error::Format(format!("{key}: {v:?}"))),
                }
            }
            "observe.samples" => self.observe_samples = parse_val(key, v)?,
            "observe.k_grid" => self.observe_k_grid = parse_list(key, v)?,
            "observe.position" => {
                self.observe_position = match v {
                    "last" => ProbePosition::LastToken,
                    "mean" => ProbePosition::MeanOverPositions,
                    _ => return Err(Error::Format(format!("{key}: {v:?}"))),
                }
            }
            "eval.k_list" => self.eval_k = parse_list(key, v)?,
            "checkpoint.precision" => {
                self.precision = Precision::parse(v).map_err(|_| Error::Format(format!("{key}: {v:?}")))?
            }
            _ => {
                if let Some(field) = key.strip_prefix("distill.") {
                    for d in &mut self.distill {
                        set_distill(d, field, key, v)?;
                    }
                } else if let Some((stage, field)) = key
                    .strip_prefix("stage")
                    .and_then(|r| r.split_once(".distill."))
                {
                    let i: usize = match stage {
                        "1" => 0,
                        "2" => 1,
                        "3" => 2,
                        _ => return Err(Error::Format(format!("unknown config key {key}"))),
                    };
                    set_distill(&mut self.distill[i], field, key, v)?;
                } else {
                    return Err(Error::Format(format!("unknown config key {key}")));
                }
            }
        }
        self.model.d_model = self.model.n_heads * self.model.d_k;
        Ok(())
    }

    /// Parses the flat `key=value` format; `#` starts a comment line.
    ///
    /// Generic `distill.*` keys are applied before per-stage overrides.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut staged = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected key=value", n + 1)))?;
            let k = k.trim();
            if k.starts_with("stage") && k.contains(".distill.") {
                staged.push((k.to_string(), v.to_string()));
            } else {
                cfg.set(k, v)?;
            }
        }
        for (k, v) in staged {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    /// Fully resolved configuration in the same format.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut lines = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("data.path".into(), path(&self.data_path)),
            ("data.n_items".into(), d.n_items.to_string()),
            ("data.n_users".into(), d.n_users.to_string()),
            ("data.n_clusters".into(), d.n_clusters.to_string()),
            ("data.within_cluster_prob".into(), d.within_cluster_prob.to_string()),
            ("data.h_max".into(), d.h_max.to_string()),
            ("data.walk_len".into(), d.walk_len.to_string()),
            ("model.n_layers".into(), m.n_layers.to_string()),
            ("model.n_heads".into(), m.n_heads.to_string()),
            ("model.d_k".into(), m.d_k.to_string()),
            ("model.d_ff".into(), m.d_ff.to_string()),
            ("model.max_seq_len".into(), m.max_seq_len.to_string()),
            ("model.rope_base".into(), m.rope_base.to_string()),
            ("model.tie_embeddings".into(), m.tie_embeddings.to_string()),
            ("model.mlp_bias".into(), m.mlp_bias.to_string()),
            ("model.norm_eps".into(), m.norm_eps.to_string()),
            ("base.checkpoint".into(), path(&self.base_checkpoint)),
            ("base.learning_rate".into(), self.base.learning_rate.to_string()),
            ("base.epochs".into(), self.base.epochs.to_string()),
            ("base.batch_size".into(), self.base.batch_size.to_string()),
            ("calibration.size".into(), self.calibration_size.to_string()),
            ("stage1.alpha".into(), self.alpha.to_string()),
            (
                "stage1.propagation".into(),
                match self.propagation {
                    Propagation::Normalized => "normalized",
                    Propagation::LiteralRaw => "literal_raw",
                }
                .into(),
            ),
            ("stage1.k_attn".into(), self.k_attn.to_string()),
            ("stage1.hidden_keep".into(), fmt_auto(&self.hidden_keep)),
            ("stage2.tau".into(), self.tau.as_string()),
            ("stage2.k_mlp".into(), fmt_auto(&self.k_mlp)),
            ("stage3.k_layer".into(), self.k_layer.to_string()),
            ("stage3.recompute".into(), self.layer_recompute.to_string()),
            (
                "distill.teacher".into(),
                match self.teacher {
                    TeacherMode::Previous => "previous",
                    TeacherMode::Original => "original",
                }
                .into(),
            ),
        ];
        for (i, dc) in self.distill.iter().enumerate() {
            let p = format!("stage{}.distill", i + 1);
            lines.push((format!("{p}.lambda"), dc.lambda.to_string()));
            lines.push((format!("{p}.kl_direction"), dc.kl_direction.as_str().into()));
            lines.push((format!("{p}.learning_rate"), dc.learning_rate.to_string()));
            lines.push((format!("{p}.epochs"), dc.epochs.to_string()));
            lines.push((format!("{p}.batch_size"), dc.batch_size.to_string()));
        }
        lines.push(("observe.samples".into(), self.observe_samples.to_string()));
        lines.push(("observe.k_grid".into(), join(&self.observe_k_grid)));
        lines.push((
            "observe.position".into(),
            match self.observe_position {
                ProbePosition::LastToken => "last",
                ProbePosition::MeanOverPositions => "mean",
            }
            .into(),
        ));
        lines.push(("eval.k_list".into(), join(&self.eval_k)));
        lines.push(("checkpoint.precision".into(), self.precision.as_str().into()));
        let mut s = String::new();
        for (k, v) in lines {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.base.validate()?;
        for d in &self.distill {
            d.validate()?;
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(contract(format!("alpha {} outside [0,1]", self.alpha)));
        }
        if self.calibration_size == 0 {
            return Err(contract("calibration.size must be positive"));
        }
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(contract("eval.k_list needs positive cutoffs"));
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate()
    }

    fn seed_for(&self, offset: u64) -> u64 {
        self.seed.wrapping_mul(1000).wrapping_add(offset)
    }

    pub fn init_seed(&self) -> u64 {
        self.seed_for(1)
    }

    pub fn calibration_seed(&self) -> u64 {
        self.seed_for(2)
    }

    pub fn observe_seed(&self) -> u64 {
        self.seed_for(3)
    }

    pub fn base_train_seed(&self) -> u64 {
        self.seed_for(4)
    }

    pub fn stage_train_seed(&self, stage: usize) -> u64 {
        self.seed_for(4 + stage as u64)
    }

    pub fn seed_lineage(&self) -> String {
        format!(
            "seed={} data={} init={} calibration={} base_train={}",
            self.seed,
            self.data_seed(),
            self.init_seed(),
            self.calibration_seed(),
            self.base_train_seed()
        )
    }

    pub fn data_seed(&self) -> u64 {
        self.seed
    }

    /// The configured dataset: loaded from `data.path` or generated.
    pub fn dataset(&self) -> Result<RecDataset> {
        match &self.data_path {
            Some(p) => RecDataset::load(p),
            None => RecDataset::generate(&GeneratorConfig {
                seed: self.data_seed(),
                ..self.data.clone()
            }),
        }
    }

    pub fn model_config(&self, data: &RecDataset) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        m.vocab_size = data.vocab_size();
        m.d_model = m.n_heads * m.d_k;
        if data.max_full_len() > m.max_seq_len + 1 {
            return Err(contract(format!(
                "max_seq_len {} is too short for histories of {} items",
                m.max_seq_len, data.h_max
            )));
        }
        m.validate()?;
        Ok(m)
    }

    fn stage_distill(&self, stage: usize) -> DistillConfig {
        DistillConfig {
            seed: self.stage_train_seed(stage),
            ..self.distill[stage - 1].clone()
        }
    }
}

/// Initializes and trains the base model.
pub fn build_base(cfg: &PipelineConfig, data: &RecDataset) -> Result<(TransformerModel, Option<TrainReport>)> {
    if let Some(p) = &cfg.base_checkpoint {
        let (m, _) = checkpoint::load(p)?;
        if m.vocab_size() != data.vocab_size() {
            return Err(contract("base checkpoint vocabulary does not match the dataset"));
        }
        return Ok((m, None));
    }
    let mut model = TransformerModel::init(&cfg.model_config(data)?, cfg.init_seed())?;
    let dc = DistillConfig {
        seed: cfg.base_train_seed(),
        ..cfg.base.clone()
    };
    let report = train_base(&mut model, data, &dc)?;
    Ok((model, Some(report)))
}

/// Result of one prune-and-restore stage.
#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: usize,
    /// After surgery, before restoration.
    pub pruned: TransformerModel,
    /// After restoration (equal to `pruned` when the stage was a no-op).
    pub model: TransformerModel,
    pub plan: PruningPlan,
    /// `(file name, contents)` of every report the stage produced.
    pub reports: Vec<(String, String)>,
    pub train: Option<TrainReport>,
}

fn finish_stage(
    stage: usize,
    model: &TransformerModel,
    plan: PruningPlan,
    reports: Vec<(String, String)>,
    teacher: &TransformerModel,
    data: &RecDataset,
    cfg: &PipelineConfig,
) -> Result<StageOutcome> {
    let pruned = apply_plan(model, &plan)?;
    let mut restored = pruned.clone();
    let train = if plan.is_empty() {
        None
    } else {
        Some(restore(&mut restored, teacher, data, &cfg.stage_distill(stage))?)
    };
    let mut reports = reports;
    reports.push((format!("stage{stage}_plan.txt"), plan.to_text()));
    if let Some(t) = &train {
        reports.push((format!("stage{stage}_train.log"), t.log_lines()));
    }
    Ok(StageOutcome {
        stage,
        pruned,
        model: restored,
        plan,
        reports,
        train,
    })
}

/// Applies a saved plan to `model` and restores, exactly as the stage that produced it.
pub fn replay_stage(
    stage: usize,
    model: &TransformerModel,
    plan: PruningPlan,
    data: &RecDataset,
    cfg: &PipelineConfig,
    teacher: &TransformerModel,
) -> Result<StageOutcome> {
    if !(1..=3).contains(&stage) {
        return Err(contract(format!("no stage {stage}")));
    }
    finish_stage(stage, model, plan, Vec::new(), teacher, data, cfg)
}

fn calibration(data: &RecDataset, cfg: &PipelineConfig) -> Result<CalibrationSet> {
    CalibrationSet::sample(data, cfg.calibration_size, cfg.calibration_seed())
}

/// Head pruning by propagated suppression importance, then hidden-dimension
/// pruning by embedding gradient saliency, then restoration.
pub fn run_stage1(
    model: &TransformerModel,
    data: &RecDataset,
    cfg: &PipelineConfig,
    teacher: &TransformerModel,
) -> Result<StageOutcome> {
    let heads = model.heads_per_layer();
    if let Some((l, h)) = heads.iter().enumerate().find(|(_, &h)| cfg.k_attn >= h) {
        return Err(contract(format!("k_attn {} leaves no head in layer {l} ({h} heads)", cfg.k_attn)));
    }
    let hidden_keep = cfg
        .hidden_keep
        .unwrap_or(model.config.d_k * (model.config.n_heads.saturating_sub(cfg.k_attn)));
    if hidden_keep == 0 || hidden_keep > model.d_model() {
        return Err(contract(format!(
            "hidden_keep {hidden_keep} invalid for d_model {}",
            model.d_model()
        )));
    }
    let calib = calibration(data, cfg)?;
    let mut head_rep = ImportanceReport::default()
        .with_provenance("stage", "stage1")
        .with_provenance("calibration_size", calib.len())
        .with_provenance("calibration_seed", calib.seed)
        .with_provenance("alpha", cfg.alpha);
    let mut plan = PruningPlan::default();
    if cfg.k_attn > 0 {
        let raw = head_importance_raw(model, &calib.prompt_refs())?;
        let imp = head_importance(&raw, cfg.alpha, cfg.propagation, calib.len())?;
        head_rep.add_matrix("head_raw", &raw);
        head_rep.add_matrix("head_importance", &imp.scores);
        plan.heads_to_prune = select_heads(&imp.scores, cfg.k_attn)?;
        plan = plan.with_provenance("heads", format!("head_importance alpha={} k_attn={}", cfg.alpha, cfg.k_attn));
    }
    let headless = if plan.heads_to_prune.is_empty() {
        model.clone()
    } else {
        prune_heads(model, &plan.heads_to_prune)?
    };
    let mut dim_rep = ImportanceReport::default()
        .with_provenance("stage", "stage1")
        .with_provenance("calibration_size", calib.len())
        .with_provenance("calibration_seed", calib.seed);
    if hidden_keep < model.d_model() {
        let dims = embedding_dim_importance(&headless, &calib.full_refs())?;
        dim_rep.add_vector("hidden_dim", &dims.scores);
        plan.hidden_dims_to_keep = Some(select_hidden_dims(&dims, hidden_keep)?);
        plan = plan.with_provenance("hidden", format!("embedding_saliency keep={hidden_keep}"));
    }
    let reports = vec![
        ("stage1_head_importance.tsv".to_string(), head_rep.to_text()),
        ("stage1_hidden_importance.tsv".to_string(), dim_rep.to_text()),
    ];
    finish_stage(1, model, plan, reports, teacher, data, cfg)
}

/// MLP intermediate pruning by last-token activation frequency, then restoration.
pub fn run_stage2(
    model: &TransformerModel,
    data: &RecDataset,
    cfg: &PipelineConfig,
    teacher: &TransformerModel,
) -> Result<StageOutcome> {
    let k = cfg.k_mlp.unwrap_or(2 * model.d_model());
    if let Some((l, &f)) = model.d_ff_per_layer().iter().enumerate().find(|(_, &f)| k > f) {
        return Err(contract(format!("k_mlp {k} exceeds d_ff {f} of layer {l}")));
    }
    let calib = calibration(data, cfg)?;
    let stats = mlp_dim_stats(model, &calib.prompt_refs(), cfg.tau)?;
    let mut rep = ImportanceReport::default()
        .with_provenance("stage", "stage2")
        .with_provenance("calibration_size", calib.len())
        .with_provenance("calibration_seed", calib.seed)
        .with_provenance("tau_policy", cfg.tau.as_string())
        .with_provenance("tau", join(&stats.tau));
    let counts: Vec<Vec<f64>> = stats
        .counts
        .iter()
        .map(|c| c.iter().map(|&x| x as f64).collect())
        .collect();
    rep.add_matrix("mlp_count", &counts);
    let mut plan = PruningPlan::default();
    if model.d_ff_per_layer().iter().any(|&f| f > k) {
        plan.mlp_dims_to_keep = Some(select_mlp_dims(&stats, k)?);
        plan = plan.with_provenance("mlp", format!("activation_frequency tau={} k_mlp={k}", cfg.tau.as_string()));
    }
    let reports = vec![("stage2_mlp_stats.tsv".to_string(), rep.to_text())];
    finish_stage(2, model, plan, reports, teacher, data, cfg)
}

/// Greedy layer removal by perplexity increase, then restoration.
pub fn run_stage3(
    model: &TransformerModel,
    data: &RecDataset,
    cfg: &PipelineConfig,
    teacher: &TransformerModel,
) -> Result<StageOutcome> {
    if cfg.k_layer == 0 || cfg.k_layer > model.n_layers() {
        return Err(contract(format!(
            "k_layer {} invalid for {} layers",
            cfg.k_layer,
            model.n_layers()
        )));
    }
    let calib = calibration(data, cfg)?;
    let sel = select_layers(model, &calib.full_refs(), cfg.k_layer, cfg.layer_recompute)?;
    let mut rep = ImportanceReport::default()
        .with_provenance("stage", "stage3")
        .with_provenance("calibration_size", calib.len())
        .with_provenance("calibration_seed", calib.seed)
        .with_provenance("recompute", cfg.layer_recompute)
        .with_provenance("removal_order", join(&sel.removal_order));
    for (r, round) in sel.rounds.iter().enumerate() {
        rep.add_vector(&format!("delta_ppl_round{r}"), &round.delta_ppl);
    }
    let mut plan = PruningPlan::default();
    if !sel.removal_order.is_empty() {
        plan.layers_to_remove = Some(sel.removal_order.clone());
        plan = plan.with_provenance("layers", format!("delta_ppl k_layer={}", cfg.k_layer));
    }
    let reports = vec![("stage3_layer_importance.tsv".to_string(), rep.to_text())];
    finish_stage(3, model, plan, reports, teacher, data, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRow {
    pub stage: String,
    pub n_layers: usize,
    pub params_non_embedding: usize,
    /// Valid HR@20 right after surgery; `None` for the base model.
    pub pre_restore_hr: Option<f64>,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ledger {
    pub rows: Vec<LedgerRow>,
}

impl Ledger {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "stage\tn_layers\tparams_non_embedding\tpre_restore_valid_hr@{LEDGER_K}\tvalid_hr@{LEDGER_K}\tvalid_ndcg@{LEDGER_K}\n"
        );
        for r in &self.rows {
            let pre = r.pre_restore_hr.map_or("-".to_string(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{pre}\t{:.6}\t{:.6}",
                r.stage, r.n_layers, r.params_non_embedding, r.hr, r.ndcg
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub base: TransformerModel,
    pub base_test: EvalReport,
    pub stages: Vec<StageOutcome>,
    pub final_model: TransformerModel,
    pub final_test: EvalReport,
    pub ledger: Ledger,
}

struct Output<'p> {
    dir: Option<&'p Path>,
}

impl Output<'_> {
    fn write(&self, name: &str, contents: &[u8]) -> Result<()> {
        if let Some(d) = self.dir {
            fs::write(d.join(name), contents)?;
        }
        Ok(())
    }

    fn checkpoint(&self, name: &str, model: &TransformerModel, stage: &str, cfg: &PipelineConfig) -> Result<()> {
        let meta = CheckpointMeta {
            stage: stage.to_string(),
            seed_lineage: cfg.seed_lineage(),
        };
        self.write(name, &checkpoint::to_bytes(model, &meta, cfg.precision)?)
    }
}

fn valid_at_k(model: &TransformerModel, data: &RecDataset) -> Result<EvalReport> {
    evaluate(model, data, Split::Valid, &[LEDGER_K])
}

/// Runs base training, observation, the three stages and the final test
/// evaluation. With `out_dir`, every artifact is written there as it is produced.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: Option<&Path>) -> Result<PipelineResult> {
    cfg.validate()?;
    let out = Output { dir: out_dir };
    if let Some(d) = out_dir {
        fs::create_dir_all(d)?;
    }
    out.write("config.txt", cfg.to_text().as_bytes())?;
    let data = cfg.dataset()?;
    out.write("dataset.tsv", data.to_text().as_bytes())?;

    let (base, base_report) = build_base(cfg, &data)?;
    if let Some(r) = &base_report {
        out.write("base_train.log", r.log_lines().as_bytes())?;
    }
    out.checkpoint("base.ckpt", &base, "base", cfg)?;
    let obs = observe(
        &base,
        &data,
        cfg.observe_samples.min(data.train.len()),
        &cfg.observe_k_grid,
        cfg.observe_seed(),
        cfg.observe_position,
    )?;
    out.write("observe.tsv", obs.to_text().as_bytes())?;

    let mut ledger = Ledger::default();
    let base_valid = valid_at_k(&base, &data)?;
    ledger.rows.push(LedgerRow {
        stage: "base".into(),
        n_layers: base.n_layers(),
        params_non_embedding: base.param_count(false),
        pre_restore_hr: None,
        hr: base_valid.hr_at(LEDGER_K),
        ndcg: base_valid.ndcg_at(LEDGER_K),
    });
    out.write("ledger.tsv", ledger.to_text().as_bytes())?;

    let runners: [fn(&TransformerModel, &RecDataset, &PipelineConfig, &TransformerModel) -> Result<StageOutcome>; 3] =
        [run_stage1, run_stage2, run_stage3];
    let mut current = base.clone();
    let mut stages = Vec::with_capacity(3);
    for (i, run) in runners.iter().enumerate() {
        let teacher = match cfg.teacher {
            TeacherMode::Previous => &current,
            TeacherMode::Original => &base,
        };
        let outcome = run(&current, &data, cfg, teacher)?;
        for (name, text) in &outcome.reports {
            out.write(name, text.as_bytes())?;
        }
        let label = format!("stage{}", i + 1);
        out.checkpoint(&format!("{label}.ckpt"), &outcome.model, &label, cfg)?;
        let pre = valid_at_k(&outcome.pruned, &data)?;
        let post = valid_at_k(&outcome.model, &data)?;
        ledger.rows.push(LedgerRow {
            stage: label,
            n_layers: outcome.model.n_layers(),
            params_non_embedding: outcome.model.param_count(false),
            pre_restore_hr: Some(pre.hr_at(LEDGER_K)),
            hr: post.hr_at(LEDGER_K),
            ndcg: post.ndcg_at(LEDGER_K),
        });
        out.write("ledger.tsv", ledger.to_text().as_bytes())?;
        current = outcome.model.clone();
        stages.push(outcome);
    }
    let base_test = evaluate(&base, &data, Split::Test, &cfg.eval_k)?;
    let final_test = evaluate(&current, &data, Split::Test, &cfg.eval_k)?;
    out.write("base_test_eval.txt", base_test.to_kv().as_bytes())?;
    out.write("final_test_eval.txt", final_test.to_kv().as_bytes())?;
    Ok(PipelineResult {
        base,
        base_test,
        stages,
        final_model: current,
        final_test,
        ledger,
    })
}

/// Head-pruning variants compared at equal `k_attn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Propagated, normalized suppression importance.
    PruneRec,
    Random,
    /// Output-projection weight magnitude times input activation norm.
    Wanda,
    /// Per-layer normalized importance without propagation.
    NoAlpha,
    /// Raw importance averaged over layers; the same heads pruned everywhere.
    GlobalImportance,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::PruneRec,
        Strategy::Random,
        Strategy::Wanda,
        Strategy::NoAlpha,
        Strategy::GlobalImportance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::PruneRec => "prunerec",
            Strategy::Random => "random",
            Strategy::Wanda => "wanda",
            Strategy::NoAlpha => "no_alpha",
            Strategy::GlobalImportance => "global_importance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| contract(format!("unknown strategy {s:?}")))
    }
}

/// Heads each strategy prunes from `model`.
pub fn strategy_heads(
    strategy: Strategy,
    model: &TransformerModel,
    calib: &CalibrationSet,
    raw: &[Vec<f64>],
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    match strategy {
        Strategy::PruneRec => select_heads(&head_importance(raw, cfg.alpha, cfg.propagation, calib.len())?.scores, cfg.k_attn),
        Strategy::NoAlpha => select_heads(&head_importance(raw, 0.0, Propagation::Normalized, calib.len())?.scores, cfg.k_attn),
        Strategy::Random => Ok(random_plan(model, cfg.k_attn, seed)?.heads_to_prune),
        Strategy::Wanda => select_heads(&wanda_head_scores(model, &calib.prompt_refs())?, cfg.k_attn),
        Strategy::GlobalImportance => {
            let h = raw[0].len();
            if raw.iter().any(|r| r.len() != h) {
                return Err(contract("global importance needs the same head count in every layer"));
            }
            let mean: Vec<f64> = (0..h)
                .map(|i| raw.iter().map(|r| r[i]).sum::<f64>() / raw.len() as f64)
                .collect();
            let set = select_heads(&[mean], cfg.k_attn)?.remove(0);
            Ok(vec![set; raw.len()])
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seed: u64,
    pub pre_restore_hr: f64,
    pub hr: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

impl ComparisonTable {
    pub fn strategies(&self) -> Vec<Strategy> {
        let mut out: Vec<Strategy> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.strategy) {
                out.push(r.strategy);
            }
        }
        out
    }

    /// Median test HR@20 and NDCG@20 of one strategy.
    pub fn median_of(&self, s: Strategy) -> (f64, f64) {
        let rows: Vec<&ComparisonRow> = self.rows.iter().filter(|r| r.strategy == s).collect();
        (
            median(&rows.iter().map(|r| r.hr).collect::<Vec<_>>()),
            median(&rows.iter().map(|r| r.ndcg).collect::<Vec<_>>()),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("strategy\tseed\tpre_restore_hr@{LEDGER_K}\thr@{LEDGER_K}\tndcg@{LEDGER_K}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                r.strategy.name(),
                r.seed,
                r.pre_restore_hr,
                r.hr,
                r.ndcg
            );
        }
        for st in self.strategies() {
            let (hr, ndcg) = self.median_of(st);
            let _ = writeln!(s, "{}\tmedian\t-\t{hr:.6}\t{ndcg:.6}", st.name());
        }
        s
    }
}

/// For every seed: build data and a base model, prune heads with every
/// strategy at equal `k_attn`, restore identically and measure test HR/NDCG@20.
pub fn compare_baselines(cfg: &PipelineConfig, strategies: &[Strategy], seeds: &[u64]) -> Result<ComparisonTable> {
    if seeds.len() < 3 {
        return Err(contract("baseline comparison needs at least three seeds"));
    }
    if strategies.is_empty() {
        return Err(contract("no strategies to compare"));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        let c = PipelineConfig {
            seed,
            ..cfg.clone()
        };
        c.validate()?;
        let data = c.dataset()?;
        let (base, _) = build_base(&c, &data)?;
        let calib = calibration(&data, &c)?;
        let raw = head_importance_raw(&base, &calib.prompt_refs())?;
        for &st in strategies {
            let heads = strategy_heads(st, &base, &calib, &raw, &c, c.stage_train_seed(0))?;
            if heads.iter().any(|h| h.len() != c.k_attn) {
                return Err(contract(format!("{} did not prune exactly k_attn heads", st.name())));
            }
            let pruned = prune_heads(&base, &heads)?;
            let pre = evaluate(&pruned, &data, Split::Test, &[LEDGER_K])?;
            let mut student = pruned;
            if c.k_attn > 0 {
                restore(&mut student, &base, &data, &c.stage_distill(1))?;
            }
            let post = evaluate(&student, &data, Split::Test, &[LEDGER_K])?;
            rows.push(ComparisonRow {
                strategy: st,
                seed,
                pre_restore_hr: pre.hr_at(LEDGER_K),
                hr: post.hr_at(LEDGER_K),
                ndcg: post.ndcg_at(LEDGER_K),
            });
        }
    }
    Ok(ComparisonTable { rows })
}
