//! Cross-entropy fine-tuning and teacher-student restoration.
//!
//! Restoration minimizes `λ·KL(p_T ∥ p_S) + (1−λ)·CE(y, p_S)` over every
//! next-token position of the training split, with the teacher frozen.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{contract, Error, Result};
use crate::model::{ForwardOptions, GradScope, TokenId, TransformerModel};
use crate::recdata::{RecDataset, Split};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlDirection {
    /// `KL(p_T ∥ p_S)`.
    Forward,
    /// `KL(p_S ∥ p_T)`.
    Reverse,
}

impl KlDirection {
    pub fn as_str(self) -> &'static str {
        match self {
            KlDirection::Forward => "forward",
            KlDirection::Reverse => "reverse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(KlDirection::Forward),
            "reverse" => Ok(KlDirection::Reverse),
            _ => Err(contract(format!("unknown KL direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub lambda: f64,
    pub kl_direction: KlDirection,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda: 0.8,
            kl_direction: KlDirection::Forward,
            learning_rate: 3e-4,
            epochs: 3,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(contract(format!("lambda {} outside [0,1]", self.lambda)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(contract(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(contract("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(contract("invalid optimizer hyperparameters"));
        }
        Ok(())
    }
}

/// Scalar nodes of the combined loss and its two components.
#[derive(Debug, Clone, Copy)]
pub struct DistillTerms {
    pub total: Var,
    pub kl: Var,
    pub ce: Var,
}

/// Records `λ·mean KL + (1−λ)·CE` for student logits against constant teacher logits.
pub fn distill_loss<'a>(
    tape: &mut Tape<'a>,
    student_logits: Var,
    teacher_logits: &Tensor,
    targets: &[usize],
    lambda: f64,
    direction: KlDirection,
) -> Result<DistillTerms> {
    if tape.value(student_logits).shape() != teacher_logits.shape() {
        return Err(Error::Dimension(format!(
            "student logits {:?} vs teacher logits {:?}",
            tape.value(student_logits).shape(),
            teacher_logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("lambda {lambda} outside [0,1]")));
    }
    let n = teacher_logits.rows();
    let v = teacher_logits.cols();
    let mut t_logp = Vec::with_capacity(n * v);
    for row in teacher_logits.data().chunks(v) {
        let lse = crate::tensor::log_sum_exp(row);
        t_logp.extend(row.iter().map(|&x| x - lse));
    }
    let t_p: Vec<f64> = t_logp.iter().map(|l| l.exp()).collect();
    let shape = teacher_logits.shape().to_vec();
    let t_logp = tape.leaf(Tensor::new(shape.clone(), t_logp)?, false);
    let s_logp = tape.log_softmax_last_dim(student_logits)?;
    let kl_sum = match direction {
        KlDirection::Forward => {
            let t_p = tape.leaf(Tensor::new(shape, t_p)?, false);
            let diff = tape.sub(t_logp, s_logp)?;
            let terms = tape.mul(t_p, diff)?;
            tape.sum(terms)?
        }
        KlDirection::Reverse => {
            let s_p = tape.exp(s_logp)?;
            let diff = tape.sub(s_logp, t_logp)?;
            let terms = tape.mul(s_p, diff)?;
            tape.sum(terms)?
        }
    };
    let kl = tape.scale(kl_sum, 1.0 / n as f64)?;
    let ce = tape.cross_entropy(student_logits, targets)?;
    let a = tape.scale(kl, lambda)?;
    let b = tape.scale(ce, 1.0 - lambda)?;
    let total = tape.add(a, b)?;
    Ok(DistillTerms { total, kl, ce })
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &TransformerModel, cfg: &DistillConfig) -> Self {
        let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
        Adam {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update; `grads[i]` belongs to the i-th parameter, `None` meaning zero.
    pub fn step(&mut self, model: &mut TransformerModel, grads: &[Option<Vec<f64>>]) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, p) in model.params_mut().into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                *w -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
            crate::tensor::check_finite(p.data(), "parameter after update")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub kl: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_kl: f64,
    pub mean_ce: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub lambda: f64,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochStats>,
    pub wall_time_secs: f64,
    pub final_metrics: Option<crate::evalmetrics::EvalReport>,
}

impl TrainReport {
    /// Line-oriented log: `step<TAB>loss<TAB>kl<TAB>ce`, exact round-trip formatting.
    pub fn log_lines(&self) -> String {
        let mut s = String::from("step\tloss\tkl\tce\n");
        for st in &self.steps {
            let _ = writeln!(s, "{}\t{:e}\t{:e}\t{:e}", st.step, st.loss, st.kl, st.ce);
        }
        s
    }
}

/// Splits full sequences into model inputs and next-token targets.
fn inputs_and_targets<'s>(seqs: &[&'s [TokenId]]) -> (Vec<&'s [TokenId]>, Vec<usize>) {
    let inputs = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets = seqs
        .iter()
        .flat_map(|s| s[1..].iter().map(|&t| t as usize))
        .collect();
    (inputs, targets)
}

fn train_loop(
    student: &mut TransformerModel,
    teacher: Option<&TransformerModel>,
    data: &RecDataset,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(contract("empty train split"));
    }
    let start = Instant::now();
    let lambda = if teacher.is_some() { cfg.lambda } else { 0.0 };
    let mut adam = Adam::new(student, cfg);
    let mut steps = Vec::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = data.batches(Split::Train, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64))?;
        let (mut sl, mut sk, mut sc) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let (inputs, targets) = inputs_and_targets(&batch.unpadded());
            let teacher_logits = teacher
                .map(|t| t.forward_batch(&inputs, ForwardOptions::default()))
                .transpose()?;
            let grads;
            let log;
            {
                let mut tape = Tape::new();
                let g = student.record(&mut tape, &inputs, ForwardOptions::default(), GradScope::All, None)?;
                let (total, kl, ce) = match &teacher_logits {
                    Some(tl) => {
                        let t = distill_loss(&mut tape, g.logits, tl, &targets, lambda, cfg.kl_direction)?;
                        (t.total, Some(t.kl), t.ce)
                    }
                    None => {
                        let ce = tape.cross_entropy(g.logits, &targets)?;
                        (ce, None, ce)
                    }
                };
                tape.backward(total)?;
                grads = g
                    .params
                    .iter()
                    .map(|&p| tape.grad(p).map(<[f64]>::to_vec))
                    .collect::<Vec<_>>();
                let scalar = |v: Var| tape.value(v).data()[0];
                log = StepLog {
                    step: steps.len(),
                    loss: scalar(total),
                    kl: kl.map_or(0.0, scalar),
                    ce: scalar(ce),
                };
            }
            adam.step(student, &grads)?;
            sl += log.loss;
            sk += log.kl;
            sc += log.ce;
            steps.push(log);
        }
        let nb = batches.len() as f64;
        epochs.push(EpochStats {
            mean_loss: sl / nb,
            mean_kl: sk / nb,
            mean_ce: sc / nb,
        });
    }
    Ok(TrainReport {
        lambda,
        steps,
        epochs,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_metrics: None,
    })
}

/// Next-token cross-entropy fine-tuning over every position of the train split.
pub fn train_base(model: &mut TransformerModel, data: &RecDataset, cfg: &DistillConfig) -> Result<TrainReport> {
    train_loop(model, None, data, cfg)
}

/// Trains `student` in place against the frozen `teacher`.
pub fn restore(
    student: &mut TransformerModel,
    teacher: &TransformerModel,
    data: &RecDataset,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    if student.vocab_size() != teacher.vocab_size() {
        return Err(contract(format!(
            "student vocab {} != teacher vocab {}",
            student.vocab_size(),
            teacher.vocab_size()
        )));
    }
    train_loop(student, Some(teacher), data, cfg)
}

/// Mean training loss of `model` on a list of full sequences (no update).
pub fn mean_ce(model: &TransformerModel, seqs: &[&[TokenId]]) -> Result<f64> {
    Ok(model.nll(seqs, None)?.0)
}
