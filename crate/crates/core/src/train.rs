//! Ensemble fine-tuning: answer-token likelihood plus an L2 pull of every
//! adapter product toward zero (the pretrained weights), optimised with Adam,
//! with per-epoch validation and checkpoints.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{self, Archive};
use crate::autodiff::{Tape, Var};
use crate::data::{format_prompt, ClassReduction, McqSample, Tokenizer, MAX_CHOICES};
use crate::error::{Error, Result};
use crate::metrics::{self, PredictiveSet, UncertaintyRecord};
use crate::model::{
    adapters_on_tape, forward_graph, init_member, AdapterTarget, Batch, BaseWeights,
    EnsembleMember, LoraAdapter, Projection,
};
use crate::rng::{derive_seed, derive_seed_str, rng};
use crate::tensor::{softmax_in_place, Tensor};

/// A prompt ready for the model: tokens end right before the answer letter.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub label: usize,
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub name: String,
    pub samples: Vec<EncodedSample>,
}

impl EncodedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }
}

/// Tokenizes answer-free prompts. Prompts longer than `max_len` keep their
/// last `max_len` characters, so the answer slot is always in view.
pub fn encode_samples(
    name: &str,
    samples: &[McqSample],
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Result<EncodedSet> {
    let samples = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let text = format_prompt(s, false)?;
            let mut tokens = tokenizer.encode_lossy(&text);
            if tokens.len() > max_len {
                tokens.drain(..tokens.len() - max_len);
            }
            Ok(EncodedSample {
                id: format!("{name}-{i:05}"),
                tokens,
                label: s.answer,
                ambiguous: s.ambiguous,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EncodedSet {
        name: name.to_string(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub members: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Coefficient in front of `Σ‖BA‖²`.
    pub lambda_half: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Stop once `patience` epochs pass without a better ensemble
    /// validation NLL, and evaluate at the best epoch.
    pub early_stop: bool,
    pub patience: usize,
    /// Overrides the derived per-member seeds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub member_seeds: Option<Vec<u64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            members: 5,
            epochs: 20,
            batch_size: 16,
            learning_rate: 3e-3,
            lambda_half: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            early_stop: true,
            patience: 3,
            member_seeds: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.members == 0 {
            return bad("members must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_half >= 0.0) {
            return bad(format!("lambda_half {} must be non-negative", self.lambda_half));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.early_stop && self.patience == 0 {
            return bad("patience must be at least 1 when early_stop is set".into());
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive".into());
        }
        if let Some(seeds) = &self.member_seeds {
            if seeds.len() != self.members {
                return bad(format!(
                    "{} member seeds given for {} members",
                    seeds.len(),
                    self.members
                ));
            }
        }
        Ok(())
    }

    pub fn member_seed(&self, index: usize) -> u64 {
        match &self.member_seeds {
            Some(s) => s[index],
            None => derive_seed(self.seed, index as u64),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 32.0,
        }
    }
}

/// `λ_half · Σᵢ ‖BᵢAᵢ‖²_F`.
pub fn l2_lora_penalty(adapters: &[LoraAdapter], lambda_half: f64) -> Result<f64> {
    let mut total = 0.0;
    for ad in adapters {
        total += ad.product()?.sq_norm();
    }
    Ok(lambda_half * total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub nll: f64,
    pub penalty: f64,
}

struct LossGraph {
    loss: Var,
    nll: Var,
    penalty: Var,
    handles: Vec<(Var, Var)>,
}

fn check_batch(batch: &[&EncodedSample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    if let Some(s) = batch.iter().find(|s| s.label >= MAX_CHOICES) {
        return Err(Error::Input(format!("sample {} has label {}", s.id, s.label)));
    }
    Ok(())
}

/// Builds answer NLL + penalty on `tape` given adapter handles.
fn loss_on_tape(
    tape: &mut Tape,
    base: &BaseWeights,
    targets: &[AdapterTarget],
    alphas: &[f64],
    handles: Vec<(Var, Var)>,
    batch: &[&EncodedSample],
    choice_tokens: &[usize; MAX_CHOICES],
    lambda_half: f64,
) -> Result<LossGraph> {
    check_batch(batch)?;
    let cfg = &base.config;
    let w = base.on_tape(tape, false);
    let mut per_layer = vec![(None, None); cfg.num_layers];
    for ((target, &alpha), &(a, b)) in targets.iter().zip(alphas).zip(&handles) {
        let vars = Some(crate::model::AdapterVars { a, b, alpha });
        let slot = per_layer
            .get_mut(target.layer)
            .ok_or_else(|| Error::Config(format!("adapter on missing layer {}", target.layer)))?;
        match target.projection {
            Projection::Query => slot.0 = vars,
            Projection::Value => slot.1 = vars,
        }
    }
    let seqs: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
    let b = Batch::new(cfg, &seqs)?;
    let logits = forward_graph(tape, cfg, &w, &per_layer, &b, &b.last_rows())?;
    let answer: Vec<usize> = batch.iter().map(|s| choice_tokens[s.label]).collect();
    let nll = tape.masked_cross_entropy(logits, &answer, &vec![true; batch.len()])?;

    let mut sq = None;
    for &(a, b) in &handles {
        let prod = tape.matmul(b, a)?;
        let s = tape.sq_norm(prod);
        sq = Some(match sq {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let penalty = match sq {
        Some(s) => tape.scale(s, lambda_half),
        None => tape.constant(Tensor::scalar(0.0)),
    };
    let loss = tape.add(nll, penalty)?;
    Ok(LossGraph {
        loss,
        nll,
        penalty,
        handles,
    })
}

fn member_graph(
    tape: &mut Tape,
    member: &EnsembleMember,
    batch: &[&EncodedSample],
    choice_tokens: &[usize; MAX_CHOICES],
    lambda_half: f64,
    trainable: bool,
) -> Result<LossGraph> {
    let (_, handles) = adapters_on_tape(tape, &member.adapters, member.base.config.num_layers, trainable)?;
    let targets: Vec<AdapterTarget> = member.adapters.iter().map(|a| a.target).collect();
    let alphas: Vec<f64> = member.adapters.iter().map(|a| a.alpha).collect();
    loss_on_tape(tape, &member.base, &targets, &alphas, handles, batch, choice_tokens, lambda_half)
}

/// Mean answer-token NLL over `batch` plus the L2 adapter penalty.
pub fn training_loss(
    member: &EnsembleMember,
    batch: &[&EncodedSample],
    choice_tokens: &[usize; MAX_CHOICES],
    lambda_half: f64,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let g = member_graph(&mut tape, member, batch, choice_tokens, lambda_half, false)?;
    Ok(LossValue {
        total: tape.value(g.loss).item(),
        nll: tape.value(g.nll).item(),
        penalty: tape.value(g.penalty).item(),
    })
}

/// Loss and its gradient for every adapter tensor, in
/// [`EnsembleMember::adapter_tensors`] order.
pub fn loss_and_grads(
    member: &EnsembleMember,
    batch: &[&EncodedSample],
    choice_tokens: &[usize; MAX_CHOICES],
    lambda_half: f64,
) -> Result<(LossValue, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let g = member_graph(&mut tape, member, batch, choice_tokens, lambda_half, true)?;
    let mut grads = tape.backward(g.loss)?;
    let value = LossValue {
        total: tape.value(g.loss).item(),
        nll: tape.value(g.nll).item(),
        penalty: tape.value(g.penalty).item(),
    };
    let mut out = Vec::with_capacity(g.handles.len() * 2);
    for (a, b) in g.handles {
        out.push(grads.take(a));
        out.push(grads.take(b));
    }
    Ok((value, out))
}

/// Worst relative finite-difference error of [`loss_and_grads`] over every
/// adapter entry, as `|num − g| / (|g| + 1e-8)`.
pub fn gradient_check(
    member: &EnsembleMember,
    batch: &[&EncodedSample],
    choice_tokens: &[usize; MAX_CHOICES],
    lambda_half: f64,
    h: f64,
) -> Result<f64> {
    let targets: Vec<AdapterTarget> = member.adapters.iter().map(|a| a.target).collect();
    let alphas: Vec<f64> = member.adapters.iter().map(|a| a.alpha).collect();
    let params: Vec<Tensor> = member.adapter_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    crate::autodiff::finite_diff_check(
        |tape, vars| {
            let handles = vars.chunks(2).map(|c| (c[0], c[1])).collect();
            let g = loss_on_tape(tape, &member.base, &targets, &alphas, handles, batch, choice_tokens, lambda_half)?;
            Ok(g.loss)
        },
        &params,
        h,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn digest(&self) -> String {
        let mut named = Vec::with_capacity(self.m.len() * 2);
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            named.push((format!("m{i}"), m));
            named.push((format!("v{i}"), v));
        }
        let bytes = archive::encode(&json!({ "t": self.t }), &named).expect("adam state encodes");
        archive::sha256_hex(&bytes)
    }
}

/// One bias-corrected Adam update; advances `state.t` first.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Input(format!(
            "adam got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &g), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * g;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * g * g;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

const EVAL_BATCH: usize = 32;

/// Reduced class distribution for every sample of `set`.
pub fn predict(
    base: &BaseWeights,
    adapters: &[LoraAdapter],
    set: &EncodedSet,
    reduction: &ClassReduction,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(set.len());
    for chunk in set.samples.chunks(EVAL_BATCH) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let batch = Batch::new(&base.config, &seqs)?;
        let logits = crate::model::logits_for_rows(base, adapters, &batch, &batch.last_rows())?;
        for r in 0..chunk.len() {
            let mut row = logits.row(r).to_vec();
            softmax_in_place(&mut row);
            out.push(reduction.reduce(&row));
        }
    }
    Ok(out)
}

/// Accuracy, NLL and ECE of a single predictor.
pub fn score_single(probs: &[Vec<f64>], set: &EncodedSet, ece_bins: usize) -> Result<(f64, f64, f64)> {
    let recs: Vec<UncertaintyRecord> = probs
        .iter()
        .zip(&set.samples)
        .map(|(p, s)| UncertaintyRecord::from_members(s.id.clone(), std::slice::from_ref(p), s.label))
        .collect::<Result<_>>()?;
    Ok((
        metrics::accuracy(&recs)?,
        metrics::nll(&recs)?,
        metrics::ece(&recs, ece_bins)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// `None` for ensemble-level rows.
    pub member: Option<usize>,
    pub epoch: usize,
    pub split: String,
    pub metric: String,
    pub value: f64,
}

impl LogRow {
    fn new(member: Option<usize>, epoch: usize, split: &str, metric: &str, value: f64) -> Self {
        Self {
            member,
            epoch,
            split: split.into(),
            metric: metric.into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// `(member, epoch, seconds)`; kept apart from `rows` because it is the
    /// only nondeterministic quantity.
    pub wall_clock: Vec<(usize, usize, f64)>,
}

impl TrainLog {
    /// Member rows first in member order, then ensemble rows; each block is
    /// ordered by epoch and then by insertion.
    pub fn sort(&mut self) {
        self.rows
            .sort_by_key(|r| (r.member.map_or(usize::MAX, |m| m), r.epoch));
        self.wall_clock.sort_by_key(|&(m, e, _)| (m, e));
    }

    pub fn value(&self, member: Option<usize>, epoch: usize, split: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.member == member && r.epoch == epoch && r.split == split && r.metric == metric)
            .map(|r| r.value)
    }

    /// `(epoch, value)` of one series in epoch order.
    pub fn series(&self, member: Option<usize>, split: &str, metric: &str) -> Vec<(usize, f64)> {
        let mut v: Vec<(usize, f64)> = self
            .rows
            .iter()
            .filter(|r| r.member == member && r.split == split && r.metric == metric)
            .map(|r| (r.epoch, r.value))
            .collect();
        v.sort_by_key(|&(e, _)| e);
        v
    }

    /// Epoch with the lowest ensemble validation NLL.
    pub fn best_epoch(&self) -> Result<usize> {
        let s = self.series(None, "validation", "nll");
        let nlls: Vec<f64> = s.iter().map(|&(_, v)| v).collect();
        Ok(s[early_stop_select(&nlls)?].0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("member,epoch,split,metric,value\n");
        for r in &self.rows {
            let member = r.member.map_or("ensemble".to_string(), |m| m.to_string());
            out.push_str(&format!("{member},{},{},{},{:?}\n", r.epoch, r.split, r.metric, r.value));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let err = |m: &str| Error::Format(format!("train log line {}: {m}", i + 1));
            if f.len() != 5 {
                return Err(err("expected 5 fields"));
            }
            let member = if f[0] == "ensemble" {
                None
            } else {
                Some(f[0].parse().map_err(|_| err("bad member"))?)
            };
            rows.push(LogRow {
                member,
                epoch: f[1].parse().map_err(|_| err("bad epoch"))?,
                split: f[2].into(),
                metric: f[3].into(),
                value: f[4].parse().map_err(|_| err("bad value"))?,
            });
        }
        Ok(Self {
            rows,
            wall_clock: Vec::new(),
        })
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("member,epoch,seconds\n");
        for (m, e, s) in &self.wall_clock {
            out.push_str(&format!("{m},{e},{s:.3}\n"));
        }
        out
    }
}

/// Index of the smallest value; ties go to the earliest.
pub fn early_stop_select(nlls: &[f64]) -> Result<usize> {
    if nlls.is_empty() {
        return Err(Error::Input("no epochs logged".into()));
    }
    let mut best = 0;
    for (i, &v) in nlls.iter().enumerate().skip(1) {
        if v < nlls[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Adapter snapshot taken after an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub member: usize,
    pub epoch: usize,
    pub seed: u64,
    pub adapters: Vec<LoraAdapter>,
    pub optimizer_digest: String,
    pub val_nll: f64,
}

impl Checkpoint {
    pub fn file_name(member: usize, epoch: usize) -> String {
        format!("member{member:02}_epoch{epoch:03}.ckpt")
    }

    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let targets: Vec<&AdapterTarget> = self.adapters.iter().map(|a| &a.target).collect();
        let ranks: Vec<usize> = self.adapters.iter().map(|a| a.rank).collect();
        let meta = json!({
            "kind": "member",
            "member": self.member,
            "epoch": self.epoch,
            "seed": self.seed,
            "config_hash": config_hash,
            "optimizer_digest": self.optimizer_digest,
            "targets": targets,
            "ranks": ranks,
        });
        // Floats travel as tensors so they round-trip bit for bit.
        let alphas = Tensor::new(
            vec![self.adapters.len()],
            self.adapters.iter().map(|a| a.alpha).collect(),
        )?;
        let val = Tensor::scalar(self.val_nll);
        let mut named = vec![("alphas".to_string(), &alphas), ("val_nll".to_string(), &val)];
        for ad in &self.adapters {
            named.push((format!("{}.A", ad.target.name()), &ad.a));
            named.push((format!("{}.B", ad.target.name()), &ad.b));
        }
        archive::save(path, &meta, &named)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let m = &a.meta;
        let field = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("missing {k}")));
        let targets: Vec<AdapterTarget> = serde_json::from_value(field("targets")?.clone())?;
        let ranks: Vec<usize> = serde_json::from_value(field("ranks")?.clone())?;
        let alphas = a.get("alphas")?;
        if ranks.len() != targets.len() || alphas.len() != targets.len() {
            return Err(Error::Checkpoint("adapter metadata lengths disagree".into()));
        }
        let mut adapters = Vec::with_capacity(targets.len());
        for (i, target) in targets.into_iter().enumerate() {
            adapters.push(LoraAdapter {
                a: a.get(&format!("{}.A", target.name()))?.clone(),
                b: a.get(&format!("{}.B", target.name()))?.clone(),
                rank: ranks[i],
                alpha: alphas.data()[i],
                target,
            });
        }
        Ok(Self {
            member: serde_json::from_value(field("member")?.clone())?,
            epoch: serde_json::from_value(field("epoch")?.clone())?,
            seed: serde_json::from_value(field("seed")?.clone())?,
            optimizer_digest: serde_json::from_value(field("optimizer_digest")?.clone())?,
            val_nll: a.get("val_nll")?.item(),
            adapters,
        })
    }

    pub fn config_hash(a: &Archive) -> Option<&str> {
        a.meta.get("config_hash").and_then(|v| v.as_str())
    }
}

/// Shared inputs of a fine-tuning run.
pub struct FineTuneData<'a> {
    pub train: &'a EncodedSet,
    pub validation: &'a EncodedSet,
    pub reduction: &'a ClassReduction,
    pub choice_tokens: [usize; MAX_CHOICES],
    pub ece_bins: usize,
}

impl FineTuneData<'_> {
    fn check(&self) -> Result<()> {
        if self.train.is_empty() || self.validation.is_empty() {
            return Err(Error::Input(
                "fine-tuning needs nonempty train and validation sets".into(),
            ));
        }
        Ok(())
    }
}

/// One member's training state between epochs.
#[derive(Debug, Clone)]
pub struct MemberState {
    pub index: usize,
    pub member: EnsembleMember,
    pub adam: AdamState,
    order: Vec<usize>,
    shuffle: rand_chacha::ChaCha8Rng,
    pub epoch: usize,
}

/// What one epoch of one member produced.
#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub rows: Vec<LogRow>,
    pub seconds: f64,
    pub checkpoint: Checkpoint,
    pub val_probs: Vec<Vec<f64>>,
}

impl MemberState {
    pub fn new(member: EnsembleMember, index: usize, train_len: usize) -> Self {
        let adam = AdamState::new(
            &member
                .adapter_tensors()
                .iter()
                .map(|(_, t)| *t)
                .collect::<Vec<_>>(),
        );
        let shuffle = rng(derive_seed_str(member.seed, "shuffle"));
        Self {
            index,
            member,
            adam,
            order: (0..train_len).collect(),
            shuffle,
            epoch: 0,
        }
    }

    /// One shuffled pass over the train set, then validation.
    pub fn run_epoch(&mut self, data: &FineTuneData<'_>, cfg: &TrainConfig) -> Result<EpochOutcome> {
        let start = Instant::now();
        let adam = cfg.adam();
        self.epoch += 1;
        let epoch = self.epoch;
        self.order.shuffle(&mut self.shuffle);
        let (mut nll_sum, mut n_seen) = (0.0, 0usize);
        for chunk in self.order.chunks(cfg.batch_size) {
            let batch: Vec<&EncodedSample> =
                chunk.iter().map(|&i| &data.train.samples[i]).collect();
            let (value, grads) =
                loss_and_grads(&self.member, &batch, &data.choice_tokens, cfg.lambda_half)?;
            nll_sum += value.nll * batch.len() as f64;
            n_seen += batch.len();
            adam_step(
                &mut self.member.adapter_tensors_mut(),
                &grads,
                &mut self.adam,
                &adam,
            )?;
        }
        let penalty = l2_lora_penalty(&self.member.adapters, cfg.lambda_half)?;
        let train_nll = nll_sum / n_seen as f64;
        let probs = predict(
            &self.member.base,
            &self.member.adapters,
            data.validation,
            data.reduction,
        )?;
        let (acc, nll, ece) = score_single(&probs, data.validation, data.ece_bins)?;
        let m = Some(self.index);
        let rows = vec![
            LogRow::new(m, epoch, "train", "nll", train_nll),
            LogRow::new(m, epoch, "train", "penalty", penalty),
            LogRow::new(m, epoch, "train", "loss", train_nll + penalty),
            LogRow::new(m, epoch, "validation", "nll", nll),
            LogRow::new(m, epoch, "validation", "accuracy", acc),
            LogRow::new(m, epoch, "validation", "ece", ece),
        ];
        let checkpoint = Checkpoint {
            member: self.index,
            epoch,
            seed: self.member.seed,
            adapters: self.member.adapters.clone(),
            optimizer_digest: self.adam.digest(),
            val_nll: nll,
        };
        let seconds = start.elapsed().as_secs_f64();
        log::info!(
            "member {} epoch {epoch}: train nll {train_nll:.4} penalty {penalty:.4} val nll {nll:.4} acc {acc:.3} ({seconds:.1}s)",
            self.index
        );
        Ok(EpochOutcome {
            rows,
            seconds,
            checkpoint,
            val_probs: probs,
        })
    }
}

/// Everything one member's training produced.
#[derive(Debug, Clone)]
pub struct MemberRun {
    pub member: EnsembleMember,
    pub rows: Vec<LogRow>,
    pub wall_clock: Vec<(usize, usize, f64)>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains one member for `cfg.epochs` epochs; never stops early.
pub fn fine_tune_member(
    member: EnsembleMember,
    index: usize,
    data: &FineTuneData<'_>,
    cfg: &TrainConfig,
) -> Result<MemberRun> {
    cfg.validate()?;
    data.check()?;
    let mut state = MemberState::new(member, index, data.train.len());
    let mut run = MemberRun {
        member: state.member.clone(),
        rows: Vec::new(),
        wall_clock: Vec::new(),
        checkpoints: Vec::new(),
    };
    for _ in 0..cfg.epochs {
        let out = state.run_epoch(data, cfg)?;
        run.rows.extend(out.rows);
        run.wall_clock.push((index, state.epoch, out.seconds));
        run.checkpoints.push(out.checkpoint);
    }
    run.member = state.member;
    Ok(run)
}

#[derive(Debug, Clone)]
pub struct EnsembleRun {
    pub members: Vec<EnsembleMember>,
    /// `checkpoints[k][e]`: member `k` after epoch `e + 1`.
    pub checkpoints: Vec<Vec<Checkpoint>>,
    pub log: TrainLog,
}

/// Ensemble-level validation rows for one epoch.
fn ensemble_rows(
    epoch: usize,
    per_member: &[Vec<Vec<f64>>],
    set: &EncodedSet,
    ece_bins: usize,
) -> Result<Vec<LogRow>> {
    let ps = PredictiveSet::from_members(per_member, set.labels())?;
    let recs = ps.records(&set.ids())?;
    Ok(vec![
        LogRow::new(None, epoch, "validation", "nll", metrics::nll(&recs)?),
        LogRow::new(None, epoch, "validation", "accuracy", metrics::accuracy(&recs)?),
        LogRow::new(None, epoch, "validation", "ece", metrics::ece(&recs, ece_bins)?),
        LogRow::new(
            None,
            epoch,
            "validation",
            "mean_member_nll",
            ps.mean_member_nll()?,
        ),
    ])
}

/// Members advance one epoch at a time so the ensemble validation NLL is
/// known after every epoch. Within an epoch members run in parallel; each
/// depends only on its own seed, so the schedule never shows in the result.
pub struct EnsembleTrainer<'a> {
    data: &'a FineTuneData<'a>,
    cfg: TrainConfig,
    states: Vec<MemberState>,
    checkpoints: Vec<Vec<Checkpoint>>,
    log: TrainLog,
}

impl<'a> EnsembleTrainer<'a> {
    pub fn new(
        base: Arc<BaseWeights>,
        data: &'a FineTuneData<'a>,
        cfg: &TrainConfig,
        lora: &LoraConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        data.check()?;
        let states = (0..cfg.members)
            .map(|k| {
                let member = init_member(base.clone(), lora.rank, lora.alpha, cfg.member_seed(k))?;
                Ok(MemberState::new(member, k, data.train.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            data,
            cfg: cfg.clone(),
            checkpoints: vec![Vec::new(); cfg.members],
            states,
            log: TrainLog::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.states[0].epoch
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Checkpoints so far, indexed `[member][epoch - 1]`.
    pub fn checkpoints(&self) -> &[Vec<Checkpoint>] {
        &self.checkpoints
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let (data, cfg) = (self.data, &self.cfg);
        let outcomes: Vec<EpochOutcome> = self
            .states
            .par_iter_mut()
            .map(|s| s.run_epoch(data, cfg))
            .collect::<Result<_>>()?;
        let epoch = self.epoch();
        let per_member: Vec<Vec<Vec<f64>>> =
            outcomes.iter().map(|o| o.val_probs.clone()).collect();
        self.log.rows.extend(ensemble_rows(
            epoch,
            &per_member,
            data.validation,
            data.ece_bins,
        )?);
        for (k, out) in outcomes.into_iter().enumerate() {
            self.log.rows.extend(out.rows);
            self.log.wall_clock.push((k, epoch, out.seconds));
            self.checkpoints[k].push(out.checkpoint);
        }
        self.log.sort();
        Ok(())
    }

    /// True once `patience` epochs have passed without a new best ensemble
    /// validation NLL.
    pub fn stalled(&self, patience: usize) -> Result<bool> {
        if self.epoch() == 0 {
            return Ok(false);
        }
        Ok(self.epoch() - self.log.best_epoch()? >= patience)
    }

    /// Trains until `epochs` epochs are done, or earlier when `early_stop`
    /// is set and the run stalls.
    pub fn run_until(&mut self, epochs: usize, early_stop: bool) -> Result<()> {
        while self.epoch() < epochs {
            if early_stop && self.stalled(self.cfg.patience)? {
                log::info!("stopping after epoch {}", self.epoch());
                break;
            }
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn finish(self) -> EnsembleRun {
        EnsembleRun {
            members: self.states.into_iter().map(|s| s.member).collect(),
            checkpoints: self.checkpoints,
            log: self.log,
        }
    }
}

pub fn fine_tune_ensemble(
    base: Arc<BaseWeights>,
    data: &FineTuneData<'_>,
    cfg: &TrainConfig,
    lora: &LoraConfig,
) -> Result<EnsembleRun> {
    let mut trainer = EnsembleTrainer::new(base, data, cfg, lora)?;
    trainer.run_until(cfg.epochs, cfg.early_stop)?;
    Ok(trainer.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub corpus_size: usize,
    pub heldout_size: usize,
    /// Fraction of synthetic corpus answers that follow the world.
    pub knowledge: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 3e-3,
            corpus_size: 2000,
            heldout_size: 100,
            knowledge: 1.0,
            seed: 0,
        }
    }
}

/// Next-token loss summed over all positions of `seqs`, and the count.
fn lm_graph(tape: &mut Tape, base: &BaseWeights, trainable: bool, seqs: &[&[usize]]) -> Result<(Var, Vec<Var>, usize)> {
    let w = base.on_tape(tape, trainable);
    let inputs: Vec<&[usize]> = seqs.iter().map(|s| &s[..s.len() - 1]).collect();
    let targets: Vec<usize> = seqs.iter().flat_map(|s| s[1..].iter().copied()).collect();
    let batch = Batch::new(&base.config, &inputs)?;
    let per_layer = vec![(None, None); base.config.num_layers];
    let logits = forward_graph(tape, &base.config, &w, &per_layer, &batch, &batch.all_rows())?;
    let loss = tape.masked_cross_entropy(logits, &targets, &vec![true; targets.len()])?;
    Ok((loss, w.all(), targets.len()))
}

/// Token-weighted perplexity of `seqs` under the base model.
pub fn perplexity(base: &BaseWeights, seqs: &[Vec<usize>]) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in seqs.chunks(EVAL_BATCH) {
        let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
        if refs.iter().any(|s| s.len() < 2) {
            return Err(Error::Input("perplexity needs sequences of length >= 2".into()));
        }
        let mut tape = Tape::new();
        let (loss, _, n) = lm_graph(&mut tape, base, false, &refs)?;
        total += tape.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Input("perplexity of an empty corpus".into()));
    }
    Ok((total / count as f64).exp())
}

/// Next-token training of every base weight on `corpus`.
pub fn pretrain(base: &mut BaseWeights, corpus: &[Vec<usize>], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if cfg.steps > 0 && corpus.is_empty() {
        return Err(Error::Input("empty pretraining corpus".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("pretrain batch_size must be at least 1".into()));
    }
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    let mut state = AdamState::new(&base.named_tensors().iter().map(|(_, t)| *t).collect::<Vec<_>>());
    let mut r = rng(derive_seed_str(cfg.seed, "pretrain-order"));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            batch.push(corpus[order[cursor]].as_slice());
            cursor += 1;
        }
        let mut tape = Tape::new();
        let (loss, vars, _) = lm_graph(&mut tape, base, true, &batch)?;
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = vars.iter().map(|&v| grads.take(v)).collect();
        adam_step(&mut base.tensors_mut(), &g, &mut state, &adam)?;
        let l = tape.value(loss).item();
        losses.push(l);
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {l:.4}");
        }
    }
    Ok(losses)
}
