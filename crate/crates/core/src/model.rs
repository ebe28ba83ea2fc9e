//! Tiny decoder-only transformer with a frozen base and LoRA adapters on the
//! attention query and value projections.
//!
//! Projection weights use the `[out × in]` layout, so an adapted weight is
//! `W + α·B·A` with `B: [out × r]` and `A: [r × in]`. The adapted projection
//! is evaluated in factored form, `x·Wᵀ + α·(x·Aᵀ)·Bᵀ`; with `B = 0` the
//! second term is exactly zero and the output equals the base output bit for
//! bit.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{self, Archive};
use crate::autodiff::{KeySpan, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub max_seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 2,
            mlp_dim: 128,
            max_seq_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.mlp_dim,
            self.max_seq_len,
        ];
        if fields.contains(&0) {
            return Err(Error::Config("model dimensions must all be at least 1".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        archive::sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [(&'static str, &Tensor); 12] {
        [
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Pre-trained weights. Fine-tuning never mutates them.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    /// `[d × V]`
    pub head: Tensor,
}

fn normal(r: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(r)).collect()).expect("shape")
}

impl BaseWeights {
    /// Random initialisation: N(0, 0.02) weights, unit gains, zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(derive_seed_str(seed, "base-init"));
        let (v, d, m, t) = (
            config.vocab_size,
            config.embed_dim,
            config.mlp_dim,
            config.max_seq_len,
        );
        let std = 0.02;
        let resid_std = std / (2.0 * config.num_layers as f64).sqrt();
        let tok_emb = normal(&mut r, &[v, d], std);
        let pos_emb = normal(&mut r, &[t, d], std);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                ln1_gain: Tensor::ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]),
                wq: normal(&mut r, &[d, d], std),
                wk: normal(&mut r, &[d, d], std),
                wv: normal(&mut r, &[d, d], std),
                wo: normal(&mut r, &[d, d], resid_std),
                ln2_gain: Tensor::ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]),
                w1: normal(&mut r, &[m, d], std),
                b1: Tensor::zeros(&[m]),
                w2: normal(&mut r, &[d, m], resid_std),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        let head = normal(&mut r, &[d, v], std);
        Ok(Self {
            config: config.clone(),
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: Tensor::ones(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            head,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("head".into(), &self.head));
        out
    }

    /// Every tensor, in [`BaseWeights::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.head);
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = json!({ "kind": "base", "config": self.config });
        archive::encode(&meta, &self.named_tensors())
    }

    /// SHA-256 of the serialized weights.
    pub fn digest(&self) -> String {
        archive::sha256_hex(&self.to_bytes().expect("base weights serialize"))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        archive::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_archive(&archive::load(path)?)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(a.meta["config"].clone())?;
        let mut base = Self::init(&config, 0)?;
        let names: Vec<String> = base.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(base.tensors_mut()) {
            let t = a.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(base)
    }

    /// Registers every weight on `tape`, trainable or frozen.
    pub fn on_tape(&self, tape: &mut Tape, trainable: bool) -> WeightVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let tok_emb = leaf(&self.tok_emb);
        let pos_emb = leaf(&self.pos_emb);
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                ln1_gain: leaf(&l.ln1_gain),
                ln1_bias: leaf(&l.ln1_bias),
                wq: leaf(&l.wq),
                wk: leaf(&l.wk),
                wv: leaf(&l.wv),
                wo: leaf(&l.wo),
                ln2_gain: leaf(&l.ln2_gain),
                ln2_bias: leaf(&l.ln2_bias),
                w1: leaf(&l.w1),
                b1: leaf(&l.b1),
                w2: leaf(&l.w2),
                b2: leaf(&l.b2),
            })
            .collect();
        WeightVars {
            tok_emb,
            pos_emb,
            layers,
            lnf_gain: leaf(&self.lnf_gain),
            lnf_bias: leaf(&self.lnf_bias),
            head: leaf(&self.head),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct WeightVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_gain: Var,
    pub lnf_bias: Var,
    pub head: Var,
}

impl WeightVars {
    /// Handles in [`BaseWeights::named_tensors`] order.
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([
                l.ln1_gain, l.ln1_bias, l.wq, l.wk, l.wv, l.wo, l.ln2_gain, l.ln2_bias, l.w1,
                l.b1, l.w2, l.b2,
            ]);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.head]);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl AdapterTarget {
    pub fn name(&self) -> String {
        let p = match self.projection {
            Projection::Query => "query",
            Projection::Value => "value",
        };
        format!("layer{}.{p}", self.layer)
    }
}

/// Low-rank update `α·B·A` for one `[d_out × d_in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    /// `[r × d_in]`
    pub a: Tensor,
    /// `[d_out × r]`
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub target: AdapterTarget,
}

impl LoraAdapter {
    /// `B = 0`, `A` i.i.d. uniform on `[-1/√d_in, 1/√d_in]`.
    pub fn init(
        target: AdapterTarget,
        d_out: usize,
        d_in: usize,
        rank: usize,
        alpha: f64,
        r: &mut impl Rng,
    ) -> Result<Self> {
        if rank == 0 || rank >= d_out.min(d_in) {
            return Err(Error::Rank {
                rank,
                d_out,
                d_in,
            });
        }
        let bound = 1.0 / (d_in as f64).sqrt();
        let a = Tensor::new(
            vec![rank, d_in],
            (0..rank * d_in)
                .map(|_| r.random_range(-bound..=bound))
                .collect(),
        )?;
        Ok(Self {
            a,
            b: Tensor::zeros(&[d_out, rank]),
            rank,
            alpha,
            target,
        })
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    /// `B·A`, without the scale.
    pub fn product(&self) -> Result<Tensor> {
        self.b.matmul(&self.a)
    }

    pub fn param_count(&self) -> usize {
        adapter_param_count(self.rank, self.d_in(), self.d_out())
    }
}

/// Trainable parameters of one rank-`r` adapter on a `d_in → d_out` map.
///
/// ```
/// use uq_core::model::adapter_param_count;
/// // 32 layers, r = 8, query 4096→4096 and value 4096→1024.
/// let per_layer = adapter_param_count(8, 4096, 4096) + adapter_param_count(8, 4096, 1024);
/// assert_eq!(32 * per_layer, 3_407_872);
/// ```
pub fn adapter_param_count(rank: usize, d_in: usize, d_out: usize) -> usize {
    rank * (d_in + d_out)
}

/// `W + α·B·A`; `w` is left untouched.
pub fn effective_weight(w: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    let delta = adapter.product()?;
    if delta.shape() != w.shape() {
        return Err(Error::Dimension {
            op: "effective_weight",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    Ok(w.zip_with(&delta, "effective_weight", |wv, dv| wv + adapter.alpha * dv)
        .expect("shapes checked"))
}

#[derive(Debug, Clone, Copy)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub alpha: f64,
}

/// Adapter handles per layer, `(query, value)`.
pub type LayerAdapters = Vec<(Option<AdapterVars>, Option<AdapterVars>)>;

pub fn adapters_on_tape(
    tape: &mut Tape,
    adapters: &[LoraAdapter],
    num_layers: usize,
    trainable: bool,
) -> Result<(LayerAdapters, Vec<(Var, Var)>)> {
    let mut per_layer: LayerAdapters = vec![(None, None); num_layers];
    let mut handles = Vec::with_capacity(adapters.len());
    for ad in adapters {
        let (a, b) = if trainable {
            (tape.param(ad.a.clone()), tape.param(ad.b.clone()))
        } else {
            (tape.constant(ad.a.clone()), tape.constant(ad.b.clone()))
        };
        handles.push((a, b));
        let slot = per_layer.get_mut(ad.target.layer).ok_or_else(|| {
            Error::Config(format!("adapter targets missing layer {}", ad.target.layer))
        })?;
        let vars = Some(AdapterVars {
            a,
            b,
            alpha: ad.alpha,
        });
        match ad.target.projection {
            Projection::Query => slot.0 = vars,
            Projection::Value => slot.1 = vars,
        }
    }
    Ok((per_layer, handles))
}

/// Token sequences flattened into one row block.
#[derive(Debug, Clone)]
pub struct Batch {
    tokens: Vec<usize>,
    positions: Vec<usize>,
    /// `(row offset, length)` of each sequence.
    seqs: Vec<(usize, usize)>,
}

impl Batch {
    pub fn new(config: &ModelConfig, sequences: &[&[usize]]) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut positions = Vec::new();
        let mut seqs = Vec::with_capacity(sequences.len());
        for s in sequences {
            if s.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if s.len() > config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence of length {} exceeds max_seq_len {}",
                    s.len(),
                    config.max_seq_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "token {t} out of range for vocab size {}",
                    config.vocab_size
                )));
            }
            seqs.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Ok(Self {
            tokens,
            positions,
            seqs,
        })
    }

    pub fn num_rows(&self) -> usize {
        self.tokens.len()
    }

    /// Row of the last token of each sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.seqs.iter().map(|&(o, n)| o + n - 1).collect()
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.tokens.len()).collect()
    }

    fn span(&self, row: usize) -> KeySpan {
        // Rows are grouped by sequence, so the owning sequence is the last
        // one starting at or before `row`.
        let idx = self.seqs.partition_point(|&(o, _)| o <= row) - 1;
        let (start, _) = self.seqs[idx];
        KeySpan {
            start,
            len: row - start + 1,
        }
    }
}

fn project(tape: &mut Tape, x: Var, w: Var, adapter: Option<AdapterVars>) -> Result<Var> {
    let base = tape.linear(x, w)?;
    match adapter {
        None => Ok(base),
        Some(ad) => {
            let down = tape.linear(x, ad.a)?;
            let up = tape.linear(down, ad.b)?;
            let up = tape.scale(up, ad.alpha);
            tape.add(base, up)
        }
    }
}

/// Logits `[rows.len() × V]` for the requested rows of `batch`.
///
/// All layers but the last run on every row; the last layer only computes
/// queries, attention and MLP for the requested rows, since nothing else
/// reaches the output.
pub fn forward_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    w: &WeightVars,
    adapters: &LayerAdapters,
    batch: &Batch,
    rows: &[usize],
) -> Result<Var> {
    if let Some(&r) = rows.iter().find(|&&r| r >= batch.num_rows()) {
        return Err(Error::Input(format!("output row {r} out of range")));
    }
    let heads = config.num_heads;
    let tok = tape.gather_rows(w.tok_emb, &batch.tokens)?;
    let pos = tape.gather_rows(w.pos_emb, &batch.positions)?;
    let mut x = tape.add(tok, pos)?;
    let all_spans: Vec<KeySpan> = (0..batch.num_rows()).map(|r| batch.span(r)).collect();

    let last = w.layers.len() - 1;
    for (l, lw) in w.layers.iter().enumerate() {
        let (ad_q, ad_v) = adapters.get(l).copied().unwrap_or((None, None));
        let h = tape.layer_norm(x, lw.ln1_gain, lw.ln1_bias, LN_EPS)?;
        let k = tape.linear(h, lw.wk)?;
        let v = project(tape, h, lw.wv, ad_v)?;
        let (h_q, x_res, spans) = if l == last {
            (
                tape.gather_rows(h, rows)?,
                tape.gather_rows(x, rows)?,
                rows.iter().map(|&r| all_spans[r]).collect(),
            )
        } else {
            (h, x, all_spans.clone())
        };
        let q = project(tape, h_q, lw.wq, ad_q)?;
        let att = tape.attention(q, k, v, heads, spans)?;
        let att = tape.linear(att, lw.wo)?;
        x = tape.add(x_res, att)?;

        let h2 = tape.layer_norm(x, lw.ln2_gain, lw.ln2_bias, LN_EPS)?;
        let m = tape.linear(h2, lw.w1)?;
        let m = tape.add_row(m, lw.b1)?;
        let m = tape.gelu(m);
        let m = tape.linear(m, lw.w2)?;
        let m = tape.add_row(m, lw.b2)?;
        x = tape.add(x, m)?;
    }
    let h = tape.layer_norm(x, w.lnf_gain, w.lnf_bias, LN_EPS)?;
    tape.matmul(h, w.head)
}

/// Full `[T × V]` logits of one sequence, no gradient bookkeeping.
pub fn logits(base: &BaseWeights, adapters: &[LoraAdapter], tokens: &[usize]) -> Result<Tensor> {
    let batch = Batch::new(&base.config, &[tokens])?;
    let rows = batch.all_rows();
    logits_for_rows(base, adapters, &batch, &rows)
}

pub fn logits_for_rows(
    base: &BaseWeights,
    adapters: &[LoraAdapter],
    batch: &Batch,
    rows: &[usize],
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = base.on_tape(&mut tape, false);
    let (per_layer, _) = adapters_on_tape(&mut tape, adapters, base.config.num_layers, false)?;
    let out = forward_graph(&mut tape, &base.config, &w, &per_layer, batch, rows)?;
    Ok(tape.value(out).clone())
}

/// One ensemble member: shared frozen base plus its own adapters.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub base: Arc<BaseWeights>,
    pub adapters: Vec<LoraAdapter>,
    pub seed: u64,
}

/// Fresh member with adapters on every layer's query and value projections.
pub fn init_member(base: Arc<BaseWeights>, rank: usize, alpha: f64, seed: u64) -> Result<EnsembleMember> {
    let cfg = &base.config;
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut r = rng(derive_seed_str(seed, "lora-init"));
    let mut adapters = Vec::with_capacity(2 * cfg.num_layers);
    for layer in 0..cfg.num_layers {
        for projection in [Projection::Query, Projection::Value] {
            adapters.push(LoraAdapter::init(
                AdapterTarget { layer, projection },
                d,
                d,
                rank,
                alpha,
                &mut r,
            )?);
        }
    }
    Ok(EnsembleMember {
        base,
        adapters,
        seed,
    })
}

impl EnsembleMember {
    pub fn forward(&self, tokens: &[usize]) -> Result<Tensor> {
        logits(&self.base, &self.adapters, tokens)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.adapters.iter().map(LoraAdapter::param_count).sum()
    }

    /// Adapted weight for `target`.
    pub fn effective_weight(&self, target: AdapterTarget) -> Result<Tensor> {
        let layer = &self.base.layers[target.layer];
        let w = match target.projection {
            Projection::Query => &layer.wq,
            Projection::Value => &layer.wv,
        };
        match self.adapters.iter().find(|a| a.target == target) {
            Some(ad) => effective_weight(w, ad),
            None => Ok(w.clone()),
        }
    }

    pub fn adapter_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.adapters.len() * 2);
        for ad in &self.adapters {
            out.push((format!("{}.A", ad.target.name()), &ad.a));
            out.push((format!("{}.B", ad.target.name()), &ad.b));
        }
        out
    }

    pub fn adapter_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(self.adapters.len() * 2);
        for ad in &mut self.adapters {
            out.push(&mut ad.a);
            out.push(&mut ad.b);
        }
        out
    }
}
