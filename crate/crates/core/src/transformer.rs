//! Decoder-only transformer over code grids with one prediction head per
//! quantization depth.
//!
//! A grid of `L = h * w` positions becomes the sequence
//! `[condition, fuse(pos 0), ..., fuse(pos L-2)]`, where `fuse` sums the
//! shared input embeddings of a position's `d` codes. Output `t` predicts
//! every depth of position `t`. Blocks are pre-norm (RMSNorm) with causal
//! self-attention, optional rotary positions and a SwiGLU feed-forward.
//!
//! Head `i` reads the hidden state after layer `O_i`. In the `dnd` variant
//! the embedding of the depth-`i` code is projected and added to the hidden
//! state right after layer `O_i`, so deeper heads see shallower outcomes.

use std::fmt::Write as _;
use std::path::Path;

use dnd_autograd::ops::{rms_norm_row, rope_row, softmax_into};
use dnd_autograd::{clip_grad_norm, gemm, Adam, AdamConfig, MatRef, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodeGrid;
use crate::error::{invalid, io_at, Error, Result};
use crate::persist::{Checkpoint, NamedArray};

pub const CHECKPOINT_KIND: &str = "transformer";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Codebook size `N`.
    pub vocab: usize,
    /// Condition classes `K`; zero for an unconditional model.
    pub classes: usize,
    /// Longest sequence a session or batch may hold.
    pub max_seq_len: usize,
    /// Rotary positions; learned absolute positions otherwise.
    pub rope: bool,
    /// Feed-forward width; zero selects `8 * hidden / 3` rounded up to a
    /// multiple of 8.
    pub ffn_hidden: usize,
    pub norm_eps: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            hidden: 128,
            heads: 4,
            dropout: 0.1,
            vocab: 128,
            classes: 8,
            max_seq_len: 65,
            rope: true,
            ffn_hidden: 0,
            norm_eps: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.heads == 0 || self.max_seq_len == 0 {
            return Err(invalid("layers, hidden, heads and max_seq_len must be positive"));
        }
        if self.hidden % self.heads != 0 {
            return Err(invalid(format!("hidden {} is not divisible by {} heads", self.hidden, self.heads)));
        }
        if self.rope && self.head_dim() % 2 != 0 {
            return Err(invalid("rotary positions need an even head dimension"));
        }
        if self.vocab < 2 {
            return Err(invalid("vocab must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        if self.ffn_hidden > 0 {
            self.ffn_hidden
        } else {
            (8 * self.hidden).div_ceil(3).div_ceil(8) * 8
        }
    }

    /// Row of the condition table used for "no condition".
    pub fn null_condition(&self) -> usize {
        self.classes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Single head at the final layer, `d = 1`.
    OneDim,
    /// Every head reads the final layer.
    Parallel,
    /// Head `i` reads layer `O_i`.
    Vertical,
    /// Vertical plus injection of each depth's code before deeper heads.
    Dnd,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_dim" => Ok(Variant::OneDim),
            "parallel" => Ok(Variant::Parallel),
            "vertical" => Ok(Variant::Vertical),
            "dnd" => Ok(Variant::Dnd),
            other => Err(invalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// 1-based layer indices `O_1 < ... < O_d` hosting the depth heads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadPlacement {
    pub variant: Variant,
    pub layers: Vec<usize>,
}

impl HeadPlacement {
    pub fn new(variant: Variant, layers: Vec<usize>) -> Self {
        Self { variant, layers }
    }

    /// Placement from [`default_placement`].
    pub fn default_for(variant: Variant, layer_count: usize, depth: usize) -> Result<Self> {
        Ok(Self { variant, layers: default_placement(layer_count, depth)? })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self, layer_count: usize) -> Result<()> {
        let d = self.depth();
        if d == 0 {
            return Err(invalid("placement needs at least one head"));
        }
        if self.variant == Variant::OneDim && d != 1 {
            return Err(invalid(format!("one_dim variant takes exactly one head, got {d}")));
        }
        if self.layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("head layers {:?} are not strictly increasing", self.layers)));
        }
        if self.layers[0] < 1 || *self.layers.last().unwrap() != layer_count {
            return Err(invalid(format!(
                "head layers {:?} must lie in [1, {layer_count}] and end at the final layer",
                self.layers
            )));
        }
        Ok(())
    }

    /// Layer whose output head `i` (0-based) reads.
    pub fn head_layer(&self, i: usize) -> usize {
        match self.variant {
            Variant::Parallel | Variant::OneDim => *self.layers.last().unwrap(),
            Variant::Vertical | Variant::Dnd => self.layers[i],
        }
    }

    pub fn injects(&self) -> bool {
        self.variant == Variant::Dnd
    }
}

/// Final layer hosts the deepest head; the others sit below it at a fixed
/// gap `max(ceil(L/16), ceil(3L / (16 (d-1))))`, which keeps the heads of a
/// 48-layer model inside its top quarter.
pub fn default_placement(layer_count: usize, depth: usize) -> Result<Vec<usize>> {
    if layer_count == 0 || depth == 0 {
        return Err(invalid("layer count and depth must be positive"));
    }
    if depth == 1 {
        return Ok(vec![layer_count]);
    }
    let gap = layer_count.div_ceil(16).max((3 * layer_count).div_ceil(16 * (depth - 1)));
    let span = gap * (depth - 1);
    if span >= layer_count {
        return Err(invalid(format!("{depth} heads do not fit below layer {layer_count}")));
    }
    Ok((0..depth).map(|i| layer_count - span + i * gap).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate per 256 sequences; scaled linearly by the batch size.
    pub base_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Probability of replacing a sample's condition with the null token.
    pub cond_dropout: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.05,
            grad_clip: 1.0,
            cond_dropout: 0.1,
            epochs: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("base_lr, batch_size and epochs must be positive"));
        }
        for (name, p) in [("beta1", self.beta1), ("beta2", self.beta2), ("cond_dropout", self.cond_dropout)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(invalid("weight_decay must be >= 0 and grad_clip > 0"));
        }
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / 256.0
    }
}

/// Parameters: backbone first, then heads and injection projections, so a
/// fixed seed gives the same backbone for every depth and variant.
pub fn init_params<T: Scalar, R: Rng>(config: &BackboneConfig, placement: &HeadPlacement, rng: &mut R) -> ParamStore<T> {
    let mut ps = ParamStore::new();
    let (h, f) = (config.hidden, config.ffn_dim());
    let std = 0.02;
    let resid_std = std / (2.0 * config.layers as f64).sqrt();
    let ones = |n: usize| Tensor::full([n], T::one());
    ps.add_normal("tok_embed", &[config.vocab, h], std, rng);
    ps.add_normal("cond_embed", &[config.classes + 1, h], std, rng);
    if !config.rope {
        ps.add_normal("pos_embed", &[config.max_seq_len, h], std, rng);
    }
    for l in 1..=config.layers {
        ps.add_no_decay(format!("l{l}.attn_norm"), ones(h));
        for w in ["wq", "wk", "wv"] {
            ps.add_normal(format!("l{l}.{w}"), &[h, h], std, rng);
        }
        ps.add_normal(format!("l{l}.wo"), &[h, h], resid_std, rng);
        ps.add_no_decay(format!("l{l}.ffn_norm"), ones(h));
        ps.add_normal(format!("l{l}.w1"), &[h, f], std, rng);
        ps.add_normal(format!("l{l}.w3"), &[h, f], std, rng);
        ps.add_normal(format!("l{l}.w2"), &[f, h], resid_std, rng);
    }
    for i in 0..placement.depth() {
        ps.add_no_decay(format!("head{i}.norm"), ones(h));
        ps.add_normal(format!("head{i}.w"), &[h, config.vocab], std, rng);
    }
    if placement.injects() {
        for i in 0..placement.depth() - 1 {
            ps.add_normal(format!("inj{i}.w"), &[h, h], std, rng);
        }
    }
    ps
}

fn is_backbone(name: &str) -> bool {
    !(name.starts_with("head") || name.starts_with("inj"))
}

/// Parameter ids of one block, resolved once.
#[derive(Debug, Clone, Copy)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w1: ParamId,
    w3: ParamId,
    w2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    tok_embed: ParamId,
    cond_embed: ParamId,
    pos_embed: Option<ParamId>,
    layers: Vec<LayerIds>,
    head_norm: Vec<ParamId>,
    head_w: Vec<ParamId>,
    inj: Vec<ParamId>,
}

impl Ids {
    fn resolve<T: Scalar>(ps: &ParamStore<T>, config: &BackboneConfig, depth: usize, injects: bool) -> Result<Self> {
        let get = |n: &str| ps.id(n).ok_or_else(|| Error::Format(format!("missing parameter {n}")));
        let layers = (1..=config.layers)
            .map(|l| {
                Ok(LayerIds {
                    attn_norm: get(&format!("l{l}.attn_norm"))?,
                    wq: get(&format!("l{l}.wq"))?,
                    wk: get(&format!("l{l}.wk"))?,
                    wv: get(&format!("l{l}.wv"))?,
                    wo: get(&format!("l{l}.wo"))?,
                    ffn_norm: get(&format!("l{l}.ffn_norm"))?,
                    w1: get(&format!("l{l}.w1"))?,
                    w3: get(&format!("l{l}.w3"))?,
                    w2: get(&format!("l{l}.w2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_embed: get("tok_embed")?,
            cond_embed: get("cond_embed")?,
            pos_embed: if config.rope { None } else { Some(get("pos_embed")?) },
            layers,
            head_norm: (0..depth).map(|i| get(&format!("head{i}.norm"))).collect::<Result<_>>()?,
            head_w: (0..depth).map(|i| get(&format!("head{i}.w"))).collect::<Result<_>>()?,
            inj: if injects {
                (0..depth - 1).map(|i| get(&format!("inj{i}.w"))).collect::<Result<_>>()?
            } else {
                Vec::new()
            },
        })
    }
}

/// Backbone, heads and placement.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: BackboneConfig,
    pub placement: HeadPlacement,
    pub params: ParamStore<f32>,
}

/// Tape handles produced by [`forward_on_tape`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// Per-depth logits, `[B * L, N]`.
    pub logits: Vec<Var>,
    /// Per-depth mean cross-entropy.
    pub losses: Vec<Var>,
    /// Mean of `losses`.
    pub total: Var,
}

/// Values of one teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Per-depth logits, `[B * L, N]` with row `b * L + t`.
    pub logits: Vec<Tensor<f32>>,
    pub losses: Vec<f64>,
    pub total: f64,
}

fn check_batch(config: &BackboneConfig, depth: usize, grids: &[CodeGrid], conditions: &[Option<u32>]) -> Result<usize> {
    let first = grids.first().ok_or_else(|| invalid("empty batch"))?;
    if grids.len() != conditions.len() {
        return Err(invalid("one condition per grid is required"));
    }
    let l = first.positions();
    if l > config.max_seq_len {
        return Err(invalid(format!("{l} positions exceed max_seq_len {}", config.max_seq_len)));
    }
    for g in grids {
        if g.depth != depth {
            return Err(invalid(format!("grid depth {} does not match {depth} heads", g.depth)));
        }
        if g.positions() != l {
            return Err(Error::ShapeMismatch("grids in a batch differ in size".into()));
        }
        if g.vocab != config.vocab {
            return Err(Error::ShapeMismatch(format!("grid vocab {} vs model vocab {}", g.vocab, config.vocab)));
        }
    }
    for c in conditions.iter().flatten() {
        if *c as usize >= config.classes {
            return Err(invalid(format!("condition {c} out of range for {} classes", config.classes)));
        }
    }
    Ok(l)
}

fn dropout<T: Scalar>(tape: &mut Tape<T>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
    let Some(rng) = rng else { return x };
    if p <= 0.0 {
        return x;
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let shape = tape.shape(x).to_vec();
    let n = shape.iter().product();
    let mask = (0..n).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
    tape.mul_const(x, &Tensor::new(shape, mask))
}

/// Teacher-forced pass over a batch. `conditions[b] = None` selects the
/// null token. With `rng`, dropout masks are drawn from it.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    config: &BackboneConfig,
    placement: &HeadPlacement,
    grids: &[CodeGrid],
    conditions: &[Option<u32>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardVars> {
    let d = placement.depth();
    let l = check_batch(config, d, grids, conditions)?;
    let b = grids.len();
    let ids = Ids::resolve(params, config, d, placement.injects())?;
    let p = |tape: &mut Tape<T>, id: ParamId| tape.param(params, id);

    let tok = p(tape, ids.tok_embed);
    let cond_table = p(tape, ids.cond_embed);
    let cond_idx: Vec<u32> =
        conditions.iter().map(|c| c.unwrap_or(config.null_condition() as u32)).collect();
    let first = tape.embed_sum(cond_table, &cond_idx, 1);
    let mut x = if l > 1 {
        let mut idx = Vec::with_capacity(b * (l - 1) * d);
        for g in grids {
            idx.extend_from_slice(&g.codes[..(l - 1) * d]);
        }
        let rest = tape.embed_sum(tok, &idx, d);
        tape.prepend_rows(first, rest, l)
    } else {
        first
    };
    if let Some(pos) = ids.pos_embed {
        let table = p(tape, pos);
        let idx: Vec<u32> = (0..b).flat_map(|_| 0..l as u32).collect();
        let pe = tape.embed_sum(table, &idx, 1);
        x = tape.add(x, pe);
    }
    x = dropout(tape, x, config.dropout, rng.as_deref_mut());

    let targets: Vec<Vec<u32>> = (0..d)
        .map(|i| grids.iter().flat_map(|g| (0..l).map(move |t| g.code(t, i))).collect())
        .collect();
    let mut hidden: Vec<Option<Var>> = vec![None; d];
    for (li, lid) in ids.layers.iter().enumerate() {
        let layer = li + 1;
        let n = {
            let g = p(tape, lid.attn_norm);
            tape.rms_norm(x, g, config.norm_eps)
        };
        let (wq, wk, wv, wo) = (p(tape, lid.wq), p(tape, lid.wk), p(tape, lid.wv), p(tape, lid.wo));
        let mut q = tape.matmul(n, wq);
        let mut k = tape.matmul(n, wk);
        let v = tape.matmul(n, wv);
        if config.rope {
            q = tape.rope(q, l, config.head_dim());
            k = tape.rope(k, l, config.head_dim());
        }
        let a = tape.causal_attention(q, k, v, l, config.heads);
        let a = tape.matmul(a, wo);
        let a = dropout(tape, a, config.dropout, rng.as_deref_mut());
        x = tape.add(x, a);

        let n = {
            let g = p(tape, lid.ffn_norm);
            tape.rms_norm(x, g, config.norm_eps)
        };
        let (w1, w3, w2) = (p(tape, lid.w1), p(tape, lid.w3), p(tape, lid.w2));
        let gate = tape.matmul(n, w1);
        let gate = tape.silu(gate);
        let up = tape.matmul(n, w3);
        let hmid = tape.mul(gate, up);
        let f = tape.matmul(hmid, w2);
        let f = dropout(tape, f, config.dropout, rng.as_deref_mut());
        x = tape.add(x, f);

        for i in 0..d {
            if placement.head_layer(i) == layer {
                hidden[i] = Some(x);
            }
        }
        if placement.injects() {
            if let Some(i) = placement.layers[..d - 1].iter().position(|&o| o == layer) {
                let e = tape.embed_sum(tok, &targets[i], 1);
                let w = p(tape, ids.inj[i]);
                let inj = tape.matmul(e, w);
                x = tape.add(x, inj);
            }
        }
    }

    let mut logits = Vec::with_capacity(d);
    let mut losses = Vec::with_capacity(d);
    for i in 0..d {
        let hs = hidden[i].expect("every head layer is visited");
        let g = p(tape, ids.head_norm[i]);
        let n = tape.rms_norm(hs, g, config.norm_eps);
        let w = p(tape, ids.head_w[i]);
        let lg = tape.matmul(n, w);
        losses.push(tape.cross_entropy(lg, &targets[i]));
        logits.push(lg);
    }
    let total = tape.weighted_sum(&losses, &vec![T::lit(1.0 / d as f64); d]);
    Ok(ForwardVars { logits, losses, total })
}

impl Transformer {
    pub fn init(config: BackboneConfig, placement: HeadPlacement, seed: u64) -> Result<Self> {
        config.validate()?;
        placement.validate(config.layers)?;
        let params = init_params(&config, &placement, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { config, placement, params })
    }

    pub fn depth(&self) -> usize {
        self.placement.depth()
    }

    /// Parameters outside the heads and injection projections.
    pub fn backbone_param_count(&self) -> usize {
        self.params.numel_where(is_backbone)
    }

    /// Teacher-forced pass without dropout.
    pub fn forward_train(&self, grids: &[CodeGrid], conditions: &[Option<u32>]) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let vars = forward_on_tape(&mut tape, &self.params, &self.config, &self.placement, grids, conditions, None)?;
        Ok(ForwardOutput {
            logits: vars.logits.iter().map(|&v| tape.value(v).clone()).collect(),
            losses: vars.losses.iter().map(|&v| tape.value(v).item() as f64).collect(),
            total: tape.value(vars.total).item() as f64,
        })
    }

    /// Per-depth mean cross-entropy over a dataset, without dropout.
    pub fn evaluate(&self, grids: &[CodeGrid], conditions: &[Option<u32>], batch: usize) -> Result<Vec<f64>> {
        if grids.is_empty() || batch == 0 {
            return Err(invalid("evaluation needs data and a positive batch size"));
        }
        let mut sums = vec![0.0; self.depth()];
        for (g, c) in grids.chunks(batch).zip(conditions.chunks(batch)) {
            let out = self.forward_train(g, c)?;
            for (s, l) in sums.iter_mut().zip(&out.losses) {
                *s += l * g.len() as f64;
            }
        }
        Ok(sums.into_iter().map(|s| s / grids.len() as f64).collect())
    }

    pub fn session(&self) -> Result<Session<'_, f32>> {
        Session::new(&self.params, &self.config, &self.placement)
    }

    pub fn to_checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "backbone": self.config,
            "placement": self.placement,
            "train": train,
        });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config);
        for p in self.params.params() {
            ck.push(NamedArray::new(p.name.clone(), p.value.shape.clone(), p.value.data.clone())?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let parse = |key: &str| ck.config[key].clone();
        let config: BackboneConfig =
            serde_json::from_value(parse("backbone")).map_err(|e| Error::Format(format!("backbone config: {e}")))?;
        let placement: HeadPlacement =
            serde_json::from_value(parse("placement")).map_err(|e| Error::Format(format!("placement: {e}")))?;
        let mut model = Self::init(config, placement, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.get(id).name.clone();
            let arr = ck.require(&name)?;
            let value = model.params.value_mut(id);
            if arr.shape != value.shape {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", arr.shape, value.shape)));
            }
            value.data.copy_from_slice(&arr.data);
        }
        if ck.arrays.len() != model.params.len() {
            return Err(Error::Format("checkpoint holds arrays the model does not use".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        self.to_checkpoint(train)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Input token of one session step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepInput<'a> {
    /// Sequence start: class id or the null token.
    Condition(Option<u32>),
    /// The `d` codes of the previous position, summed into one embedding.
    Codes(&'a [u32]),
}

/// Incremental decoding state with per-layer key/value memory.
///
/// Each [`Session::begin`] starts one backbone pass for a new position;
/// layers are then evaluated lazily as heads are queried, so `dnd`
/// injections can be interleaved between heads.
#[derive(Debug)]
pub struct Session<'m, T: Scalar> {
    params: &'m ParamStore<T>,
    config: BackboneConfig,
    placement: HeadPlacement,
    ids: Ids,
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
    len: usize,
    hidden: Vec<T>,
    layers_done: usize,
    active: bool,
    injected: Vec<bool>,
    passes: usize,
}

fn vecmat<T: Scalar>(x: &[T], w: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut out = vec![T::zero(); n];
    gemm(x, MatRef::new(1, k), &w.data, MatRef::new(k, n), &mut out, T::zero());
    out
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn new(params: &'m ParamStore<T>, config: &BackboneConfig, placement: &HeadPlacement) -> Result<Self> {
        config.validate()?;
        placement.validate(config.layers)?;
        let ids = Ids::resolve(params, config, placement.depth(), placement.injects())?;
        Ok(Self {
            params,
            config: *config,
            placement: placement.clone(),
            ids,
            keys: vec![Vec::new(); config.layers],
            values: vec![Vec::new(); config.layers],
            len: 0,
            hidden: Vec::new(),
            layers_done: 0,
            active: false,
            injected: vec![false; placement.depth()],
            passes: 0,
        })
    }

    /// Positions fed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Backbone passes started.
    pub fn passes(&self) -> usize {
        self.passes
    }

    pub fn depth(&self) -> usize {
        self.placement.depth()
    }

    pub fn placement(&self) -> &HeadPlacement {
        &self.placement
    }

    /// Appends one position. A previous position still in flight is
    /// completed first.
    pub fn begin(&mut self, input: StepInput<'_>) -> Result<()> {
        if self.active {
            self.finish()?;
        }
        if self.len >= self.config.max_seq_len {
            return Err(invalid(format!("session is full at {} positions", self.config.max_seq_len)));
        }
        let h = self.config.hidden;
        let mut x = vec![T::zero(); h];
        match input {
            StepInput::Condition(c) => {
                let row = match c {
                    Some(c) if (c as usize) < self.config.classes => c as usize,
                    Some(c) => return Err(invalid(format!("condition {c} out of range"))),
                    None => self.config.null_condition(),
                };
                x.copy_from_slice(&self.params.value(self.ids.cond_embed).data[row * h..(row + 1) * h]);
            }
            StepInput::Codes(codes) => {
                if codes.len() != self.depth() {
                    return Err(invalid(format!("expected {} codes, got {}", self.depth(), codes.len())));
                }
                let table = &self.params.value(self.ids.tok_embed).data;
                for &q in codes {
                    if q as usize >= self.config.vocab {
                        return Err(Error::IndexOutOfRange { index: q, size: self.config.vocab });
                    }
                    let row = &table[q as usize * h..(q as usize + 1) * h];
                    x.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
                }
            }
        }
        if let Some(pos) = self.ids.pos_embed {
            let row = &self.params.value(pos).data[self.len * h..(self.len + 1) * h];
            x.iter_mut().zip(row).for_each(|(a, b)| *a = *a + *b);
        }
        self.hidden = x;
        self.len += 1;
        self.layers_done = 0;
        self.active = true;
        self.injected.iter_mut().for_each(|f| *f = false);
        self.passes += 1;
        Ok(())
    }

    fn run_layer(&mut self) {
        let li = self.layers_done;
        let lid = self.ids.layers[li];
        let c = &self.config;
        let (h, dh, eps) = (c.hidden, c.head_dim(), T::lit(c.norm_eps));
        let pos = self.len - 1;
        let mut n = vec![T::zero(); h];
        rms_norm_row(&self.hidden, &self.params.value(lid.attn_norm).data, eps, &mut n);
        let mut q = vecmat(&n, self.params.value(lid.wq));
        let mut k = vecmat(&n, self.params.value(lid.wk));
        let v = vecmat(&n, self.params.value(lid.wv));
        if c.rope {
            rope_row(&mut q, pos, dh, false);
            rope_row(&mut k, pos, dh, false);
        }
        self.keys[li].extend_from_slice(&k);
        self.values[li].extend_from_slice(&v);
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut att = vec![T::zero(); h];
        let mut scores = vec![T::zero(); pos + 1];
        let mut probs = vec![T::zero(); pos + 1];
        for head in 0..c.heads {
            let r = head * dh..(head + 1) * dh;
            for (t, s) in scores.iter_mut().enumerate() {
                let kt = &self.keys[li][t * h..(t + 1) * h][r.clone()];
                *s = q[r.clone()].iter().zip(kt).map(|(a, b)| *a * *b).sum::<T>() * scale;
            }
            softmax_into(&scores, &mut probs);
            for (t, pt) in probs.iter().enumerate() {
                let vt = &self.values[li][t * h..(t + 1) * h][r.clone()];
                att[r.clone()].iter_mut().zip(vt).for_each(|(o, x)| *o = *o + *pt * *x);
            }
        }
        let a = vecmat(&att, self.params.value(lid.wo));
        self.hidden.iter_mut().zip(&a).for_each(|(x, y)| *x = *x + *y);
        rms_norm_row(&self.hidden, &self.params.value(lid.ffn_norm).data, eps, &mut n);
        let gate = vecmat(&n, self.params.value(lid.w1));
        let up = vecmat(&n, self.params.value(lid.w3));
        let mid: Vec<T> = gate
            .iter()
            .zip(&up)
            .map(|(g, u)| *g / (T::one() + (-*g).exp()) * *u)
            .collect();
        let f = vecmat(&mid, self.params.value(lid.w2));
        self.hidden.iter_mut().zip(&f).for_each(|(x, y)| *x = *x + *y);
        self.layers_done += 1;
    }

    fn advance_to(&mut self, layer: usize) -> Result<()> {
        if !self.active {
            return Err(invalid("no position in flight; call begin first"));
        }
        if self.layers_done > layer {
            return Err(invalid(format!("layer {layer} already passed for this position")));
        }
        while self.layers_done < layer {
            // a skipped injection would silently change the model
            if self.placement.injects() {
                if let Some(i) = self.placement.layers[..self.depth() - 1].iter().position(|&o| o == self.layers_done) {
                    if self.layers_done > 0 && !self.injected[i] {
                        return Err(invalid(format!("depth {} code must be injected before continuing", i + 1)));
                    }
                }
            }
            self.run_layer();
        }
        Ok(())
    }

    /// Logits of head `i` for the current position.
    pub fn head_logits(&mut self, i: usize) -> Result<Vec<T>> {
        if i >= self.depth() {
            return Err(invalid(format!("head {i} out of range")));
        }
        if self.placement.injects() && self.injected[i] {
            return Err(invalid(format!("head {i} was already injected")));
        }
        self.advance_to(self.placement.head_layer(i))?;
        Ok(head_logits(self.params, &self.ids, &self.config, i, &self.hidden))
    }

    /// Adds the projected embedding of the sampled depth-`i` code. Only the
    /// `dnd` variant injects; heads other than the last must be injected
    /// before the session moves past their layer.
    pub fn inject(&mut self, i: usize, code: u32) -> Result<()> {
        if !self.placement.injects() {
            return Err(invalid(format!("{:?} variant has no injection", self.placement.variant)));
        }
        if i + 1 >= self.depth() {
            return Err(invalid(format!("head {i} has no injection projection")));
        }
        if code as usize >= self.config.vocab {
            return Err(Error::IndexOutOfRange { index: code, size: self.config.vocab });
        }
        if self.injected[i] {
            return Err(invalid(format!("head {i} already injected")));
        }
        self.advance_to(self.placement.layers[i])?;
        let h = self.config.hidden;
        let e = &self.params.value(self.ids.tok_embed).data[code as usize * h..(code as usize + 1) * h];
        let add = vecmat(e, self.params.value(self.ids.inj[i]));
        self.hidden.iter_mut().zip(&add).for_each(|(x, y)| *x = *x + *y);
        self.injected[i] = true;
        Ok(())
    }

    /// Runs the remaining layers so the key/value memory covers this position.
    pub fn finish(&mut self) -> Result<()> {
        if self.active {
            self.advance_to(self.config.layers)?;
            self.active = false;
        }
        Ok(())
    }

    /// One full pass without injection: hidden states at `O_1..O_d`.
    pub fn forward_incremental(&mut self, input: StepInput<'_>) -> Result<Vec<Vec<T>>> {
        if self.placement.injects() && self.depth() > 1 {
            return Err(invalid("dnd sessions interleave heads and injections; use head_logits and inject"));
        }
        self.begin(input)?;
        let mut out = Vec::with_capacity(self.depth());
        for i in 0..self.depth() {
            self.advance_to(self.placement.head_layer(i))?;
            out.push(self.hidden.clone());
        }
        self.finish()?;
        Ok(out)
    }
}

/// Head `i` applied to a hidden state: RMSNorm then the `[H, N]` projection.
fn head_logits<T: Scalar>(params: &ParamStore<T>, ids: &Ids, config: &BackboneConfig, i: usize, hidden: &[T]) -> Vec<T> {
    let mut n = vec![T::zero(); hidden.len()];
    rms_norm_row(hidden, &params.value(ids.head_norm[i]).data, T::lit(config.norm_eps), &mut n);
    vecmat(&n, params.value(ids.head_w[i]))
}

/// One optimizer step of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss_total: f64,
    pub losses: Vec<f64>,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    /// CSV with columns `step, loss_total, loss_d1..loss_dD, grad_norm`.
    pub fn to_csv(&self) -> String {
        let depth = self.steps.first().map_or(0, |s| s.losses.len());
        let mut s = String::from("step,loss_total");
        for i in 1..=depth {
            write!(s, ",loss_d{i}").unwrap();
        }
        s.push_str(",grad_norm\n");
        for r in &self.steps {
            write!(s, "{},{}", r.step, r.loss_total).unwrap();
            for l in &r.losses {
                write!(s, ",{l}").unwrap();
            }
            writeln!(s, ",{}", r.grad_norm).unwrap();
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_at(path))
    }

    /// Mean per-depth loss over the steps of one epoch.
    pub fn epoch_means(&self, epoch: usize) -> Option<Vec<f64>> {
        let rows: Vec<&StepRecord> = self.steps.iter().filter(|s| s.epoch == epoch).collect();
        let first = rows.first()?;
        let mut sums = vec![0.0; first.losses.len()];
        for r in &rows {
            sums.iter_mut().zip(&r.losses).for_each(|(s, l)| *s += l);
        }
        Some(sums.into_iter().map(|s| s / rows.len() as f64).collect())
    }

    pub fn last_epoch(&self) -> Option<usize> {
        self.steps.last().map(|s| s.epoch)
    }
}

/// Trains `model` in place with AdamW, gradient clipping and condition
/// dropout. `on_epoch` receives the epoch number and its mean losses.
pub fn train_transformer(
    model: &mut Transformer,
    grids: &[CodeGrid],
    conditions: &[Option<u32>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &[f64]),
) -> Result<TrainLog> {
    config.validate()?;
    check_batch(&model.config, model.depth(), grids, conditions)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_A770);
    let adam_cfg = AdamConfig {
        lr: config.lr(),
        beta1: config.beta1,
        beta2: config.beta2,
        eps: 1e-8,
        weight_decay: config.weight_decay,
    };
    let mut adam = Adam::new(adam_cfg, &model.params);
    let mut order: Vec<usize> = (0..grids.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<CodeGrid> = chunk.iter().map(|&i| grids[i].clone()).collect();
            let conds: Vec<Option<u32>> = chunk
                .iter()
                .map(|&i| if rng.random::<f64>() < config.cond_dropout { None } else { conditions[i] })
                .collect();
            let mut tape = Tape::new();
            let vars = forward_on_tape(
                &mut tape,
                &model.params,
                &model.config,
                &model.placement,
                &batch,
                &conds,
                Some(&mut rng),
            )?;
            let total = tape.value(vars.total).item() as f64;
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: total });
            }
            tape.backward(vars.total).accumulate_into(&mut model.params);
            let grad_norm = clip_grad_norm(&mut model.params, config.grad_clip);
            if !grad_norm.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: total });
            }
            adam.step(&mut model.params);
            model.params.zero_grad();
            log.steps.push(StepRecord {
                step,
                epoch,
                loss_total: total,
                losses: vars.losses.iter().map(|&v| tape.value(v).item() as f64).collect(),
                grad_norm,
            });
            step += 1;
        }
        on_epoch(epoch, &log.epoch_means(epoch).expect("epoch has steps"));
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dnd_autograd::gradcheck::central_difference;

    fn config(rope: bool) -> BackboneConfig {
        BackboneConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            dropout: 0.0,
            vocab: 12,
            classes: 3,
            max_seq_len: 9,
            rope,
            ffn_hidden: 0,
            norm_eps: 1e-5,
        }
    }

    fn grids(n: usize, depth: usize, seed: u64) -> Vec<CodeGrid> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let codes = (0..9 * depth).map(|_| rng.random_range(0..12)).collect();
                CodeGrid::new(3, 3, depth, 12, codes).unwrap()
            })
            .collect()
    }

    #[test]
    fn placement_examples() {
        assert_eq!(default_placement(48, 2).unwrap(), vec![39, 48]);
        assert_eq!(default_placement(48, 4).unwrap(), vec![39, 42, 45, 48]);
        assert_eq!(default_placement(48, 8).unwrap(), vec![27, 30, 33, 36, 39, 42, 45, 48]);
        assert_eq!(default_placement(8, 2).unwrap(), vec![6, 8]);
        assert_eq!(default_placement(8, 4).unwrap(), vec![5, 6, 7, 8]);
        assert_eq!(default_placement(8, 1).unwrap(), vec![8]);
        assert!(default_placement(2, 4).is_err());
    }

    #[test]
    fn placement_validation() {
        assert!(HeadPlacement::new(Variant::Dnd, vec![3, 2, 4]).validate(4).is_err());
        assert!(HeadPlacement::new(Variant::Dnd, vec![2, 3]).validate(4).is_err());
        assert!(HeadPlacement::new(Variant::OneDim, vec![3, 4]).validate(4).is_err());
        assert!(HeadPlacement::new(Variant::Vertical, vec![0, 4]).validate(4).is_err());
        let p = HeadPlacement::new(Variant::Parallel, vec![2, 4]);
        p.validate(4).unwrap();
        assert_eq!(p.head_layer(0), 4);
    }

    #[test]
    fn fuse_input_sums_embeddings() {
        let cfg = config(true);
        let placement = HeadPlacement::new(Variant::Vertical, vec![2, 4]);
        let model = Transformer::init(cfg, placement, 1).unwrap();
        let table = &model.params.value(model.params.id("tok_embed").unwrap()).data;
        let h = cfg.hidden;
        let embed = |q: usize| &table[q * h..(q + 1) * h];
        let fused = |codes: &[u32]| {
            let mut tape = Tape::new();
            let t = tape.param(&model.params, model.params.id("tok_embed").unwrap());
            let v = tape.embed_sum(t, codes, codes.len());
            tape.value(v).data.clone()
        };
        assert_eq!(fused(&[3]), embed(3));
        assert_eq!(fused(&[3, 5]), fused(&[5, 3]));
        let twice: Vec<f32> = embed(4).iter().map(|x| 2.0 * x).collect();
        assert_eq!(fused(&[4, 4]), twice);
    }

    #[test]
    fn untrained_losses_are_near_uniform() {
        let cfg = config(true);
        let placement = HeadPlacement::new(Variant::Dnd, vec![2, 4]);
        let model = Transformer::init(cfg, placement, 2).unwrap();
        let g = grids(4, 2, 3);
        let out = model.forward_train(&g, &[Some(0), Some(1), None, Some(2)]).unwrap();
        let ln_n = (cfg.vocab as f64).ln();
        for l in &out.losses {
            assert!((l - ln_n).abs() < 0.05 * ln_n, "{l} vs {ln_n}");
        }
        assert_eq!(out.logits[0].shape, vec![36, 12]);
    }

    #[test]
    fn dnd_with_one_head_matches_one_dim() {
        let cfg = BackboneConfig { dropout: 0.1, ..config(true) };
        let g = grids(6, 1, 4);
        let conds = vec![Some(0), Some(1), Some(2), None, Some(0), Some(1)];
        let tc = TrainConfig { base_lr: 0.05, batch_size: 3, epochs: 2, ..Default::default() };
        let run = |variant| {
            let mut m = Transformer::init(cfg, HeadPlacement::new(variant, vec![4]), 5).unwrap();
            let log = train_transformer(&mut m, &g, &conds, &tc, |_, _| {}).unwrap();
            (m.params.params().iter().map(|p| p.value.data.clone()).collect::<Vec<_>>(), log)
        };
        let (pa, la) = run(Variant::OneDim);
        let (pb, lb) = run(Variant::Dnd);
        assert_eq!(la, lb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn backbone_size_is_independent_of_depth() {
        let cfg = config(false);
        let counts: Vec<usize> = [(Variant::OneDim, vec![4]), (Variant::Dnd, vec![2, 4]), (Variant::Dnd, vec![1, 2, 3, 4])]
            .into_iter()
            .map(|(v, l)| Transformer::init(cfg, HeadPlacement::new(v, l), 0).unwrap().backbone_param_count())
            .collect();
        assert_eq!(counts[0], counts[1]);
        assert_eq!(counts[1], counts[2]);
        let a = Transformer::init(cfg, HeadPlacement::new(Variant::Dnd, vec![2, 4]), 0).unwrap();
        let b = Transformer::init(cfg, HeadPlacement::new(Variant::Vertical, vec![2, 4]), 0).unwrap();
        assert!(a.params.numel() > b.params.numel());
    }

    fn full_logits(model: &Transformer, g: &CodeGrid, cond: Option<u32>) -> Vec<Tensor<f32>> {
        model.forward_train(std::slice::from_ref(g), &[cond]).unwrap().logits
    }

    #[test]
    fn incremental_matches_full_forward() {
        for (rope, variant) in [(true, Variant::Dnd), (false, Variant::Vertical), (true, Variant::Parallel)] {
            let cfg = config(rope);
            let model = Transformer::init(cfg, HeadPlacement::new(variant, vec![2, 4]), 6).unwrap();
            let g = grids(1, 2, 7).remove(0);
            let full = full_logits(&model, &g, Some(1));
            let mut s = model.session().unwrap();
            for t in 0..9 {
                if t == 0 {
                    s.begin(StepInput::Condition(Some(1))).unwrap();
                } else {
                    s.begin(StepInput::Codes(g.at(t - 1))).unwrap();
                }
                for i in 0..2 {
                    let inc = s.head_logits(i).unwrap();
                    let want = &full[i].data[t * 12..(t + 1) * 12];
                    for (a, b) in inc.iter().zip(want) {
                        assert!((a - b).abs() < 1e-5, "{variant:?} t={t} head {i}: {a} vs {b}");
                    }
                    if variant == Variant::Dnd && i == 0 {
                        s.inject(0, g.code(t, 0)).unwrap();
                    }
                }
            }
            s.finish().unwrap();
            assert_eq!(s.len(), 9);
            assert_eq!(s.passes(), 9);
            assert!(s.begin(StepInput::Codes(g.at(8))).is_err());
        }
    }

    #[test]
    fn injection_changes_deeper_head() {
        let model = Transformer::init(config(true), HeadPlacement::new(Variant::Dnd, vec![2, 4]), 8).unwrap();
        let logits_after = |code: u32| {
            let mut s = model.session().unwrap();
            s.begin(StepInput::Condition(None)).unwrap();
            s.head_logits(0).unwrap();
            s.inject(0, code).unwrap();
            s.head_logits(1).unwrap()
        };
        assert_ne!(logits_after(1), logits_after(2));
        let mut s = model.session().unwrap();
        s.begin(StepInput::Condition(None)).unwrap();
        s.head_logits(0).unwrap();
        assert!(s.head_logits(1).is_err(), "skipping the injection must fail");
    }

    #[test]
    fn forward_incremental_exposes_head_states() {
        let model = Transformer::init(config(true), HeadPlacement::new(Variant::Vertical, vec![2, 4]), 9).unwrap();
        let mut s = model.session().unwrap();
        let states = s.forward_incremental(StepInput::Condition(Some(0))).unwrap();
        assert_eq!(states.len(), 2);
        assert_ne!(states[0], states[1]);
        assert_eq!((s.len(), s.passes()), (1, 1));
    }

    #[test]
    fn positional_causality() {
        let model = Transformer::init(config(true), HeadPlacement::new(Variant::Dnd, vec![2, 4]), 10).unwrap();
        let g = grids(1, 2, 11).remove(0);
        let base = full_logits(&model, &g, Some(2));
        let t = 4;
        let mut codes = g.codes.clone();
        for p in t + 1..9 {
            codes[p * 2] = (codes[p * 2] + 1) % 12;
            codes[p * 2 + 1] = (codes[p * 2 + 1] + 5) % 12;
        }
        let pert = full_logits(&model, &CodeGrid::new(3, 3, 2, 12, codes).unwrap(), Some(2));
        for i in 0..2 {
            assert_eq!(base[i].data[..(t + 1) * 12], pert[i].data[..(t + 1) * 12]);
            assert_ne!(base[i].data[(t + 1) * 12..], pert[i].data[(t + 1) * 12..]);
        }
    }

    #[test]
    fn depth_causality() {
        let model =
            Transformer::init(config(true), HeadPlacement::new(Variant::Dnd, vec![2, 3, 4]), 12).unwrap();
        let g = grids(1, 3, 13).remove(0);
        let base = full_logits(&model, &g, None);
        let t = 5;
        for j in 0..3 {
            let mut codes = g.codes.clone();
            codes[t * 3 + j] = (codes[t * 3 + j] + 7) % 12;
            let pert = full_logits(&model, &CodeGrid::new(3, 3, 3, 12, codes).unwrap(), None);
            for i in 0..=j {
                assert_eq!(base[i].data[t * 12..(t + 1) * 12], pert[i].data[t * 12..(t + 1) * 12], "head {i} saw depth {j}");
            }
            for i in j + 1..3 {
                assert_ne!(base[i].data[t * 12..(t + 1) * 12], pert[i].data[t * 12..(t + 1) * 12]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = BackboneConfig { dropout: 0.1, ..config(true) };
        let placement = HeadPlacement::new(Variant::Dnd, vec![2, 4]);
        let mut params: ParamStore<f64> = init_params(&cfg, &placement, &mut ChaCha8Rng::seed_from_u64(14));
        let g = grids(2, 2, 15);
        let conds = [Some(1), None];
        let loss = |ps: &ParamStore<f64>, grads: bool| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(16);
            let v = forward_on_tape(&mut tape, ps, &cfg, &placement, &g, &conds, Some(&mut rng)).unwrap();
            let mut out = ps.clone();
            if grads {
                tape.backward(v.total).accumulate_into(&mut out);
            }
            (tape.value(v.total).item(), out)
        };
        let (_, analytic) = loss(&params, true);
        for name in ["tok_embed", "cond_embed", "l1.wq", "l2.wo", "l3.w1", "l4.ffn_norm", "head0.w", "head1.norm", "inj0.w"] {
            let id = params.id(name).unwrap();
            let n = params.value(id).numel();
            for index in [0, n / 3, n - 1] {
                let numeric = central_difference(&mut params, id, index, 1e-6, |ps| loss(ps, false).0);
                let a = analytic.grad(id)[index];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
                assert!(err < 1e-3, "{name}[{index}]: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let cfg = BackboneConfig { dropout: 0.1, ..config(true) };
        let g = grids(8, 2, 17);
        let conds: Vec<Option<u32>> = (0..8).map(|i| Some(i % 3)).collect();
        let tc = TrainConfig { base_lr: 0.1, batch_size: 4, epochs: 3, ..Default::default() };
        let run = || {
            let mut m = Transformer::init(cfg, HeadPlacement::new(Variant::Dnd, vec![2, 4]), 18).unwrap();
            train_transformer(&mut m, &g, &conds, &tc, |_, _| {}).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.steps.len(), 6);
        let csv = a.to_csv();
        assert!(csv.starts_with("step,loss_total,loss_d1,loss_d2,grad_norm\n"));
        assert_eq!(a.epoch_means(3).unwrap().len(), 2);
        assert!(a.steps.last().unwrap().loss_total < a.steps[0].loss_total);
    }

    #[test]
    fn rejects_mismatched_batches() {
        let model = Transformer::init(config(true), HeadPlacement::new(Variant::Dnd, vec![2, 4]), 19).unwrap();
        assert!(model.forward_train(&grids(1, 1, 0), &[None]).is_err());
        assert!(model.forward_train(&grids(1, 2, 0), &[Some(3)]).is_err());
        assert!(model.forward_train(&grids(2, 2, 0), &[None]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = Transformer::init(config(false), HeadPlacement::new(Variant::Dnd, vec![2, 4]), 20).unwrap();
        let ck = model.to_checkpoint(Some(&TrainConfig::default())).unwrap();
        let back = Transformer::from_checkpoint(&ck).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        ck.write_to(&mut a).unwrap();
        back.to_checkpoint(Some(&TrainConfig::default())).unwrap().write_to(&mut b).unwrap();
        assert_eq!(a, b);
    }
}
