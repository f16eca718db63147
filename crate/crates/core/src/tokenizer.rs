//! Convolutional autoencoder around the residual quantizer.
//!
//! Tensors use channel-major `[C, B, H, W]` layout. The encoder is a 3x3 stem
//! followed by `log2(f)` stages of (stride-2 conv, residual blocks) and a
//! 1x1 projection to the latent dimension; the decoder mirrors it with
//! nearest-neighbour upsampling. Residual blocks compute
//! `x + conv(silu(conv(silu(x))))` without normalisation.

use std::fmt::Write as _;
use std::path::Path;

use dnd_autograd::{Adam, AdamConfig, ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    ema_update, quantize_vector, usage_histogram, Assignments, CodeGrid, Codebook, EmaConfig, FeatureMap,
};
use crate::error::{invalid, io_at, Error, Result};
use crate::image::Image;
use crate::persist::{Checkpoint, NamedArray};

pub const CHECKPOINT_KIND: &str = "tokenizer";

/// Network and codebook shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Spatial downscale factor `f`, a power of two.
    pub downscale: usize,
    /// Latent (and codebook entry) dimension `c`.
    pub latent_dim: usize,
    /// Channel width of the first stage; doubles at every later stage.
    pub base_width: usize,
    pub res_blocks: usize,
    pub codebook_size: usize,
    /// Residual quantization depth `d`.
    pub depth: usize,
}

impl Default for AutoencoderSpec {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            downscale: 4,
            latent_dim: 16,
            base_width: 32,
            res_blocks: 2,
            codebook_size: 128,
            depth: 2,
        }
    }
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.downscale.is_power_of_two() || self.downscale < 2 {
            return Err(invalid(format!("downscale {} must be a power of two >= 2", self.downscale)));
        }
        if self.height % self.downscale != 0 || self.width % self.downscale != 0 {
            return Err(invalid(format!(
                "{}x{} input is not divisible by downscale {}",
                self.height, self.width, self.downscale
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(invalid(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.latent_dim == 0 || self.base_width == 0 || self.depth == 0 || self.codebook_size < 2 {
            return Err(invalid("latent_dim, base_width and depth must be positive, codebook_size >= 2"));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    /// Latent grid `(h, w)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.downscale, self.width / self.downscale)
    }

    /// Channel width after stage `s` (stage 0 is the stem).
    fn stage_width(&self, s: usize) -> usize {
        self.base_width << s.saturating_sub(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Commitment weight.
    pub beta: f64,
    pub ema_decay: f64,
    /// Updates without assignment before a codebook entry is re-seeded.
    pub dead_after: u32,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        Self { lr: 4e-5, batch_size: 64, epochs: 30, beta: 0.25, ema_decay: 0.99, dead_after: 256, seed: 0 }
    }
}

impl TokenizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("lr, batch_size and epochs must be positive"));
        }
        if !(self.beta >= 0.0) || !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid("beta must be >= 0 and ema_decay in [0, 1)"));
        }
        Ok(())
    }
}

/// Stacks images into a `[C, B, H, W]` tensor.
pub fn images_to_tensor<T: Scalar>(images: &[Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| invalid("empty image batch"))?;
    let (c, h, w) = (first.channels, first.height, first.width);
    let b = images.len();
    let mut data = vec![T::zero(); c * b * h * w];
    for (bi, img) in images.iter().enumerate() {
        if (img.channels, img.height, img.width) != (c, h, w) {
            return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data[((ch * b + bi) * h + y) * w + x] = T::lit(img.get(y, x, ch) as f64);
                }
            }
        }
    }
    Ok(Tensor::new([c, b, h, w], data))
}

fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Vec<Image> {
    let (c, b, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    (0..b)
        .map(|bi| {
            let mut data = Vec::with_capacity(h * w * c);
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        data.push(t.data[((ch * b + bi) * h + y) * w + x].as_f64() as f32);
                    }
                }
            }
            Image { height: h, width: w, channels: c, data }
        })
        .collect()
}

fn tensor_to_maps<T: Scalar>(t: &Tensor<T>) -> Result<Vec<FeatureMap>> {
    let (c, b, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    (0..b)
        .map(|bi| {
            let mut values = Vec::with_capacity(h * w * c);
            for p in 0..h * w {
                for ch in 0..c {
                    values.push(t.data[(ch * b + bi) * h * w + p].as_f64());
                }
            }
            FeatureMap::new(h, w, c, values)
        })
        .collect()
}

fn maps_to_tensor<T: Scalar>(maps: &[FeatureMap]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or_else(|| invalid("empty feature map batch"))?;
    let (c, h, w, b) = (first.channels, first.height, first.width, maps.len());
    let mut data = vec![T::zero(); c * b * h * w];
    for (bi, m) in maps.iter().enumerate() {
        if (m.channels, m.height, m.width) != (c, h, w) {
            return Err(Error::ShapeMismatch("feature maps in a batch differ in size".into()));
        }
        for p in 0..h * w {
            for ch in 0..c {
                data[(ch * b + bi) * h * w + p] = T::lit(m.values[p * c + ch]);
            }
        }
    }
    Ok(Tensor::new([c, b, h, w], data))
}

/// Creates all encoder and decoder parameters.
pub fn init_params<T: Scalar, R: Rng>(spec: &AutoencoderSpec, rng: &mut R) -> ParamStore<T> {
    let mut ps = ParamStore::new();
    let mut conv = |ps: &mut ParamStore<T>, name: &str, o: usize, i: usize, k: usize, gain: f64| {
        let std = gain / ((i * k * k) as f64).sqrt();
        ps.add_normal(format!("{name}.w"), &[o, i, k, k], std, rng);
        ps.add_no_decay(format!("{name}.b"), Tensor::zeros([o]));
    };
    let stages = spec.stages();
    conv(&mut ps, "enc.stem", spec.base_width, spec.channels, 3, 1.0);
    for s in 1..=stages {
        let (wi, wo) = (spec.stage_width(s - 1), spec.stage_width(s));
        conv(&mut ps, &format!("enc.s{s}.down"), wo, wi, 3, 1.0);
        for r in 0..spec.res_blocks {
            conv(&mut ps, &format!("enc.s{s}.res{r}.c1"), wo, wo, 3, 1.0);
            conv(&mut ps, &format!("enc.s{s}.res{r}.c2"), wo, wo, 3, 0.5);
        }
    }
    conv(&mut ps, "enc.out", spec.latent_dim, spec.stage_width(stages), 1, 1.0);

    conv(&mut ps, "dec.stem", spec.stage_width(stages), spec.latent_dim, 3, 1.0);
    for s in (1..=stages).rev() {
        let (wi, wo) = (spec.stage_width(s), spec.stage_width(s - 1));
        for r in 0..spec.res_blocks {
            conv(&mut ps, &format!("dec.s{s}.res{r}.c1"), wi, wi, 3, 1.0);
            conv(&mut ps, &format!("dec.s{s}.res{r}.c2"), wi, wi, 3, 0.5);
        }
        conv(&mut ps, &format!("dec.s{s}.up"), wo, wi, 3, 1.0);
    }
    conv(&mut ps, "dec.out", spec.channels, spec.base_width, 3, 1.0);
    ps
}

/// Parameters placed on a tape, addressable by name.
struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Var>,
}

impl<'a, T: Scalar> Bound<'a, T> {
    fn new(tape: &mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        let vars = store.ids().map(|id| tape.param(store, id)).collect();
        Self { store, vars }
    }

    fn get(&self, name: &str) -> Var {
        let id = self.store.id(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.vars[id.0]
    }

    fn conv(&self, tape: &mut Tape<T>, name: &str, x: Var, stride: usize, pad: usize) -> Var {
        let (w, b) = (self.get(&format!("{name}.w")), self.get(&format!("{name}.b")));
        tape.conv2d(x, w, b, stride, pad)
    }

    fn res_block(&self, tape: &mut Tape<T>, name: &str, x: Var) -> Var {
        let h = tape.silu(x);
        let h = self.conv(tape, &format!("{name}.c1"), h, 1, 1);
        let h = tape.silu(h);
        let h = self.conv(tape, &format!("{name}.c2"), h, 1, 1);
        tape.add(x, h)
    }

    fn encoder(&self, tape: &mut Tape<T>, spec: &AutoencoderSpec, x: Var) -> Var {
        let mut h = self.conv(tape, "enc.stem", x, 1, 1);
        for s in 1..=spec.stages() {
            let a = tape.silu(h);
            h = self.conv(tape, &format!("enc.s{s}.down"), a, 2, 1);
            for r in 0..spec.res_blocks {
                h = self.res_block(tape, &format!("enc.s{s}.res{r}"), h);
            }
        }
        let a = tape.silu(h);
        self.conv(tape, "enc.out", a, 1, 0)
    }

    fn decoder(&self, tape: &mut Tape<T>, spec: &AutoencoderSpec, z: Var) -> Var {
        let mut h = self.conv(tape, "dec.stem", z, 1, 1);
        for s in (1..=spec.stages()).rev() {
            for r in 0..spec.res_blocks {
                h = self.res_block(tape, &format!("dec.s{s}.res{r}"), h);
            }
            let a = tape.silu(h);
            let up = tape.upsample2x(a);
            h = self.conv(tape, &format!("dec.s{s}.up"), up, 1, 1);
        }
        let a = tape.silu(h);
        self.conv(tape, "dec.out", a, 1, 1)
    }
}

/// Quantizer outputs frozen at one encoder evaluation: everything the
/// straight-through bridge and the commitment term treat as constant.
#[derive(Debug, Clone)]
pub struct QuantBridge {
    /// `dequantized - encoder_output`, `[c, B, h, w]`.
    pub offset: Tensor<f64>,
    /// Cumulative partial sums of selected entries, one per depth.
    pub partials: Vec<Tensor<f64>>,
    pub grids: Vec<CodeGrid>,
    pub assignments: Assignments,
}

impl QuantBridge {
    /// Quantizes the encoder output `z` (`[c, B, h, w]`) position by position.
    pub fn build<T: Scalar>(z: &Tensor<T>, codebook: &Codebook, depth: usize) -> Result<Self> {
        let (c, b, h, w) = (z.shape[0], z.shape[1], z.shape[2], z.shape[3]);
        let hw = h * w;
        let mut offset = vec![0.0; z.numel()];
        let mut partials = vec![vec![0.0; z.numel()]; depth];
        let mut grids = Vec::with_capacity(b);
        let mut assignments = Assignments::new(c);
        let mut v = vec![0.0; c];
        for bi in 0..b {
            let mut codes = Vec::with_capacity(hw * depth);
            for p in 0..hw {
                for (ch, slot) in v.iter_mut().enumerate() {
                    *slot = z.data[(ch * b + bi) * hw + p].as_f64();
                }
                let (q, trace) = quantize_vector(&v, codebook, depth)?;
                for (i, partial) in partials.iter_mut().enumerate() {
                    for ch in 0..c {
                        partial[(ch * b + bi) * hw + p] = v[ch] - trace.residuals[i + 1][ch];
                    }
                }
                for ch in 0..c {
                    offset[(ch * b + bi) * hw + p] = -trace.last()[ch];
                }
                assignments.push_trace(&q, &trace);
                codes.extend(q);
            }
            grids.push(CodeGrid::new(h, w, depth, codebook.size(), codes)?);
        }
        let shape = z.shape.clone();
        Ok(Self {
            offset: Tensor::new(shape.clone(), offset),
            partials: partials.into_iter().map(|p| Tensor::new(shape.clone(), p)).collect(),
            grids,
            assignments,
        })
    }
}

/// How the decoder input is formed from the encoder output.
#[derive(Debug, Clone, Copy)]
pub enum BridgeMode<'a> {
    /// Quantize the current encoder output.
    Live { codebook: &'a Codebook, depth: usize },
    /// Reuse an earlier quantization, so the loss is smooth in the weights.
    Frozen(&'a QuantBridge),
    /// Feed the encoder output to the decoder unchanged; no commitment term.
    Bypass,
}

/// Tape handles of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub recon_l2: Var,
    pub commitment: Option<Var>,
}

/// Scalar values of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub recon_l2: f64,
    pub commitment: f64,
}

/// Builds `recon_l2 + beta * sum_i |v - sg(partial_i)|^2 / positions` on `tape`.
/// The decoder input is `v + sg(q - v)`, whose gradient with respect to `v`
/// is the identity.
pub fn loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    spec: &AutoencoderSpec,
    batch: &Tensor<T>,
    mode: BridgeMode<'_>,
    beta: f64,
) -> Result<(LossVars, Option<QuantBridge>)> {
    let bound = Bound::new(tape, params);
    let x = tape.constant(batch.clone());
    let z = bound.encoder(tape, spec, x);
    if !tape.value(z).all_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    let built = match mode {
        BridgeMode::Live { codebook, depth } => Some(QuantBridge::build(tape.value(z), codebook, depth)?),
        _ => None,
    };
    let bridge = match mode {
        BridgeMode::Frozen(b) => Some(b),
        BridgeMode::Live { .. } => built.as_ref(),
        BridgeMode::Bypass => None,
    };
    let zq = match bridge {
        Some(b) => tape.add_const(z, &b.offset.cast()),
        None => z,
    };
    let out = bound.decoder(tape, spec, zq);
    let recon = tape.mse_const(out, batch);
    let (total, commitment) = match bridge {
        Some(b) => {
            let shape = tape.shape(z).to_vec();
            let positions = T::lit((shape[1] * shape[2] * shape[3]) as f64);
            let terms: Vec<Var> =
                b.partials.iter().map(|p| tape.sum_sq_diff_const(z, &p.cast(), positions)).collect();
            let commit = tape.weighted_sum(&terms, &vec![T::lit(beta); terms.len()]);
            (tape.add(recon, commit), Some(commit))
        }
        None => (recon, None),
    };
    Ok((LossVars { total, recon_l2: recon, commitment }, built))
}

/// Trained (or freshly initialised) encoder, decoder and codebook.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub spec: AutoencoderSpec,
    pub params: ParamStore<f32>,
    pub codebook: Codebook,
}

/// Images per inference batch.
const INFER_BATCH: usize = 64;

impl Tokenizer {
    /// Random weights and a uniform codebook in `[-1/N, 1/N]`.
    pub fn init(spec: AutoencoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&spec, &mut rng);
        let bound = 1.0 / spec.codebook_size as f64;
        let codebook = Codebook::random_uniform(spec.codebook_size, spec.latent_dim, bound, &mut rng)?;
        Ok(Self { spec, params, codebook })
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let s = &self.spec;
        if (img.height, img.width, img.channels) != (s.height, s.width, s.channels) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{}x{} does not match tokenizer input {}x{}x{}",
                img.height, img.width, img.channels, s.height, s.width, s.channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, img: &Image) -> Result<FeatureMap> {
        Ok(self.encode_batch(std::slice::from_ref(img))?.remove(0))
    }

    pub fn encode_batch(&self, images: &[Image]) -> Result<Vec<FeatureMap>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(INFER_BATCH) {
            for img in chunk {
                self.check_image(img)?;
            }
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &self.params);
            let x = tape.constant(images_to_tensor(chunk)?);
            let z = bound.encoder(&mut tape, &self.spec, x);
            out.extend(tensor_to_maps(tape.value(z))?);
        }
        Ok(out)
    }

    /// Decoded image, clamped to `[0, 1]`.
    pub fn decode(&self, m: &FeatureMap) -> Result<Image> {
        Ok(self.decode_batch(std::slice::from_ref(m))?.remove(0))
    }

    pub fn decode_batch(&self, maps: &[FeatureMap]) -> Result<Vec<Image>> {
        let (h, w) = self.spec.grid();
        let mut out = Vec::with_capacity(maps.len());
        for chunk in maps.chunks(INFER_BATCH) {
            for m in chunk {
                if (m.height, m.width, m.channels) != (h, w, self.spec.latent_dim) {
                    return Err(Error::ShapeMismatch(format!(
                        "feature map {}x{}x{} does not match latent grid {h}x{w}x{}",
                        m.height, m.width, m.channels, self.spec.latent_dim
                    )));
                }
            }
            let mut tape = Tape::new();
            let bound = Bound::new(&mut tape, &self.params);
            let z = tape.constant(maps_to_tensor(chunk)?);
            let y = bound.decoder(&mut tape, &self.spec, z);
            out.extend(tensor_to_images(tape.value(y)).into_iter().map(Image::clamped));
        }
        Ok(out)
    }

    pub fn tokenize_batch(&self, images: &[Image], depth: usize) -> Result<Vec<CodeGrid>> {
        self.encode_batch(images)?
            .iter()
            .map(|m| crate::codec::quantize_map(m, &self.codebook, depth))
            .collect()
    }

    pub fn detokenize_batch(&self, grids: &[CodeGrid]) -> Result<Vec<Image>> {
        let maps: Vec<FeatureMap> =
            grids.iter().map(|g| crate::codec::dequantize(g, &self.codebook)).collect::<Result<_>>()?;
        self.decode_batch(&maps)
    }

    /// Round trip through quantization at `depth`, with the mean squared
    /// error of the emitted image.
    pub fn reconstruct(&self, img: &Image, depth: usize) -> Result<(Image, f64)> {
        Ok(self.reconstruct_batch(std::slice::from_ref(img), depth)?.remove(0))
    }

    pub fn reconstruct_batch(&self, images: &[Image], depth: usize) -> Result<Vec<(Image, f64)>> {
        let grids = self.tokenize_batch(images, depth)?;
        let recon = self.detokenize_batch(&grids)?;
        recon
            .into_iter()
            .zip(images)
            .map(|(r, x)| {
                let l2 = crate::metrics::recon_l2(&r, x)?;
                Ok((r, l2))
            })
            .collect()
    }

    /// Loss of a batch with live quantization at `depth`.
    pub fn loss(&self, images: &[Image], depth: usize, beta: f64) -> Result<LossParts> {
        for img in images {
            self.check_image(img)?;
        }
        let mut tape = Tape::new();
        let batch = images_to_tensor::<f32>(images)?;
        let mode = BridgeMode::Live { codebook: &self.codebook, depth };
        let (vars, _) = loss_on_tape(&mut tape, &self.params, &self.spec, &batch, mode, beta)?;
        Ok(loss_parts(&tape, &vars))
    }

    pub fn to_checkpoint(&self, train: Option<&TokenizerTrainConfig>) -> Result<Checkpoint> {
        let config = serde_json::json!({ "autoencoder": self.spec, "train": train });
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, config);
        for p in self.params.params() {
            ck.push(NamedArray::new(p.name.clone(), p.value.shape.clone(), p.value.data.clone())?);
        }
        let entries = self.codebook.entries().iter().map(|&v| v as f32).collect();
        ck.push(NamedArray::new("codebook", vec![self.codebook.size(), self.codebook.dim()], entries)?);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let spec: AutoencoderSpec = serde_json::from_value(ck.config["autoencoder"].clone())
            .map_err(|e| Error::Format(format!("tokenizer config: {e}")))?;
        spec.validate()?;
        let mut params = init_params::<f32, _>(&spec, &mut ChaCha8Rng::seed_from_u64(0));
        for id in params.ids().collect::<Vec<_>>() {
            let name = params.get(id).name.clone();
            let arr = ck.require(&name)?;
            let value = params.value_mut(id);
            if arr.shape != value.shape {
                return Err(Error::ShapeMismatch(format!("{name}: {:?} vs {:?}", arr.shape, value.shape)));
            }
            value.data.copy_from_slice(&arr.data);
        }
        let cb = ck.require("codebook")?;
        if cb.shape != [spec.codebook_size, spec.latent_dim] {
            return Err(Error::ShapeMismatch(format!("codebook shape {:?}", cb.shape)));
        }
        let codebook = Codebook::new(
            spec.codebook_size,
            spec.latent_dim,
            cb.data.iter().map(|&v| v as f64).collect(),
        )?;
        Ok(Self { spec, params, codebook })
    }

    pub fn save(&self, path: &Path, train: Option<&TokenizerTrainConfig>) -> Result<()> {
        self.to_checkpoint(train)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn loss_parts<T: Scalar>(tape: &Tape<T>, vars: &LossVars) -> LossParts {
    LossParts {
        total: tape.value(vars.total).item().as_f64(),
        recon_l2: tape.value(vars.recon_l2).item().as_f64(),
        commitment: vars.commitment.map_or(0.0, |c| tape.value(c).item().as_f64()),
    }
}

/// One row of the tokenizer training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    pub recon_l2: f64,
    pub commitment: f64,
    /// Fraction of codebook entries used at each depth during the epoch.
    pub usage: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenizerLog {
    pub epochs: Vec<TokenizerEpoch>,
}

impl TokenizerLog {
    /// CSV with columns `epoch, recon_l2, commitment, usage_d1..usage_dD`.
    pub fn to_csv(&self) -> String {
        let depth = self.epochs.first().map_or(0, |e| e.usage.len());
        let mut s = String::from("epoch,recon_l2,commitment");
        for i in 1..=depth {
            write!(s, ",usage_d{i}").unwrap();
        }
        s.push('\n');
        for e in &self.epochs {
            write!(s, "{},{},{}", e.epoch, e.recon_l2, e.commitment).unwrap();
            for u in &e.usage {
                write!(s, ",{u}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(io_at(path))
    }
}

/// Trains encoder and decoder with Adam and the codebook with EMA updates.
/// `on_epoch` sees each finished epoch (for progress reporting).
pub fn train_tokenizer(
    images: &[Image],
    spec: AutoencoderSpec,
    config: &TokenizerTrainConfig,
    mut on_epoch: impl FnMut(&TokenizerEpoch),
) -> Result<(Tokenizer, TokenizerLog)> {
    config.validate()?;
    if images.is_empty() {
        return Err(invalid("tokenizer training needs at least one image"));
    }
    let mut tok = Tokenizer::init(spec, config.seed)?;
    for img in images {
        tok.check_image(img)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A6B_0001);
    let adam_cfg = AdamConfig { lr: config.lr, ..AdamConfig::default() };
    let mut adam = Adam::new(adam_cfg, &tok.params);
    let ema = EmaConfig { decay: config.ema_decay, dead_after: config.dead_after, ..EmaConfig::default() };
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut log = TokenizerLog::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut recon_sum, mut commit_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut grids = Vec::with_capacity(images.len());
        for chunk in order.chunks(config.batch_size) {
            let batch_imgs: Vec<Image> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = images_to_tensor::<f32>(&batch_imgs)?;
            let mut tape = Tape::new();
            let mode = BridgeMode::Live { codebook: &tok.codebook, depth: spec.depth };
            let (vars, bridge) = loss_on_tape(&mut tape, &tok.params, &spec, &batch, mode, config.beta)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, step, loss: f64::NAN },
                    e => e,
                })?;
            let parts = loss_parts(&tape, &vars);
            if !parts.total.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: parts.total });
            }
            tape.backward(vars.total).accumulate_into(&mut tok.params);
            if !tok.params.grad_norm().is_finite() {
                return Err(Error::Diverged { epoch, step, loss: parts.total });
            }
            adam.step(&mut tok.params);
            tok.params.zero_grad();
            let bridge = bridge.expect("live mode quantizes");
            ema_update(&mut tok.codebook, &bridge.assignments, &ema, &mut rng)?;
            grids.extend(bridge.grids);
            recon_sum += parts.recon_l2;
            commit_sum += parts.commitment;
            batches += 1;
            step += 1;
        }
        let row = TokenizerEpoch {
            epoch,
            recon_l2: recon_sum / batches as f64,
            commitment: commit_sum / batches as f64,
            usage: usage_histogram(&grids)?,
        };
        on_epoch(&row);
        log.epochs.push(row);
    }
    Ok((tok, log))
}
