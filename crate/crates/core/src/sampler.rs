//! Autoregressive generation of code grids, depth first and spatial second,
//! with classifier-free guidance, temperature and top-k.
//!
//! Every position costs one backbone pass per session. Guidance runs a
//! conditional and a null-condition session side by side; both are fed the
//! codes drawn from the guided distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::CodeGrid;
use crate::error::{invalid, Error, Result};
use crate::image::Image;
use crate::tokenizer::Tokenizer;
use crate::transformer::{StepInput, Transformer};

/// Temperatures below this pick the argmax.
pub const ARGMAX_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    /// Class id, or `None` for unconditional generation.
    pub condition: Option<u32>,
    /// Guidance scale `t`; 1 disables guidance.
    pub cfg_scale: f64,
    pub temperature: f64,
    /// Keep only the `k` largest logits; 0 keeps all.
    pub top_k: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl SampleRequest {
    pub fn new(condition: Option<u32>, height: usize, width: usize, depth: usize, seed: u64) -> Self {
        Self { condition, cfg_scale: 1.0, temperature: 1.0, top_k: 0, seed, height, width, depth }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.cfg_scale >= 0.0) || !self.cfg_scale.is_finite() {
            return Err(invalid(format!("cfg scale must be finite and >= 0, got {}", self.cfg_scale)));
        }
        if self.top_k > vocab {
            return Err(invalid(format!("top-k {} exceeds vocab {vocab}", self.top_k)));
        }
        if self.height == 0 || self.width == 0 || self.depth == 0 {
            return Err(invalid("grid dimensions must be positive"));
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn guided(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

/// `lu + (lc - lu) * t`, returning `lc` or `lu` unchanged at `t = 1` or 0.
pub fn cfg_combine(uncond: &[f32], cond: &[f32], t: f64) -> Result<Vec<f32>> {
    if uncond.len() != cond.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} logits", uncond.len(), cond.len())));
    }
    if t == 1.0 {
        return Ok(cond.to_vec());
    }
    if t == 0.0 {
        return Ok(uncond.to_vec());
    }
    let t = t as f32;
    Ok(uncond.iter().zip(cond).map(|(u, c)| u + (c - u) * t).collect())
}

/// Draws one index from `softmax(logits / temperature)` restricted to the
/// `top_k` largest logits.
pub fn sample_code<R: Rng>(logits: &[f32], temperature: f64, top_k: usize, rng: &mut R) -> Result<u32> {
    if logits.is_empty() {
        return Err(invalid("no logits to sample from"));
    }
    if logits.iter().any(|l| l.is_nan()) {
        return Err(Error::NonFinite("sampling logits".into()));
    }
    if !(temperature > 0.0) {
        return Err(invalid("temperature must be positive"));
    }
    let argmax = || {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best as u32
    };
    if temperature < ARGMAX_TEMPERATURE {
        return Ok(argmax());
    }
    let mut keep = vec![true; logits.len()];
    if top_k > 0 && top_k < logits.len() {
        let mut order: Vec<usize> = (0..logits.len()).collect();
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        keep.iter_mut().for_each(|k| *k = false);
        for &i in &order[..top_k] {
            keep[i] = true;
        }
    }
    let max = logits.iter().zip(&keep).filter(|(_, k)| **k).map(|(l, _)| *l as f64).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        return Ok(argmax());
    }
    let weights: Vec<f64> = logits
        .iter()
        .zip(&keep)
        .map(|(l, k)| if *k { ((*l as f64 - max) / temperature).exp() } else { 0.0 })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if *w == 0.0 {
            continue;
        }
        last = i;
        if u < *w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(last as u32)
}

/// A sampled grid with the number of backbone passes each session ran.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledGrid {
    pub grid: CodeGrid,
    pub passes: usize,
    /// Passes of the null-condition session; 0 without guidance.
    pub guide_passes: usize,
}

/// Generates one grid position by position, sampling every depth before
/// moving on.
pub fn sample_codegrid(model: &Transformer, req: &SampleRequest) -> Result<SampledGrid> {
    req.validate(model.config.vocab)?;
    let d = model.depth();
    if req.depth != d {
        return Err(invalid(format!("request depth {} but the model has {d} heads", req.depth)));
    }
    let l = req.positions();
    if l > model.config.max_seq_len {
        return Err(invalid(format!("{l} positions exceed the model's {}", model.config.max_seq_len)));
    }
    let guided = req.guided();
    if guided && model.config.classes == 0 {
        return Err(invalid("cfg requested on an unconditional model"));
    }
    if guided && req.condition.is_none() {
        return Err(invalid("cfg needs a class condition"));
    }
    let injects = model.placement.injects();
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    let mut cond = model.session()?;
    let mut null = if guided { Some(model.session()?) } else { None };
    let mut codes: Vec<u32> = Vec::with_capacity(l * d);
    for t in 0..l {
        let (input, null_input) = if t == 0 {
            (StepInput::Condition(req.condition), StepInput::Condition(None))
        } else {
            let prev = StepInput::Codes(&codes[(t - 1) * d..t * d]);
            (prev, prev)
        };
        cond.begin(input)?;
        if let Some(s) = null.as_mut() {
            s.begin(null_input)?;
        }
        for i in 0..d {
            let lc = cond.head_logits(i)?;
            let logits = match null.as_mut() {
                Some(s) => cfg_combine(&s.head_logits(i)?, &lc, req.cfg_scale)?,
                None => lc,
            };
            let q = sample_code(&logits, req.temperature, req.top_k, &mut rng)?;
            if injects && i + 1 < d {
                cond.inject(i, q)?;
                if let Some(s) = null.as_mut() {
                    s.inject(i, q)?;
                }
            }
            codes.push(q);
        }
    }
    cond.finish()?;
    if let Some(s) = null.as_mut() {
        s.finish()?;
    }
    let grid = CodeGrid::new(req.height, req.width, d, model.config.vocab, codes)?;
    Ok(SampledGrid { grid, passes: cond.passes(), guide_passes: null.map_or(0, |s| s.passes()) })
}

/// Samples a grid and decodes it to pixels.
pub fn generate_image(tokenizer: &Tokenizer, model: &Transformer, req: &SampleRequest) -> Result<(Image, CodeGrid)> {
    if tokenizer.codebook.size() != model.config.vocab {
        return Err(Error::ShapeMismatch(format!(
            "tokenizer codebook has {} entries, model vocab is {}",
            tokenizer.codebook.size(),
            model.config.vocab
        )));
    }
    if tokenizer.spec.grid() != (req.height, req.width) {
        return Err(Error::ShapeMismatch(format!(
            "request grid {}x{} but the tokenizer produces {:?}",
            req.height,
            req.width,
            tokenizer.spec.grid()
        )));
    }
    let sampled = sample_codegrid(model, req)?;
    let image = tokenizer.detokenize_batch(std::slice::from_ref(&sampled.grid))?.remove(0);
    Ok((image, sampled.grid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformer::{BackboneConfig, HeadPlacement, Variant};

    fn model(variant: Variant, layers: Vec<usize>, classes: usize) -> Transformer {
        let cfg = BackboneConfig {
            layers: 4,
            hidden: 16,
            heads: 2,
            dropout: 0.0,
            vocab: 10,
            classes,
            max_seq_len: 16,
            rope: true,
            ffn_hidden: 0,
            norm_eps: 1e-5,
        };
        Transformer::init(cfg, HeadPlacement::new(variant, layers), 3).unwrap()
    }

    #[test]
    fn cfg_identities() {
        let lu = [0.3f32, -1.7, 2.5e-3];
        let lc = [1.1f32, 0.2, -4.0];
        assert_eq!(cfg_combine(&lu, &lc, 1.0).unwrap(), lc);
        assert_eq!(cfg_combine(&lu, &lc, 0.0).unwrap(), lu);
        assert_eq!(cfg_combine(&[0.0, 1.0], &[2.0, 1.0], 2.0).unwrap(), vec![4.0, 1.0]);
        assert!(cfg_combine(&[0.0], &[1.0, 2.0], 2.0).is_err());
    }

    #[test]
    fn dominant_logit_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut logits = vec![0.0f32; 8];
        logits[5] = 60.0;
        for _ in 0..1000 {
            assert_eq!(sample_code(&logits, 1.0, 0, &mut rng).unwrap(), 5);
        }
        assert_eq!(sample_code(&[1.0, 3.0, 2.0], 1e-5, 0, &mut rng).unwrap(), 1);
    }

    #[test]
    fn top_k_masks_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = [0.5f32, 0.4, 0.3, 0.2, 0.1];
        for _ in 0..2000 {
            assert!(sample_code(&logits, 1.0, 2, &mut rng).unwrap() < 2);
        }
        assert!(sample_code(&[f32::NAN, 0.0], 1.0, 0, &mut rng).is_err());
    }

    #[test]
    fn pass_count_is_one_per_position() {
        for variant in [Variant::Dnd, Variant::Vertical, Variant::Parallel] {
            let m = model(variant, vec![2, 4], 3);
            let req = SampleRequest::new(Some(1), 4, 4, 2, 7);
            let s = sample_codegrid(&m, &req).unwrap();
            assert_eq!(s.passes, 16);
            assert_eq!(s.guide_passes, 0);
            assert_eq!(s.grid.codes.len(), 32);
            let guided = sample_codegrid(&m, &SampleRequest { cfg_scale: 3.0, ..req }).unwrap();
            assert_eq!((guided.passes, guided.guide_passes), (16, 16));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = model(Variant::Dnd, vec![2, 3, 4], 3);
        let req = SampleRequest { cfg_scale: 2.0, top_k: 4, temperature: 0.8, ..SampleRequest::new(Some(2), 3, 3, 3, 11) };
        let a = sample_codegrid(&m, &req).unwrap();
        assert_eq!(a, sample_codegrid(&m, &req).unwrap());
        let other = sample_codegrid(&m, &SampleRequest { seed: 12, ..req }).unwrap();
        assert_ne!(a.grid, other.grid);
    }

    #[test]
    fn guidance_errors() {
        let unconditional = model(Variant::Dnd, vec![2, 4], 0);
        let req = SampleRequest { cfg_scale: 2.0, ..SampleRequest::new(None, 2, 2, 2, 0) };
        assert!(sample_codegrid(&unconditional, &req).is_err());
        sample_codegrid(&unconditional, &SampleRequest::new(None, 2, 2, 2, 0)).unwrap();
        let m = model(Variant::Dnd, vec![2, 4], 3);
        assert!(sample_codegrid(&m, &SampleRequest::new(Some(0), 2, 2, 3, 0)).is_err());
        assert!(sample_codegrid(&m, &SampleRequest::new(Some(0), 5, 5, 2, 0)).is_err());
        assert!(sample_codegrid(&m, &SampleRequest { temperature: 0.0, ..SampleRequest::new(Some(0), 2, 2, 2, 0) }).is_err());
    }
}
