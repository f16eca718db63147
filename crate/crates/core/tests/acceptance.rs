//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Numeric arguments select a subset, e.g.
//! `cargo test -p dnd-core --test acceptance -- 3 5`.
//!
//! Models are trained once, on first use, and shared between criteria.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dnd_autograd::gradcheck::central_difference;
use dnd_autograd::{ParamId, ParamStore, Tape};
use dnd_core::codec::{dequantize, icr, icr_bits, norm_stats, quantize_map_traced, CodeGrid, Codebook, FeatureMap};
use dnd_core::config::{Paths, RunConfig};
use dnd_core::datagen::{
    build_dataset, gen_corpus, render_text_image, Dataset, DatasetKind, DatasetSpec, GlyphFont, Label, TextImageSpec,
};
use dnd_core::image::Image;
use dnd_core::metrics::{
    fit_ngram, label_conditions, ocr_decode, ocr_samples, reading_ppl, rouge_l, strip_padding, welch_less_p,
};
use dnd_core::pipeline::{run_datagen, run_eval, run_sample, run_train_ar, run_train_tokenizer};
use dnd_core::sampler::{cfg_combine, sample_codegrid, SampleRequest};
use dnd_core::tokenizer::{
    self, images_to_tensor, loss_on_tape, train_tokenizer, AutoencoderSpec, BridgeMode, Tokenizer, TokenizerTrainConfig,
};
use dnd_core::transformer::{
    self, forward_on_tape, train_transformer, BackboneConfig, HeadPlacement, TrainConfig, TrainLog, Transformer,
    Variant,
};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DATASET_SIZE: usize = 5000;
const SHAPE_TOK_EPOCHS: usize = 10;
const TEXT_TOK_EPOCHS: usize = 5;
const SHAPE_AR_EPOCHS: usize = 5;
const TEXT_AR_EPOCHS: usize = 15;
const AR_LAYERS: usize = 4;
const AR_HIDDEN: usize = 64;
const TEXT_SAMPLES: usize = 100;

type Outcome = Result<(bool, String), String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn tokenizer_spec(channels: usize, depth: usize) -> AutoencoderSpec {
    AutoencoderSpec { channels, base_width: 16, res_blocks: 1, latent_dim: 16, codebook_size: 128, depth, ..Default::default() }
}

fn tokenizer_train(epochs: usize) -> TokenizerTrainConfig {
    TokenizerTrainConfig { lr: 2e-3, batch_size: 32, epochs, dead_after: 20, seed: 0, ..Default::default() }
}

fn backbone(classes: usize) -> BackboneConfig {
    BackboneConfig {
        layers: AR_LAYERS,
        hidden: AR_HIDDEN,
        heads: 4,
        dropout: 0.1,
        vocab: 128,
        classes,
        max_seq_len: 64,
        ..Default::default()
    }
}

fn ar_train(epochs: usize) -> TrainConfig {
    TrainConfig { base_lr: 8e-3, batch_size: 32, epochs, seed: 0, ..Default::default() }
}

fn fit_tokenizer(name: &str, images: &[Image], spec: AutoencoderSpec, epochs: usize) -> Result<Tokenizer, String> {
    let t = Instant::now();
    let (tok, _) = train_tokenizer(images, spec, &tokenizer_train(epochs), |e| {
        eprintln!("    [{name}] epoch {}: recon_l2 {:.5} usage {:.2?}", e.epoch, e.recon_l2, e.usage);
    })
    .map_err(err)?;
    eprintln!("    [{name}] trained in {:.0} s", t.elapsed().as_secs_f64());
    Ok(tok)
}

fn fit_transformer(
    name: &str,
    config: BackboneConfig,
    placement: HeadPlacement,
    grids: &[CodeGrid],
    conds: &[Option<u32>],
    epochs: usize,
) -> Result<(Transformer, TrainLog), String> {
    let t = Instant::now();
    let mut model = Transformer::init(config, placement, 0).map_err(err)?;
    let log = train_transformer(&mut model, grids, conds, &ar_train(epochs), |epoch, ce| {
        eprintln!("    [{name}] epoch {epoch}: per-depth CE {ce:.4?}");
    })
    .map_err(err)?;
    eprintln!("    [{name}] trained in {:.0} s", t.elapsed().as_secs_f64());
    Ok((model, log))
}

/// Shape-image models shared between criteria.
struct Shapes {
    data: Dataset,
    tokenizers: BTreeMap<usize, OnceCell<Result<Tokenizer, String>>>,
    grids: OnceCell<Result<Vec<CodeGrid>, String>>,
    models: BTreeMap<&'static str, OnceCell<Result<(Transformer, TrainLog), String>>>,
}

impl Shapes {
    fn new() -> Result<Self, String> {
        let spec = DatasetSpec { size: DATASET_SIZE, ..Default::default() };
        Ok(Self {
            data: build_dataset(&spec).map_err(err)?,
            tokenizers: [1, 2, 4].into_iter().map(|d| (d, OnceCell::new())).collect(),
            grids: OnceCell::new(),
            models: ["dnd", "vertical", "parallel"].into_iter().map(|v| (v, OnceCell::new())).collect(),
        })
    }

    fn tokenizer(&self, depth: usize) -> Result<&Tokenizer, String> {
        self.tokenizers[&depth]
            .get_or_init(|| fit_tokenizer(&format!("shapes d={depth}"), self.data.train_images(), tokenizer_spec(3, depth), SHAPE_TOK_EPOCHS))
            .as_ref()
            .map_err(Clone::clone)
    }

    /// Depth-2 grids of the whole dataset, train split first.
    fn grids(&self) -> Result<&[CodeGrid], String> {
        self.grids
            .get_or_init(|| self.tokenizer(2)?.tokenize_batch(&self.data.images, 2).map_err(err))
            .as_deref()
            .map_err(Clone::clone)
    }

    fn model(&self, variant: &'static str) -> Result<&(Transformer, TrainLog), String> {
        self.models[variant]
            .get_or_init(|| {
                // parallel heads all read the final layer whatever the list says
                let layers = transformer::default_placement(AR_LAYERS, 2).map_err(err)?;
                let v: Variant = variant.parse().map_err(err)?;
                let grids = &self.grids()?[..self.data.train];
                let conds = label_conditions(self.data.train_labels());
                fit_transformer(variant, backbone(8), HeadPlacement::new(v, layers), grids, &conds, SHAPE_AR_EPOCHS)
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    fn val_ce(&self, variant: &'static str) -> Result<Vec<f64>, String> {
        let (model, _) = self.model(variant)?;
        let grids = &self.grids()?[self.data.train..];
        model.evaluate(grids, &label_conditions(self.data.val_labels()), 64).map_err(err)
    }
}

/// Text-image tokenizer and unconditional transformer.
struct Text {
    data: Dataset,
    tokenizer: Tokenizer,
    model: Transformer,
}

impl Text {
    fn new() -> Result<Self, String> {
        let spec = DatasetSpec { kind: DatasetKind::Text, size: DATASET_SIZE, ..Default::default() };
        let data = build_dataset(&spec).map_err(err)?;
        let tokenizer = fit_tokenizer("text d=2", data.train_images(), tokenizer_spec(1, 2), TEXT_TOK_EPOCHS)?;
        let grids = tokenizer.tokenize_batch(data.train_images(), 2).map_err(err)?;
        let placement = HeadPlacement::new(Variant::Dnd, transformer::default_placement(AR_LAYERS, 2).map_err(err)?);
        let conds = vec![None; grids.len()];
        let (model, _) = fit_transformer("text dnd", backbone(0), placement, &grids, &conds, TEXT_AR_EPOCHS)?;
        Ok(Self { data, tokenizer, model })
    }
}

struct Ctx {
    shapes: OnceCell<Result<Shapes, String>>,
    text: OnceCell<Result<Text, String>>,
}

impl Ctx {
    fn shapes(&self) -> Result<&Shapes, String> {
        self.shapes.get_or_init(Shapes::new).as_ref().map_err(Clone::clone)
    }

    fn text(&self) -> Result<&Text, String> {
        self.text.get_or_init(Text::new).as_ref().map_err(Clone::clone)
    }
}

fn c1_icr(_: &Ctx) -> Outcome {
    let fine = icr(8192, 16, 1).map_err(err)? * 100.0;
    let coarse = icr_bits(128.0, 8).map_err(err)? * 100.0;
    // the cross-check value is quoted to one decimal place
    let coarse_quoted = (coarse * 10.0).round() / 10.0;
    let pass = (fine - 0.21).abs() <= 0.01 && (coarse_quoted - 8.3).abs() <= 0.01;
    Ok((pass, format!("icr(8192,16,1) = {fine:.4}%, 128 bits at f=8 = {coarse:.4}% (quoted {coarse_quoted:.1}%)")))
}

/// Exhaustive argmin with the lowest index winning ties.
fn oracle_codes(v: &[f64], entries: &[Vec<f64>], depth: usize) -> Vec<u32> {
    let mut r = v.to_vec();
    let mut codes = Vec::new();
    for _ in 0..depth {
        let mut best = (0usize, f64::INFINITY);
        for (k, e) in entries.iter().enumerate() {
            let dist: f64 = r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.1 {
                best = (k, dist);
            }
        }
        r.iter_mut().zip(&entries[best.0]).for_each(|(a, b)| *a -= b);
        codes.push(best.0 as u32);
    }
    codes
}

fn c2_quantizer(_: &Ctx) -> Outcome {
    let (c, n, depth, side) = (16, 64, 4, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut entries: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    // duplicated entries make exact ties reachable
    entries[40] = entries[3].clone();
    entries[63] = entries[17].clone();
    let codebook = Codebook::new(n, c, entries.concat()).map_err(err)?;
    let values: Vec<f64> = (0..side * side)
        .flat_map(|i| {
            let near = if i % 4 == 0 { Some(&entries[[3, 17][i % 8 / 4]]) } else { None };
            let noise: Vec<f64> = (0..c).map(|_| rng.random_range(-1.5..1.5)).collect();
            match near {
                Some(e) => e.iter().zip(&noise).map(|(a, b)| a + 0.01 * b).collect::<Vec<_>>(),
                None => noise,
            }
        })
        .collect();
    let map = FeatureMap::new(side, side, c, values).map_err(err)?;
    let (grid, traces) = quantize_map_traced(&map, &codebook, depth).map_err(err)?;
    let recon = dequantize(&grid, &codebook).map_err(err)?;
    let (mut mismatches, mut worst) = (0usize, 0.0f64);
    for p in 0..map.positions() {
        if grid.at(p) != oracle_codes(map.vector(p), &entries, depth).as_slice() {
            mismatches += 1;
        }
        let v = map.vector(p);
        let diff: f64 = recon
            .vector(p)
            .iter()
            .zip(traces[p].last())
            .zip(v)
            .map(|((q, r), x)| (q + r - x).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    let pass = mismatches == 0 && worst <= 1e-6;
    Ok((pass, format!("{} vectors, {mismatches} code mismatches, worst relative residual error {worst:.2e}", map.positions())))
}

fn val_l2(tok: &Tokenizer, images: &[Image], depth: usize) -> Result<f64, String> {
    let out = tok.reconstruct_batch(images, depth).map_err(err)?;
    Ok(out.iter().map(|(_, l2)| l2).sum::<f64>() / out.len() as f64)
}

fn c3_recon(ctx: &Ctx) -> Outcome {
    let s = ctx.shapes()?;
    let val = s.data.val_images();
    let l: Vec<f64> = [1, 2, 4].iter().map(|&d| val_l2(s.tokenizer(d)?, val, d)).collect::<Result<_, _>>()?;
    let pass = l[2] <= l[1] * 1.05 && l[1] <= l[0] * 1.05;
    Ok((pass, format!("val L2 d=1 {:.5}, d=2 {:.5}, d=4 {:.5}", l[0], l[1], l[2])))
}

fn c4_norms(ctx: &Ctx) -> Outcome {
    let s = ctx.shapes()?;
    let tok = s.tokenizer(4)?;
    let grids = tok.tokenize_batch(s.data.val_images(), 4).map_err(err)?;
    let medians: Vec<f64> = norm_stats(&tok.codebook, &grids).map_err(err)?.iter().map(|n| n.median).collect();
    let pass = medians.windows(2).all(|w| w[1] < w[0] * 1.01);
    Ok((pass, format!("median selected-code norm per depth {medians:.4?}")))
}

fn c5_depth_ce(ctx: &Ctx) -> Outcome {
    let (_, log) = ctx.shapes()?.model("dnd")?;
    let last = log.last_epoch().ok_or("empty training log")?;
    let ce = log.epoch_means(last).ok_or("empty final epoch")?;
    Ok((ce[1] < ce[0], format!("dnd final-epoch mean CE depth 1 {:.4}, depth 2 {:.4}", ce[0], ce[1])))
}

fn c6_passes(ctx: &Ctx) -> Outcome {
    let (trained, _) = ctx.shapes()?.model("dnd")?;
    let d4 = Transformer::init(
        backbone(8),
        HeadPlacement::new(Variant::Dnd, transformer::default_placement(AR_LAYERS, 4).map_err(err)?),
        6,
    )
    .map_err(err)?;
    let mut lines = Vec::new();
    let mut pass = true;
    for (model, d) in [(trained, 2), (&d4, 4)] {
        for cfg_scale in [1.0, 3.0] {
            let req = SampleRequest { cfg_scale, ..SampleRequest::new(Some(2), 8, 8, d, 7) };
            let out = sample_codegrid(model, &req).map_err(err)?;
            let guide = if cfg_scale == 1.0 { 0 } else { 64 };
            pass &= out.passes == 64 && out.guide_passes == guide && out.grid.codes.len() == 64 * d;
            lines.push(format!("d={d} t={cfg_scale}: {} + {} passes, {} codes", out.passes, out.guide_passes, out.grid.codes.len()));
        }
    }
    Ok((pass, lines.join("; ")))
}

fn c7_cfg(ctx: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut exact = true;
    for _ in 0..1000 {
        let lu: Vec<f32> = (0..128).map(|_| rng.random_range(-20.0..20.0)).collect();
        let lc: Vec<f32> = (0..128).map(|_| rng.random_range(-20.0..20.0)).collect();
        exact &= cfg_combine(&lu, &lc, 1.0).map_err(err)? == lc && cfg_combine(&lu, &lc, 0.0).map_err(err)? == lu;
    }
    let example = cfg_combine(&[0.0, 1.0], &[2.0, 1.0], 2.0).map_err(err)?;
    let (model, _) = ctx.shapes()?.model("dnd")?;
    let base = SampleRequest::new(Some(5), 8, 8, 2, 11);
    let plain = sample_codegrid(model, &base).map_err(err)?.grid;
    let unit = sample_codegrid(model, &SampleRequest { cfg_scale: 1.0, ..base }).map_err(err)?.grid;
    let null = sample_codegrid(model, &SampleRequest { condition: None, ..base }).map_err(err)?.grid;
    let zero = sample_codegrid(model, &SampleRequest { cfg_scale: 0.0, ..base }).map_err(err)?.grid;
    let pass = exact && example == [4.0, 1.0] && plain == unit && null == zero;
    Ok((
        pass,
        format!(
            "1000 random logit pairs bitwise exact: {exact}; [4,1] example gives {example:?}; \
             sampled t=1 equals conditional: {}; t=0 equals null condition: {}",
            plain == unit,
            null == zero
        ),
    ))
}

struct Probe {
    name: String,
    analytic: f64,
    numeric: f64,
}

impl Probe {
    fn error(&self) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(1e-7)
    }
}

fn pick(params: &ParamStore<f64>, group: impl Fn(&str) -> bool, count: usize, rng: &mut ChaCha8Rng) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = params.ids().filter(|&id| group(&params.get(id).name)).collect();
    (0..count)
        .map(|_| {
            let id = *ids.choose(rng).expect("group is not empty");
            (id, rng.random_range(0..params.value(id).numel()))
        })
        .collect()
}

fn probe_all(
    params: &mut ParamStore<f64>,
    analytic: &ParamStore<f64>,
    picks: &[(ParamId, usize)],
    loss: impl Fn(&ParamStore<f64>) -> f64,
) -> Vec<Probe> {
    picks
        .iter()
        .map(|&(id, index)| Probe {
            name: format!("{}[{index}]", params.get(id).name),
            analytic: analytic.grad(id)[index],
            numeric: central_difference(params, id, index, 1e-5, &loss),
        })
        .collect()
}

fn c8_gradients(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let spec = AutoencoderSpec {
        height: 8,
        width: 8,
        downscale: 4,
        latent_dim: 4,
        base_width: 4,
        res_blocks: 1,
        codebook_size: 16,
        depth: 2,
        ..Default::default()
    };
    let mut tok: ParamStore<f64> = tokenizer::init_params(&spec, &mut rng);
    let codebook = Codebook::random_uniform(16, 4, 0.5, &mut rng).map_err(err)?;
    let images: Vec<Image> = (0..2)
        .map(|_| Image::new(8, 8, 3, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let batch = images_to_tensor::<f64>(&images).map_err(err)?;
    let mut tape = Tape::new();
    let live = BridgeMode::Live { codebook: &codebook, depth: 2 };
    let (vars, bridge) = loss_on_tape(&mut tape, &tok, &spec, &batch, live, 0.25).map_err(err)?;
    let bridge = bridge.ok_or("live mode builds a bridge")?;
    let mut tok_grads = tok.clone();
    tape.backward(vars.total).accumulate_into(&mut tok_grads);
    let tok_loss = |ps: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let (v, _) = loss_on_tape(&mut tape, ps, &spec, &batch, BridgeMode::Frozen(&bridge), 0.25).expect("finite");
        tape.value(v.total).item()
    };
    let mut picks = pick(&tok, |n| n.starts_with("enc."), 4, &mut rng);
    picks.extend(pick(&tok, |n| n.starts_with("dec."), 4, &mut rng));
    let mut probes = probe_all(&mut tok, &tok_grads, &picks, tok_loss);

    let config = BackboneConfig {
        layers: 4,
        hidden: 16,
        heads: 2,
        dropout: 0.0,
        vocab: 12,
        classes: 3,
        max_seq_len: 9,
        ..Default::default()
    };
    let placement = HeadPlacement::new(Variant::Dnd, vec![2, 3, 4]);
    let mut tf: ParamStore<f64> = transformer::init_params(&config, &placement, &mut rng);
    let grids: Vec<CodeGrid> = (0..2)
        .map(|_| CodeGrid::new(3, 3, 3, 12, (0..27).map(|_| rng.random_range(0..12)).collect()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let conds = [Some(1), None];
    let tf_loss = |ps: &ParamStore<f64>, grads: Option<&mut ParamStore<f64>>| {
        let mut tape = Tape::new();
        let v = forward_on_tape(&mut tape, ps, &config, &placement, &grids, &conds, None).expect("valid batch");
        if let Some(g) = grads {
            tape.backward(v.total).accumulate_into(g);
        }
        tape.value(v.total).item()
    };
    let mut tf_grads = tf.clone();
    tf_loss(&tf, Some(&mut tf_grads));
    let backbone = |n: &str| n == "tok_embed" || n == "cond_embed" || n.starts_with('l');
    let mut picks = pick(&tf, backbone, 4, &mut rng);
    picks.extend(pick(&tf, |n| n.starts_with("head"), 4, &mut rng));
    picks.extend(pick(&tf, |n| n.starts_with("inj"), 4, &mut rng));
    probes.extend(probe_all(&mut tf, &tf_grads, &picks, |ps| tf_loss(ps, None)));

    let worst = probes.iter().max_by(|a, b| a.error().total_cmp(&b.error())).expect("20 probes");
    let pass = probes.len() == 20 && probes.iter().all(|p| p.error() < 1e-3);
    Ok((
        pass,
        format!(
            "{} probes, worst relative error {:.2e} at {} (analytic {:.6e}, numeric {:.6e})",
            probes.len(),
            worst.error(),
            worst.name,
            worst.analytic,
            worst.numeric
        ),
    ))
}

fn c9_variants(ctx: &Ctx) -> Outcome {
    let s = ctx.shapes()?;
    let total = |v| -> Result<f64, String> { Ok(s.val_ce(v)?.iter().sum::<f64>() / 2.0) };
    let (dnd, vertical, parallel) = (total("dnd")?, total("vertical")?, total("parallel")?);
    let ordered = dnd <= vertical * 1.02 && vertical <= parallel * 1.02;
    Ok((
        dnd <= parallel * 1.02,
        format!(
            "val total CE dnd {dnd:.4}, vertical {vertical:.4}, parallel {parallel:.4}; \
             full ordering within 2%: {ordered} (reported); dnd <= parallel asserted"
        ),
    ))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn c10_temperature(ctx: &Ctx) -> Outcome {
    let t = ctx.text()?;
    let texts: Vec<String> = t
        .data
        .train_labels()
        .iter()
        .filter_map(|l| match l {
            Label::Text(s) => Some(strip_padding(s).to_string()),
            Label::Class(_) => None,
        })
        .collect();
    let font = GlyphFont::builtin();
    let ngram = fit_ngram(&texts, 2, font.chars(), 1.0).map_err(err)?;
    let spec = TextImageSpec::default();
    let (h, w) = t.tokenizer.spec.grid();
    let ppl = |model: &Transformer, temperature: f64, seed: u64| -> Result<Vec<f64>, String> {
        let req = SampleRequest { temperature, ..SampleRequest::new(None, h, w, 2, seed) };
        let samples = ocr_samples(&t.tokenizer, model, &spec, TEXT_SAMPLES, req).map_err(err)?;
        samples.iter().map(|s| reading_ppl(&ngram, s).map_err(err)).collect()
    };
    let untrained = Transformer::init(t.model.config, t.model.placement.clone(), 99).map_err(err)?;
    let cold = ppl(&t.model, 0.1, 10_000)?;
    let warm = ppl(&t.model, 1.0, 20_000)?;
    let noise = ppl(&untrained, 1.0, 30_000)?;
    let p1 = welch_less_p(&cold, &warm).map_err(err)?;
    let p2 = welch_less_p(&cold, &noise).map_err(err)?;
    let p3 = welch_less_p(&warm, &noise).map_err(err)?;
    let pass = p1 < 0.01 && p2 < 0.01 && p3 < 0.01;
    Ok((
        pass,
        format!(
            "mean bigram ppl T=0.1 {:.3}, T=1.0 {:.3}, untrained {:.3}; one-sided p: {p1:.2e}, {p2:.2e}, {p3:.2e}",
            mean(&cold),
            mean(&warm),
            mean(&noise)
        ),
    ))
}

/// Longest common subsequence by enumerating every subsequence of `a`.
fn brute_lcs(a: &[u8], b: &[u8]) -> usize {
    let is_subsequence = |s: &[u8]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u8> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn c11_ocr(_: &Ctx) -> Outcome {
    let font = GlyphFont::builtin();
    let spec = TextImageSpec::default();
    let mut ocr_wrong = 0;
    for s in gen_corpus(500, 11) {
        let (img, layout) = render_text_image(&s, &spec, &font);
        if ocr_decode(&img, &font, &spec).map_err(err)?.text != layout.text() {
            ocr_wrong += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rouge_wrong = 0;
    for _ in 0..1000 {
        let mut seq = || -> Vec<u8> { (0..rng.random_range(0..=12)).map(|_| rng.random_range(0..4)).collect() };
        let (a, b) = (seq(), seq());
        let lcs = brute_lcs(&a, &b) as f64;
        let expected = if a.is_empty() || b.is_empty() || lcs == 0.0 {
            0.0
        } else {
            let (p, r) = (lcs / a.len() as f64, lcs / b.len() as f64);
            2.0 * p * r / (p + r)
        };
        if rouge_l(&a, &b) != expected {
            rouge_wrong += 1;
        }
    }
    let pass = ocr_wrong == 0 && rouge_wrong == 0;
    Ok((pass, format!("OCR mismatches {ocr_wrong}/500; rouge_l mismatches {rouge_wrong}/1000")))
}

const PIPELINE: &str = r#"
seed = 12

[dataset]
size = 120
val_fraction = 0.2

[autoencoder]
base_width = 8
res_blocks = 1
latent_dim = 8
codebook_size = 32
depth = 2

[tokenizer_train]
lr = 0.002
batch_size = 16
epochs = 2
dead_after = 8

[backbone]
layers = 2
hidden = 32
heads = 2

[model]
variant = "dnd"
depth = 2

[train]
base_lr = 0.008
batch_size = 16
epochs = 2

[sample]
count = 3
class = 4
cfg_scale = 1.5
temperature = 0.8
top_k = 20

[eval]
samples = 0
"#;

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable directory") {
            let path = entry.expect("directory entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism(_: &Ctx) -> Outcome {
    let roots = [tempfile::tempdir().map_err(err)?, tempfile::tempdir().map_err(err)?];
    for root in &roots {
        let mut cfg = RunConfig::from_toml(PIPELINE).and_then(|c| c.resolve(None)).map_err(err)?;
        cfg.paths = Paths::under(root.path());
        run_datagen(&cfg).map_err(err)?;
        run_train_tokenizer(&cfg, |_| {}).map_err(err)?;
        run_train_ar(&cfg, |_, _| {}).map_err(err)?;
        run_sample(&cfg).map_err(err)?;
        run_eval(&cfg).map_err(err)?;
    }
    let (a, b) = (files_under(roots[0].path()), files_under(roots[1].path()));
    let differing: Vec<String> = a
        .iter()
        .filter(|rel| std::fs::read(roots[0].path().join(rel)).ok() != std::fs::read(roots[1].path().join(rel)).ok())
        .map(|rel| rel.display().to_string())
        .collect();
    let kinds = ["dndk", "dndc", "ppm"].map(|ext| a.iter().filter(|p| p.extension().is_some_and(|e| e == ext)).count());
    let pass = a == b && differing.is_empty() && kinds.iter().all(|&k| k > 0);
    Ok((
        pass,
        format!(
            "{} files compared ({} checkpoints, {} grids, {} images), differing: {differing:?}",
            a.len(),
            kinds[0],
            kinds[1],
            kinds[2]
        ),
    ))
}

type Criterion = (usize, &'static str, fn(&Ctx) -> Outcome);

const CRITERIA: [Criterion; 12] = [
    (1, "ICR values", c1_icr),
    (2, "residual quantizer oracle", c2_quantizer),
    (3, "reconstruction improves with depth", c3_recon),
    (4, "deeper codes have smaller norms", c4_norms),
    (5, "per-depth loss ordering", c5_depth_ce),
    (6, "one backbone pass per position", c6_passes),
    (7, "CFG identities", c7_cfg),
    (8, "finite-difference gradients", c8_gradients),
    (9, "variant ablation", c9_variants),
    (10, "temperature lowers text perplexity", c10_temperature),
    (11, "OCR and rouge_l plumbing", c11_ocr),
    (12, "pipeline determinism", c12_determinism),
];

fn main() -> std::process::ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let ctx = Ctx { shapes: OnceCell::new(), text: OnceCell::new() };
    let start = Instant::now();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let (pass, detail) = run(&ctx).unwrap_or_else(|e| (false, format!("error: {e}")));
        println!("{} {id:>2} {name}: {detail} [{:.1} s]", if pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64());
        if !pass {
            failed.push(id);
        }
    }
    println!("acceptance: {} failed {failed:?}, total {:.0} s", failed.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        std::process::ExitCode::SUCCESS
    } else {
        std::process::ExitCode::FAILURE
    }
}
