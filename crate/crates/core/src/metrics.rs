//! Evaluation metrics: reconstruction error, template OCR over the bitmap
//! font, Rouge-L, a smoothed character n-gram language model, and the
//! aggregated evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::codec::{norm_stats, usage_histogram, CodeGrid};
use crate::datagen::{Dataset, DatasetKind, GlyphFont, Label, TextImageSpec, CELL};
use crate::error::{invalid, io_at, Error, Result};
use crate::image::Image;
use crate::sampler::{sample_codegrid, SampleRequest};
use crate::tokenizer::Tokenizer;
use crate::transformer::Transformer;

/// Mean squared error over all samples.
pub fn recon_l2(a: &Image, b: &Image) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let sum: f64 = a.data.iter().zip(&b.data).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
    Ok(sum / a.data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcrResult {
    pub text: String,
    /// Distance from each cell to its best-matching glyph template.
    pub distances: Vec<f64>,
    pub blanks: usize,
}

/// Renders each glyph as an `8 x 8` intensity template and decodes cells by
/// nearest template.
#[derive(Debug, Clone)]
pub struct TemplateOcr {
    chars: Vec<char>,
    templates: Vec<Vec<f64>>,
    /// Cells farther than this from every template decode to space.
    pub blank_threshold: f64,
}

impl TemplateOcr {
    pub fn new(font: &GlyphFont, spec: &TextImageSpec) -> Self {
        let fg = spec.foreground as f64 / 255.0;
        let bg = spec.background as f64 / 255.0;
        let templates: Vec<Vec<f64>> = (0..font.len())
            .map(|g| font.cell(g).iter().map(|&bit| if bit == 1 { fg } else { bg }).collect())
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..templates.len() {
            for j in i + 1..templates.len() {
                min = min.min(l2(&templates[i], &templates[j]));
            }
        }
        Self { chars: font.chars().to_vec(), templates, blank_threshold: min / 2.0 }
    }

    pub fn decode(&self, image: &Image, spec: &TextImageSpec) -> Result<OcrResult> {
        if image.height < spec.rows() * CELL || image.width < spec.cols() * CELL {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image is smaller than the {}x{} text grid",
                image.height,
                image.width,
                spec.rows(),
                spec.cols()
            )));
        }
        let mut text = String::with_capacity(spec.capacity());
        let mut distances = Vec::with_capacity(spec.capacity());
        let mut blanks = 0;
        let mut cell = vec![0.0; CELL * CELL];
        for r in 0..spec.rows() {
            for c in 0..spec.cols() {
                for y in 0..CELL {
                    for x in 0..CELL {
                        cell[y * CELL + x] = image.luma(r * CELL + y, c * CELL + x) as f64;
                    }
                }
                let (best, dist) = self
                    .templates
                    .iter()
                    .enumerate()
                    .map(|(g, t)| (g, l2(t, &cell)))
                    .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
                let ch = if dist > self.blank_threshold { ' ' } else { self.chars[best] };
                if ch == ' ' {
                    blanks += 1;
                }
                text.push(ch);
                distances.push(dist);
            }
        }
        Ok(OcrResult { text, distances, blanks })
    }
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

pub fn ocr_decode(image: &Image, font: &GlyphFont, spec: &TextImageSpec) -> Result<OcrResult> {
    TemplateOcr::new(font, spec).decode(image, spec)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure; zero when either side is empty.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Token granularity for [`rouge_l_text`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeLevel {
    #[default]
    Word,
    Char,
}

/// Rouge-L over whitespace-split words, or over non-space characters.
pub fn rouge_l_text(candidate: &str, reference: &str, level: RougeLevel) -> f64 {
    match level {
        RougeLevel::Word => {
            let c: Vec<&str> = candidate.split_whitespace().collect();
            let r: Vec<&str> = reference.split_whitespace().collect();
            rouge_l(&c, &r)
        }
        RougeLevel::Char => {
            let c: Vec<char> = candidate.chars().filter(|c| !c.is_whitespace()).collect();
            let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
            rouge_l(&c, &r)
        }
    }
}

/// Rouge-L between the OCR reading of `image` and `reference`.
pub fn rocr(image: &Image, reference: &str, ocr: &TemplateOcr, spec: &TextImageSpec, level: RougeLevel) -> Result<f64> {
    Ok(rouge_l_text(&ocr.decode(image, spec)?.text, reference, level))
}

/// Character n-gram model with Laplace-smoothed conditionals. Contexts never
/// seen in training (and positions with a short history) use the smoothed
/// unigram distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    pub order: usize,
    pub vocab: Vec<char>,
    unigram: Vec<f64>,
    conditionals: HashMap<String, Vec<f64>>,
    pub corpus_hash: String,
}

impl NgramModel {
    /// Model from explicit probability tables (rows indexed like `vocab`).
    pub fn from_tables(
        order: usize,
        vocab: Vec<char>,
        unigram: Vec<f64>,
        conditionals: HashMap<String, Vec<f64>>,
    ) -> Result<Self> {
        if order == 0 || vocab.is_empty() {
            return Err(invalid("n-gram order and vocabulary must be non-empty"));
        }
        let check = |row: &[f64], what: &str| -> Result<()> {
            let sum: f64 = row.iter().sum();
            if row.len() != vocab.len() || (sum - 1.0).abs() > 1e-9 || row.iter().any(|p| *p < 0.0) {
                return Err(invalid(format!("{what} is not a distribution over the vocabulary")));
            }
            Ok(())
        };
        check(&unigram, "unigram")?;
        for (ctx, row) in &conditionals {
            if ctx.chars().count() != order - 1 {
                return Err(invalid(format!("context {ctx:?} does not have length {}", order - 1)));
            }
            check(row, &format!("row {ctx:?}"))?;
        }
        Ok(Self { order, vocab, unigram, conditionals, corpus_hash: String::new() })
    }

    fn index(&self, c: char) -> Result<usize> {
        self.vocab.iter().position(|&v| v == c).ok_or_else(|| invalid(format!("character {c:?} outside vocabulary")))
    }

    /// `p(c | context)`; `context` holds up to `order - 1` preceding characters.
    pub fn prob(&self, context: &[char], c: char) -> Result<f64> {
        let k = self.index(c)?;
        if self.order > 1 && context.len() >= self.order - 1 {
            let ctx: String = context[context.len() - (self.order - 1)..].iter().collect();
            if let Some(row) = self.conditionals.get(&ctx) {
                return Ok(row[k]);
            }
        }
        Ok(self.unigram[k])
    }

    /// `exp(-(1/M) sum log p(c_m | context))`.
    pub fn ppl(&self, text: &str) -> Result<f64> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(invalid("perplexity of empty text"));
        }
        let mut log_sum = 0.0;
        for m in 0..chars.len() {
            let start = m.saturating_sub(self.order - 1);
            log_sum += self.prob(&chars[start..m], chars[m])?.ln();
        }
        Ok((-log_sum / chars.len() as f64).exp())
    }

    /// Sum of conditional probabilities for one context (for invariant checks).
    pub fn context_mass(&self, context: &str) -> f64 {
        self.conditionals.get(context).unwrap_or(&self.unigram).iter().sum()
    }

    pub fn contexts(&self) -> impl Iterator<Item = &str> {
        self.conditionals.keys().map(String::as_str)
    }
}

/// Cell reading without the blank cells that pad the layout after the
/// last character.
pub fn strip_padding(reading: &str) -> &str {
    reading.trim_end_matches(' ')
}

/// Perplexity of an OCR reading with its padding stripped. A reading with
/// no characters left has nothing to score and gets the uniform-model
/// value `|vocab|`.
pub fn reading_ppl(model: &NgramModel, reading: &str) -> Result<f64> {
    match strip_padding(reading) {
        "" => Ok(model.vocab.len() as f64),
        text => model.ppl(text),
    }
}

/// Fits counts over `corpus` with add-`alpha` smoothing over `vocab`.
pub fn fit_ngram(corpus: &[String], order: usize, vocab: &[char], alpha: f64) -> Result<NgramModel> {
    if order == 0 || vocab.is_empty() || !(alpha > 0.0) {
        return Err(invalid("n-gram order, vocabulary and alpha must be positive"));
    }
    let v = vocab.len();
    let index = |c: char| vocab.iter().position(|&x| x == c).ok_or_else(|| invalid(format!("{c:?} outside vocabulary")));
    let mut uni = vec![0.0; v];
    let mut ctx_counts: HashMap<String, Vec<f64>> = HashMap::new();
    let mut hasher = Sha256::new();
    for line in corpus {
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        let chars: Vec<char> = line.chars().collect();
        for m in 0..chars.len() {
            let k = index(chars[m])?;
            uni[k] += 1.0;
            if order > 1 && m >= order - 1 {
                let ctx: String = chars[m + 1 - order..m].iter().collect();
                ctx_counts.entry(ctx).or_insert_with(|| vec![0.0; v])[k] += 1.0;
            }
        }
    }
    let smooth = |counts: &[f64]| -> Vec<f64> {
        let total: f64 = counts.iter().sum();
        counts.iter().map(|c| (c + alpha) / (total + alpha * v as f64)).collect()
    };
    let unigram = smooth(&uni);
    let conditionals = ctx_counts.into_iter().map(|(k, c)| (k, smooth(&c))).collect();
    Ok(NgramModel {
        order,
        vocab: vocab.to_vec(),
        unigram,
        conditionals,
        corpus_hash: hex::encode(hasher.finalize()),
    })
}

/// One-sided Welch t-test p-value for `mean(a) < mean(b)`.
pub fn welch_less_p(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("Welch test needs at least two values per sample"));
    }
    let moments = |v: &[f64]| {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0), n)
    };
    let (ma, va, na) = moments(a);
    let (mb, vb, nb) = moments(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma < mb { 0.0 } else { 1.0 });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
    Ok(dist.cdf(t))
}

/// Class conditions of shape labels; text labels are unconditional.
pub fn label_conditions(labels: &[Label]) -> Vec<Option<u32>> {
    labels.iter().map(Label::class).collect()
}

/// Knobs of [`eval_report`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fresh samples drawn for the text metrics.
    pub samples: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub ngram_order: usize,
    pub rouge_level: RougeLevel,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 16,
            temperature: 1.0,
            top_k: 0,
            cfg_scale: 1.0,
            seed: 0,
            batch_size: 64,
            ngram_order: 2,
            rouge_level: RougeLevel::Word,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub metric: String,
    /// Quantization depth the value refers to, if any.
    pub depth: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    fn push(&mut self, metric: &str, depth: Option<usize>, value: f64) {
        self.rows.push(ReportRow { metric: metric.into(), depth, value });
    }

    pub fn get(&self, metric: &str, depth: Option<usize>) -> Option<f64> {
        self.rows.iter().find(|r| r.metric == metric && r.depth == depth).map(|r| r.value)
    }

    /// Columns `metric, depth, value`; `depth` is empty for whole-model rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,depth,value\n");
        for r in &self.rows {
            let depth = r.depth.map(|d| d.to_string()).unwrap_or_default();
            writeln!(s, "{},{depth},{}", r.metric, r.value).expect("string write");
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(
            "Evaluation report (desk-scale proxies: recon_l2 stands in for rFID, n-gram perplexity for LLM perplexity)\n",
        );
        for r in &self.rows {
            let label = match r.depth {
                Some(d) => format!("{} [depth {d}]", r.metric),
                None => r.metric.clone(),
            };
            writeln!(s, "  {label:<28} {:.6}", r.value).expect("string write");
        }
        s
    }

    /// Writes `report.csv` and `report.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_at(dir))?;
        let csv = dir.join("report.csv");
        std::fs::write(&csv, self.to_csv()).map_err(io_at(&csv))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_text()).map_err(io_at(&txt))
    }
}

/// Draws `count` unconditional grids from a text model, decodes them and
/// reads them back with the template OCR.
pub fn ocr_samples(
    tokenizer: &Tokenizer,
    model: &Transformer,
    spec: &TextImageSpec,
    count: usize,
    request: SampleRequest,
) -> Result<Vec<String>> {
    let ocr = TemplateOcr::new(&GlyphFont::builtin(), spec);
    let grids = (0..count)
        .map(|i| Ok(sample_codegrid(model, &SampleRequest { seed: request.seed.wrapping_add(i as u64), ..request })?.grid))
        .collect::<Result<Vec<_>>>()?;
    tokenizer
        .detokenize_batch(&grids)?
        .iter()
        .map(|img| Ok(ocr.decode(img, spec)?.text))
        .collect()
}

/// Reconstruction, codebook and (with a model) likelihood metrics on the
/// validation split. Text datasets add OCR and perplexity rows.
pub fn eval_report(
    tokenizer: &Tokenizer,
    model: Option<&Transformer>,
    data: &Dataset,
    text_spec: &TextImageSpec,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let val = data.val_images();
    if val.is_empty() {
        return Err(invalid("dataset has no validation split"));
    }
    let depth = tokenizer.spec.depth;
    let grids = tokenizer.tokenize_batch(val, depth)?;
    let mut report = EvalReport::default();
    let mut recon_full = Vec::new();
    for k in 1..=depth {
        let truncated: Vec<CodeGrid> = grids.iter().map(|g| g.truncate_depth(k)).collect::<Result<_>>()?;
        let recon = tokenizer.detokenize_batch(&truncated)?;
        let mut sum = 0.0;
        for (a, b) in recon.iter().zip(val) {
            sum += recon_l2(a, b)?;
        }
        report.push("recon_l2", Some(k), sum / val.len() as f64);
        if k == depth {
            recon_full = recon;
        }
    }
    for (i, u) in usage_histogram(&grids)?.into_iter().enumerate() {
        report.push("code_usage", Some(i + 1), u);
    }
    for (i, n) in norm_stats(&tokenizer.codebook, &grids)?.into_iter().enumerate() {
        report.push("code_norm_mean", Some(i + 1), n.mean);
        report.push("code_norm_median", Some(i + 1), n.median);
    }
    if let Some(m) = model {
        let d = m.depth();
        if d > depth {
            return Err(invalid(format!("model predicts {d} depths, tokenizer emits {depth}")));
        }
        let model_grids: Vec<CodeGrid> = grids.iter().map(|g| g.truncate_depth(d)).collect::<Result<_>>()?;
        let conds = label_conditions(data.val_labels());
        let conds: Vec<Option<u32>> = if m.config.classes == 0 { vec![None; conds.len()] } else { conds };
        let ce = m.evaluate(&model_grids, &conds, cfg.batch_size)?;
        for (i, c) in ce.iter().enumerate() {
            report.push("val_ce", Some(i + 1), *c);
        }
        report.push("val_ce_total", None, ce.iter().sum::<f64>() / d as f64);
    }
    if data.kind == DatasetKind::Text {
        let texts = |labels: &[Label]| -> Vec<String> {
            labels
                .iter()
                .filter_map(|l| match l {
                    Label::Text(t) => Some(t.clone()),
                    Label::Class(_) => None,
                })
                .collect()
        };
        let train_text: Vec<String> = texts(data.train_labels()).iter().map(|t| strip_padding(t).to_string()).collect();
        let val_text = texts(data.val_labels());
        let font = GlyphFont::builtin();
        let ngram = fit_ngram(&train_text, cfg.ngram_order, font.chars(), 1.0)?;
        let ocr = TemplateOcr::new(&font, text_spec);
        let mut rocr_sum = 0.0;
        for (img, reference) in recon_full.iter().zip(&val_text) {
            rocr_sum += rocr(img, reference, &ocr, text_spec, cfg.rouge_level)?;
        }
        report.push("rocr_recon", None, rocr_sum / val_text.len() as f64);
        report.push("ppl_val_text", None, mean(&val_text.iter().map(|t| reading_ppl(&ngram, t)).collect::<Result<Vec<_>>>()?));
        if let (Some(m), true) = (model, cfg.samples > 0) {
            let (h, w) = tokenizer.spec.grid();
            let request = SampleRequest {
                cfg_scale: 1.0,
                temperature: cfg.temperature,
                top_k: cfg.top_k,
                ..SampleRequest::new(None, h, w, m.depth(), cfg.seed)
            };
            let samples = ocr_samples(tokenizer, m, text_spec, cfg.samples, request)?;
            let ppl: Vec<f64> = samples.iter().map(|t| reading_ppl(&ngram, t)).collect::<Result<_>>()?;
            report.push("ppl_samples", None, mean(&ppl));
        }
    }
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
