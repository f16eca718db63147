//! Residual vector quantization over a single shared codebook.
//!
//! A feature vector `v` is decomposed into `d` codes by repeatedly picking the
//! entry nearest to the running residual and subtracting it:
//! `r_0 = v`, `q_i = argmin_k |r_{i-1} - e_k|`, `r_i = r_{i-1} - e_{q_i}`.
//! Code grids are laid out depth-first within a spatial position, positions
//! in raster order.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{invalid, Error, Result};

const CODEGRID_MAGIC: &[u8; 4] = b"DNDC";
const CODEBOOK_MAGIC: &[u8; 4] = b"DNDB";
const FORMAT_VERSION: u16 = 1;

/// Shared table of `size` vectors of length `dim`, plus EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    entries: Vec<f64>,
    ema_counts: Vec<f64>,
    ema_sums: Vec<f64>,
    /// Consecutive updates in which each entry received no assignment.
    unused_steps: Vec<u32>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, entries: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("codebook needs at least 2 entries, got {size}")));
        }
        if dim == 0 || entries.len() != size * dim {
            return Err(Error::ShapeMismatch(format!(
                "codebook {size}x{dim} given {} values",
                entries.len()
            )));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Self {
            size,
            dim,
            entries,
            ema_counts: vec![0.0; size],
            ema_sums: vec![0.0; size * dim],
            unused_steps: vec![0; size],
        })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn random_uniform<R: Rng>(size: usize, dim: usize, bound: f64, rng: &mut R) -> Result<Self> {
        let entries = (0..size * dim).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(size, dim, entries)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &[f64] {
        &self.ema_sums
    }

    pub fn unused_steps(&self) -> &[u32] {
        &self.unused_steps
    }

    pub fn entry_norm(&self, k: usize) -> f64 {
        self.entry(k).iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Index of the entry closest to `x` in squared Euclidean distance.
    /// Ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        debug_assert_eq!(x.len(), self.dim);
        let mut best = (0, f64::INFINITY);
        for (k, e) in self.entries.chunks_exact(self.dim).enumerate() {
            let d: f64 = x.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Restores the full state, including EMA statistics.
    pub fn from_parts(
        size: usize,
        dim: usize,
        entries: Vec<f64>,
        ema_counts: Vec<f64>,
        ema_sums: Vec<f64>,
        unused_steps: Vec<u32>,
    ) -> Result<Self> {
        let mut cb = Self::new(size, dim, entries)?;
        if ema_counts.len() != size || ema_sums.len() != size * dim || unused_steps.len() != size {
            return Err(Error::ShapeMismatch("codebook EMA state".into()));
        }
        if ema_counts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) || ema_sums.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("codebook EMA state".into()));
        }
        cb.ema_counts = ema_counts;
        cb.ema_sums = ema_sums;
        cb.unused_steps = unused_steps;
        Ok(cb)
    }

    /// `DNDB` file: magic, version, `N`, `c`, `N*c` f32 entries, then the EMA
    /// state (`N` f32 counts, `N*c` f32 sums, `N` u32 idle counters).
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.size as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for x in self.entries.iter().chain(&self.ema_counts).chain(&self.ema_sums) {
            w.write_all(&(*x as f32).to_le_bytes())?;
        }
        for u in &self.unused_steps {
            w.write_all(&u.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Format("not a DNDB codebook file".into()));
        }
        check_version(read_u16(&mut r)?)?;
        let size = read_u32(&mut r)? as usize;
        let dim = read_u32(&mut r)? as usize;
        let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Ok(buf.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
        };
        let entries = read_f32s(size * dim)?;
        let counts = read_f32s(size)?;
        let sums = read_f32s(size * dim)?;
        let mut buf = vec![0u8; size * 4];
        r.read_exact(&mut buf)?;
        let unused = buf.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::from_parts(size, dim, entries, counts, sums, unused)
    }
}

/// `height x width x channels` real-valued latent map, channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(invalid("feature map dimensions must be positive"));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} map given {} values",
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        Ok(Self { height, width, channels, values })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn vector(&self, p: usize) -> &[f64] {
        &self.values[p * self.channels..(p + 1) * self.channels]
    }
}

/// `height x width x depth` code indices into a codebook of `vocab` entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub vocab: usize,
    /// Depth-first within a position, positions in raster order.
    pub codes: Vec<u32>,
}

impl CodeGrid {
    pub fn new(height: usize, width: usize, depth: usize, vocab: usize, codes: Vec<u32>) -> Result<Self> {
        if depth == 0 || height == 0 || width == 0 {
            return Err(invalid("code grid dimensions must be positive"));
        }
        if codes.len() != height * width * depth {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{depth} grid given {} codes",
                codes.len()
            )));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c as usize >= vocab) {
            return Err(Error::IndexOutOfRange { index: bad, size: vocab });
        }
        Ok(Self { height, width, depth, vocab, codes })
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// The `depth` codes at raster position `p`.
    pub fn at(&self, p: usize) -> &[u32] {
        &self.codes[p * self.depth..(p + 1) * self.depth]
    }

    pub fn code(&self, p: usize, depth: usize) -> u32 {
        self.codes[p * self.depth + depth]
    }

    /// Keeps the first `k` depths of every position.
    pub fn truncate_depth(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.depth {
            return Err(invalid(format!("cannot truncate depth {} to {k}", self.depth)));
        }
        let codes = self.codes.chunks(self.depth).flat_map(|c| c[..k].iter().copied()).collect();
        Ok(Self { depth: k, codes, ..self.clone() })
    }

    /// `DNDC` file: magic, u16 version, u32 `h, w, d, N`, then `h*w*d` u32
    /// codes in depth-first-spatial-second order. All little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODEGRID_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.height, self.width, self.depth, self.vocab] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.codes.len() * 4);
        for c in &self.codes {
            buf.extend_from_slice(&c.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEGRID_MAGIC {
            return Err(Error::Format("not a DNDC code grid file".into()));
        }
        check_version(read_u16(&mut r)?)?;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let n = read_u32(&mut r)? as usize;
        let mut buf = vec![0u8; h * w * d * 4];
        r.read_exact(&mut buf)?;
        let codes = buf.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::new(h, w, d, n, codes)
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn check_version(v: u16) -> Result<()> {
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

/// Residuals `r_0 = v, r_1, ..., r_d` of one quantized vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualTrace {
    pub residuals: Vec<Vec<f64>>,
}

impl ResidualTrace {
    pub fn input(&self) -> &[f64] {
        &self.residuals[0]
    }

    pub fn last(&self) -> &[f64] {
        self.residuals.last().expect("trace holds r_0")
    }
}

pub fn quantize_vector(v: &[f64], codebook: &Codebook, depth: usize) -> Result<(Vec<u32>, ResidualTrace)> {
    if depth < 1 {
        return Err(invalid("quantization depth must be at least 1"));
    }
    if v.len() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "vector of length {} against codebook dim {}",
            v.len(),
            codebook.dim()
        )));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("input vector component {i}")));
    }
    let mut codes = Vec::with_capacity(depth);
    let mut residuals = Vec::with_capacity(depth + 1);
    residuals.push(v.to_vec());
    for _ in 0..depth {
        let prev = residuals.last().unwrap();
        let (k, _) = codebook.nearest(prev);
        let next = prev.iter().zip(codebook.entry(k)).map(|(r, e)| r - e).collect();
        codes.push(k as u32);
        residuals.push(next);
    }
    Ok((codes, ResidualTrace { residuals }))
}

/// Position-wise [`quantize_vector`] over a whole map.
pub fn quantize_map(m: &FeatureMap, codebook: &Codebook, depth: usize) -> Result<CodeGrid> {
    Ok(quantize_map_traced(m, codebook, depth)?.0)
}

/// Like [`quantize_map`] but also returns every position's residual trace.
pub fn quantize_map_traced(
    m: &FeatureMap,
    codebook: &Codebook,
    depth: usize,
) -> Result<(CodeGrid, Vec<ResidualTrace>)> {
    if m.channels != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature map has {} channels, codebook dim is {}",
            m.channels,
            codebook.dim()
        )));
    }
    let mut codes = Vec::with_capacity(m.positions() * depth);
    let mut traces = Vec::with_capacity(m.positions());
    for p in 0..m.positions() {
        let (c, t) = quantize_vector(m.vector(p), codebook, depth)?;
        codes.extend(c);
        traces.push(t);
    }
    Ok((CodeGrid::new(m.height, m.width, depth, codebook.size(), codes)?, traces))
}

/// Sum of the selected entries at every position.
pub fn dequantize(grid: &CodeGrid, codebook: &Codebook) -> Result<FeatureMap> {
    let c = codebook.dim();
    let mut values = vec![0.0; grid.positions() * c];
    for p in 0..grid.positions() {
        let out = &mut values[p * c..(p + 1) * c];
        for &q in grid.at(p) {
            if q as usize >= codebook.size() {
                return Err(Error::IndexOutOfRange { index: q, size: codebook.size() });
            }
            out.iter_mut().zip(codebook.entry(q as usize)).for_each(|(o, e)| *o += e);
        }
    }
    FeatureMap::new(grid.height, grid.width, c, values)
}

/// Information compression ratio `d * log2(N) / (24 * f^2)`: bits kept by the
/// code grid over the bits of the 8-bit RGB image it encodes.
pub fn icr(codebook_size: u64, downscale: u32, depth: u32) -> Result<f64> {
    if codebook_size < 2 {
        return Err(invalid(format!("codebook size must be >= 2, got {codebook_size}")));
    }
    if downscale < 1 || depth < 1 {
        return Err(invalid("downscale factor and depth must be >= 1"));
    }
    let per_depth = icr_bits((codebook_size as f64).log2(), downscale)?;
    Ok(depth as f64 * per_depth)
}

/// Compression ratio of a latent that stores `bits` per spatial position at
/// downscale `f`, relative to 24-bit RGB pixels.
pub fn icr_bits(bits: f64, downscale: u32) -> Result<f64> {
    if !(bits > 0.0) || downscale < 1 {
        return Err(invalid("bits per position and downscale factor must be positive"));
    }
    let f = downscale as f64;
    Ok(bits / (24.0 * f * f))
}

/// Hyper-parameters of the exponential-moving-average codebook update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmaConfig {
    pub decay: f64,
    pub eps: f64,
    /// Updates without any assignment before an entry is re-seeded.
    pub dead_after: u32,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { decay: 0.99, eps: 1e-5, dead_after: 256 }
    }
}

/// Flat batch of `(input vector, chosen index)` pairs, collected across all
/// depths: the input at depth `i` is the residual `r_{i-1}`.
#[derive(Debug, Clone, Default)]
pub struct Assignments {
    pub dim: usize,
    pub vectors: Vec<f64>,
    pub indices: Vec<u32>,
}

impl Assignments {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: Vec::new(), indices: Vec::new() }
    }

    pub fn push(&mut self, v: &[f64], index: u32) {
        debug_assert_eq!(v.len(), self.dim);
        self.vectors.extend_from_slice(v);
        self.indices.push(index);
    }

    /// Records every depth of a trace with its codes.
    pub fn push_trace(&mut self, codes: &[u32], trace: &ResidualTrace) {
        for (q, r) in codes.iter().zip(&trace.residuals) {
            self.push(r, *q);
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

/// One EMA step. Entries that have never been assigned keep their current
/// value; entries idle for `dead_after` consecutive updates are re-seeded
/// from a random input vector of this batch.
pub fn ema_update<R: Rng>(
    codebook: &mut Codebook,
    batch: &Assignments,
    config: &EmaConfig,
    rng: &mut R,
) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("ema_update needs at least one assignment"));
    }
    if batch.dim != codebook.dim {
        return Err(Error::ShapeMismatch("assignment dim differs from codebook dim".into()));
    }
    let (n, c) = (codebook.size, codebook.dim);
    let mut counts = vec![0.0f64; n];
    let mut sums = vec![0.0f64; n * c];
    for (i, &q) in batch.indices.iter().enumerate() {
        let q = q as usize;
        if q >= n {
            return Err(Error::IndexOutOfRange { index: q as u32, size: n });
        }
        counts[q] += 1.0;
        sums[q * c..(q + 1) * c]
            .iter_mut()
            .zip(batch.vector(i))
            .for_each(|(s, v)| *s += v);
    }
    let g = config.decay;
    for k in 0..n {
        codebook.ema_counts[k] = g * codebook.ema_counts[k] + (1.0 - g) * counts[k];
        for j in 0..c {
            let s = &mut codebook.ema_sums[k * c + j];
            *s = g * *s + (1.0 - g) * sums[k * c + j];
        }
    }
    // Laplace smoothing keeps the denominators away from zero.
    let total: f64 = codebook.ema_counts.iter().sum();
    for k in 0..n {
        if codebook.ema_counts[k] <= 0.0 {
            continue;
        }
        let smoothed = (codebook.ema_counts[k] + config.eps) / (total + n as f64 * config.eps) * total;
        for j in 0..c {
            codebook.entries[k * c + j] = codebook.ema_sums[k * c + j] / smoothed;
        }
    }
    for k in 0..n {
        if counts[k] > 0.0 {
            codebook.unused_steps[k] = 0;
            continue;
        }
        codebook.unused_steps[k] += 1;
        if codebook.unused_steps[k] >= config.dead_after {
            let pick = rng.random_range(0..batch.len());
            codebook.entries[k * c..(k + 1) * c].copy_from_slice(batch.vector(pick));
            codebook.ema_counts[k] = 0.0;
            codebook.ema_sums[k * c..(k + 1) * c].iter_mut().for_each(|s| *s = 0.0);
            codebook.unused_steps[k] = 0;
        }
    }
    Ok(())
}

/// Per-depth fraction of codebook entries selected at least once.
pub fn usage_histogram<'a>(grids: impl IntoIterator<Item = &'a CodeGrid>) -> Result<Vec<f64>> {
    let mut seen: Option<(usize, usize, Vec<Vec<bool>>)> = None;
    for g in grids {
        let (depth, vocab, used) =
            seen.get_or_insert_with(|| (g.depth, g.vocab, vec![vec![false; g.vocab]; g.depth]));
        if g.depth != *depth || g.vocab != *vocab {
            return Err(Error::ShapeMismatch("grids disagree on depth or codebook size".into()));
        }
        for p in 0..g.positions() {
            for (i, &q) in g.at(p).iter().enumerate() {
                used[i][q as usize] = true;
            }
        }
    }
    let (_, vocab, used) = seen.ok_or_else(|| invalid("usage_histogram needs at least one grid"))?;
    Ok(used
        .iter()
        .map(|u| u.iter().filter(|&&b| b).count() as f64 / vocab as f64)
        .collect())
}

/// Distribution of selected-entry norms at one depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

/// Streaming collector behind [`norm_stats`]; partial accumulators merge.
#[derive(Debug, Clone, Default)]
pub struct NormAccumulator {
    per_depth: Vec<Vec<f64>>,
}

impl NormAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, codebook: &Codebook, grid: &CodeGrid) -> Result<()> {
        if grid.vocab != codebook.size() {
            return Err(Error::ShapeMismatch("grid and codebook sizes differ".into()));
        }
        if self.per_depth.is_empty() {
            self.per_depth = vec![Vec::new(); grid.depth];
        } else if self.per_depth.len() != grid.depth {
            return Err(Error::ShapeMismatch("grids disagree on depth".into()));
        }
        for p in 0..grid.positions() {
            for (i, &q) in grid.at(p).iter().enumerate() {
                self.per_depth[i].push(codebook.entry_norm(q as usize));
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: NormAccumulator) -> Result<()> {
        if self.per_depth.is_empty() {
            self.per_depth = other.per_depth;
            return Ok(());
        }
        if !other.per_depth.is_empty() && other.per_depth.len() != self.per_depth.len() {
            return Err(Error::ShapeMismatch("accumulators disagree on depth".into()));
        }
        for (a, b) in self.per_depth.iter_mut().zip(other.per_depth) {
            a.extend(b);
        }
        Ok(())
    }

    pub fn finish(&self) -> Vec<NormSummary> {
        self.per_depth.iter().map(|v| summarize(v)).collect()
    }
}

fn summarize(values: &[f64]) -> NormSummary {
    let count = values.len();
    if count == 0 {
        return NormSummary { count, mean: f64::NAN, median: f64::NAN, std: f64::NAN };
    }
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = if count % 2 == 1 {
        sorted[count / 2]
    } else {
        0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
    };
    NormSummary { count, mean, median, std: var.sqrt() }
}

/// Mean, median and standard deviation of `|entries[q]|` per depth.
pub fn norm_stats<'a>(
    codebook: &Codebook,
    grids: impl IntoIterator<Item = &'a CodeGrid>,
) -> Result<Vec<NormSummary>> {
    let mut acc = NormAccumulator::new();
    for g in grids {
        acc.push(codebook, g)?;
    }
    Ok(acc.finish())
}
