//! Deterministic synthetic datasets: class-conditional shape images, text
//! rendered with an embedded 5x7 bitmap font, and a template sentence corpus.
//!
//! Renderers use integer raster math only, so output bytes are identical
//! across runs and platforms for a given seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, io_at, Error, Result};
use crate::image::Image;

pub const GLYPH_W: usize = 5;
pub const GLYPH_H: usize = 7;
pub const CELL: usize = 8;

/// Rows top to bottom, bit 4 is the leftmost pixel.
const GLYPHS: [(char, [u8; 7]); 39] = [
    ('A', [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('B', [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110]),
    ('C', [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110]),
    ('D', [0b11100, 0b10010, 0b10001, 0b10001, 0b10001, 0b10010, 0b11100]),
    ('E', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111]),
    ('F', [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('G', [0b01110, 0b10001, 0b10000, 0b10111, 0b10001, 0b10001, 0b01111]),
    ('H', [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001]),
    ('I', [0b01110, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('J', [0b00111, 0b00010, 0b00010, 0b00010, 0b00010, 0b10010, 0b01100]),
    ('K', [0b10001, 0b10010, 0b10100, 0b11000, 0b10100, 0b10010, 0b10001]),
    ('L', [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111]),
    ('M', [0b10001, 0b11011, 0b10101, 0b10101, 0b10001, 0b10001, 0b10001]),
    ('N', [0b10001, 0b10001, 0b11001, 0b10101, 0b10011, 0b10001, 0b10001]),
    ('O', [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('P', [0b11110, 0b10001, 0b10001, 0b11110, 0b10000, 0b10000, 0b10000]),
    ('Q', [0b01110, 0b10001, 0b10001, 0b10001, 0b10101, 0b10010, 0b01101]),
    ('R', [0b11110, 0b10001, 0b10001, 0b11110, 0b10100, 0b10010, 0b10001]),
    ('S', [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110]),
    ('T', [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100]),
    ('U', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110]),
    ('V', [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01010, 0b00100]),
    ('W', [0b10001, 0b10001, 0b10001, 0b10101, 0b10101, 0b10101, 0b01010]),
    ('X', [0b10001, 0b10001, 0b01010, 0b00100, 0b01010, 0b10001, 0b10001]),
    ('Y', [0b10001, 0b10001, 0b10001, 0b01010, 0b00100, 0b00100, 0b00100]),
    ('Z', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b10000, 0b11111]),
    ('0', [0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110]),
    ('1', [0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110]),
    ('2', [0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111]),
    ('3', [0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110]),
    ('4', [0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010]),
    ('5', [0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110]),
    ('6', [0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110]),
    ('7', [0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000]),
    ('8', [0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110]),
    ('9', [0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100]),
    (' ', [0; 7]),
    ('.', [0, 0, 0, 0, 0, 0b01100, 0b01100]),
    (',', [0, 0, 0, 0, 0b01100, 0b00100, 0b01000]),
];

/// Embedded bitmap font: `A-Z`, `0-9`, space, period and comma.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphFont {
    chars: Vec<char>,
    /// One `CELL x CELL` 0/1 mask per glyph, glyph drawn at offset (1, 1).
    cells: Vec<[u8; CELL * CELL]>,
}

impl Default for GlyphFont {
    fn default() -> Self {
        Self::builtin()
    }
}

impl GlyphFont {
    pub fn builtin() -> Self {
        let mut chars = Vec::with_capacity(GLYPHS.len());
        let mut cells = Vec::with_capacity(GLYPHS.len());
        for (ch, rows) in GLYPHS {
            let mut cell = [0u8; CELL * CELL];
            for (r, bits) in rows.iter().enumerate() {
                for c in 0..GLYPH_W {
                    if bits >> (GLYPH_W - 1 - c) & 1 == 1 {
                        cell[(r + 1) * CELL + c + 1] = 1;
                    }
                }
            }
            chars.push(ch);
            cells.push(cell);
        }
        Self { chars, cells }
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn index_of(&self, ch: char) -> Option<usize> {
        self.chars.iter().position(|&c| c == ch)
    }

    pub fn cell(&self, glyph: usize) -> &[u8; CELL * CELL] {
        &self.cells[glyph]
    }

    /// Upper-cases `text` and maps characters outside the glyph set to space.
    pub fn normalize(&self, text: &str) -> String {
        text.chars()
            .flat_map(|c| c.to_uppercase())
            .map(|c| if self.index_of(c).is_some() { c } else { ' ' })
            .collect()
    }

    /// Smallest number of differing pixels between any two glyphs.
    pub fn min_hamming_distance(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.cells.len() {
            for j in i + 1..self.cells.len() {
                let d = self.cells[i].iter().zip(&self.cells[j]).filter(|(a, b)| a != b).count();
                best = best.min(d);
            }
        }
        best
    }
}

/// Fixed-grid text canvas; one glyph per `8 x 8` cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextImageSpec {
    pub height: usize,
    pub width: usize,
    pub foreground: u8,
    pub background: u8,
}

impl Default for TextImageSpec {
    fn default() -> Self {
        Self { height: 32, width: 32, foreground: 255, background: 0 }
    }
}

impl TextImageSpec {
    pub fn rows(&self) -> usize {
        self.height / CELL
    }

    pub fn cols(&self) -> usize {
        self.width / CELL
    }

    pub fn capacity(&self) -> usize {
        self.rows() * self.cols()
    }
}

/// Ground-truth character of every cell, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextLayout {
    pub rows: usize,
    pub cols: usize,
    pub cells: Vec<char>,
}

impl TextLayout {
    pub fn text(&self) -> String {
        self.cells.iter().collect()
    }

    pub fn at(&self, row: usize, col: usize) -> char {
        self.cells[row * self.cols + col]
    }
}

/// Draws `text` left-to-right, top-to-bottom into a single-channel canvas.
/// Text beyond the cell capacity is dropped.
pub fn render_text_image(text: &str, spec: &TextImageSpec, font: &GlyphFont) -> (Image, TextLayout) {
    let (rows, cols) = (spec.rows(), spec.cols());
    let mut cells: Vec<char> = font.normalize(text).chars().take(spec.capacity()).collect();
    cells.resize(spec.capacity(), ' ');
    let mut bytes = vec![spec.background; spec.height * spec.width];
    for (i, &ch) in cells.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let glyph = font.cell(font.index_of(ch).expect("normalized"));
        for y in 0..CELL {
            for x in 0..CELL {
                if glyph[y * CELL + x] == 1 {
                    bytes[(r * CELL + y) * spec.width + c * CELL + x] = spec.foreground;
                }
            }
        }
    }
    let image = Image::from_u8(spec.height, spec.width, 1, &bytes).expect("sizes agree");
    (image, TextLayout { rows, cols, cells })
}

/// Shape family drawn for a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Circle,
    Square,
    Triangle,
    Stripes,
    Checker,
    Ring,
    Cross,
    Gradient,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 8] = [
        ShapeFamily::Circle,
        ShapeFamily::Square,
        ShapeFamily::Triangle,
        ShapeFamily::Stripes,
        ShapeFamily::Checker,
        ShapeFamily::Ring,
        ShapeFamily::Cross,
        ShapeFamily::Gradient,
    ];
}

/// Base foreground colour per class; background is a dim complement.
const PALETTE: [[i32; 3]; 8] = [
    [220, 60, 50],
    [60, 200, 70],
    [70, 90, 230],
    [230, 210, 60],
    [200, 70, 210],
    [60, 210, 210],
    [240, 140, 40],
    [150, 150, 150],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeClassSpec {
    pub classes: usize,
    pub size: usize,
    /// Maximum per-pixel noise amplitude (in 8-bit levels).
    pub noise: u32,
    /// Maximum per-channel colour jitter (in 8-bit levels).
    pub hue_jitter: u32,
}

impl Default for ShapeClassSpec {
    fn default() -> Self {
        Self { classes: 8, size: 32, noise: 12, hue_jitter: 25 }
    }
}

impl ShapeClassSpec {
    pub fn family(&self, class: usize) -> ShapeFamily {
        ShapeFamily::ALL[class % ShapeFamily::ALL.len()]
    }
}

/// SplitMix64 finaliser; decorrelates `(stream, seed)` pairs.
pub fn mix_seed(stream: u64, seed: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn jitter(rng: &mut ChaCha8Rng, amp: u32) -> i32 {
    if amp == 0 {
        0
    } else {
        rng.random_range(0..=2 * amp) as i32 - amp as i32
    }
}

/// One RGB image of the given class; identical for identical `(class, seed)`.
pub fn gen_class_image(class: usize, seed: u64, spec: &ShapeClassSpec) -> Result<Image> {
    if class >= spec.classes {
        return Err(invalid(format!("class {class} out of range 0..{}", spec.classes)));
    }
    let n = spec.size as i32;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(class as u64 + 1, seed));
    let base = PALETTE[class % PALETTE.len()];
    let fg: Vec<i32> = base.iter().map(|c| c + jitter(&mut rng, spec.hue_jitter)).collect();
    let bg: Vec<i32> = base.iter().map(|c| (255 - c) / 5 + jitter(&mut rng, 8)).collect();
    let cx = n / 2 + jitter(&mut rng, (spec.size / 8) as u32);
    let cy = n / 2 + jitter(&mut rng, (spec.size / 8) as u32);
    let r = n * 3 / 16 + rng.random_range(0..=(spec.size / 8) as u32) as i32;
    let period = 3 + rng.random_range(0..=3u32) as i32;
    let phase = rng.random_range(0..=7u32) as i32;

    let family = spec.family(class);
    let mut bytes = Vec::with_capacity(spec.size * spec.size * 3);
    for y in 0..n {
        for x in 0..n {
            let (dx, dy) = (x - cx, y - cy);
            let d2 = dx * dx + dy * dy;
            // weight of the foreground colour, 0..=16
            let w: i32 = match family {
                ShapeFamily::Circle => 16 * (d2 <= r * r) as i32,
                ShapeFamily::Square => 16 * (dx.abs() <= r && dy.abs() <= r) as i32,
                ShapeFamily::Triangle => {
                    let top = cy - r;
                    16 * (y >= top && y <= cy + r && 2 * dx.abs() <= y - top) as i32
                }
                ShapeFamily::Stripes => 16 * (((y + phase) / period) % 2 == 0) as i32,
                ShapeFamily::Checker => 16 * ((((x + phase) / period) + ((y + phase) / period)) % 2 == 0) as i32,
                ShapeFamily::Ring => {
                    let inner = (r - 3).max(1);
                    16 * (d2 <= r * r && d2 >= inner * inner) as i32
                }
                ShapeFamily::Cross => {
                    16 * ((dx.abs() <= 2 && dy.abs() <= r) || (dy.abs() <= 2 && dx.abs() <= r)) as i32
                }
                ShapeFamily::Gradient => ((x + phase) * 16 / (n + 7)).clamp(0, 16),
            };
            for ch in 0..3 {
                let v = (fg[ch] * w + bg[ch] * (16 - w)) / 16 + jitter(&mut rng, spec.noise);
                bytes.push(v.clamp(0, 255) as u8);
            }
        }
    }
    Image::from_u8(spec.size, spec.size, 3, &bytes)
}

const SUBJECTS: [&str; 12] =
    ["CAT", "DOG", "FOX", "OWL", "BEE", "COW", "PIG", "RAT", "HEN", "ELK", "APE", "YAK"];
const VERBS: [&str; 10] = ["SEES", "EATS", "HAS", "GETS", "HUGS", "DIGS", "WANTS", "HIDES", "MAKES", "TAKES"];
const OBJECTS: [&str; 12] =
    ["SUN", "BOX", "HAT", "MAP", "CUP", "EGG", "KEY", "BUG", "JAM", "NUT", "PEN", "BUN"];
const ADVERBS: [&str; 6] = ["NOW", "TOO", "AGAIN", "TODAY", "SOON", "OFTEN"];

/// `count` sentences of the form `SUBJECT VERB OBJECT [ADVERB].`
pub fn gen_corpus(count: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(0xC0A5, seed));
    (0..count)
        .map(|_| {
            let s = SUBJECTS[rng.random_range(0..SUBJECTS.len() as u32) as usize];
            let v = VERBS[rng.random_range(0..VERBS.len() as u32) as usize];
            let o = OBJECTS[rng.random_range(0..OBJECTS.len() as u32) as usize];
            if rng.random_range(0..2u32) == 0 {
                let a = ADVERBS[rng.random_range(0..ADVERBS.len() as u32) as usize];
                format!("{s} {v} {o} {a}.")
            } else {
                format!("{s} {v} {o}.")
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Shapes,
    Text,
}

/// Class id for shape images, rendered text for text images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(u32),
    Text(String),
}

impl Label {
    pub fn class(&self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Text(_) => None,
        }
    }
}

/// In-memory dataset; ids `0..train` form the training split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub images: Vec<Image>,
    pub labels: Vec<Label>,
    pub seeds: Vec<u64>,
    pub train: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn train_images(&self) -> &[Image] {
        &self.images[..self.train]
    }

    pub fn val_images(&self) -> &[Image] {
        &self.images[self.train..]
    }

    pub fn train_labels(&self) -> &[Label] {
        &self.labels[..self.train]
    }

    pub fn val_labels(&self) -> &[Label] {
        &self.labels[self.train..]
    }

    pub fn channels(&self) -> usize {
        match self.kind {
            DatasetKind::Shapes => 3,
            DatasetKind::Text => 1,
        }
    }
}

/// Everything that determines a dataset's bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub size: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub shapes: ShapeClassSpec,
    pub text: TextImageSpec,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Shapes,
            size: 5000,
            val_fraction: 0.1,
            seed: 0,
            shapes: ShapeClassSpec::default(),
            text: TextImageSpec::default(),
        }
    }
}

impl DatasetSpec {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn train_count(&self) -> usize {
        let val = (self.size as f64 * self.val_fraction).round() as usize;
        self.size - val.min(self.size)
    }
}

/// Generates the whole dataset in memory.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.size == 0 {
        return Err(invalid("dataset size must be positive"));
    }
    if !(0.0..1.0).contains(&spec.val_fraction) {
        return Err(invalid("val_fraction must lie in [0, 1)"));
    }
    let font = GlyphFont::builtin();
    let corpus = match spec.kind {
        DatasetKind::Text => gen_corpus(spec.size, spec.seed),
        DatasetKind::Shapes => Vec::new(),
    };
    let mut images = Vec::with_capacity(spec.size);
    let mut labels = Vec::with_capacity(spec.size);
    let mut seeds = Vec::with_capacity(spec.size);
    for id in 0..spec.size {
        let item_seed = mix_seed(id as u64, spec.seed);
        match spec.kind {
            DatasetKind::Shapes => {
                let class = id % spec.shapes.classes;
                images.push(gen_class_image(class, item_seed, &spec.shapes)?);
                labels.push(Label::Class(class as u32));
            }
            DatasetKind::Text => {
                let (img, layout) = render_text_image(&corpus[id], &spec.text, &font);
                images.push(img);
                labels.push(Label::Text(layout.text()));
            }
        }
        seeds.push(item_seed);
    }
    Ok(Dataset { kind: spec.kind, images, labels, seeds, train: spec.train_count() })
}

/// Manifest of a dataset written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub spec_hash: String,
    pub train: usize,
    pub val: usize,
}

/// Writes `{dir}/img/{id}.ppm`, `{dir}/manifest.tsv` (id, label, seed) and
/// `{dir}/dataset.json` (spec, spec hash and split counts).
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    let data = build_dataset(spec)?;
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(io_at(&img_dir))?;
    let mut tsv = String::from("id\tlabel\tseed\n");
    for (id, ((img, label), seed)) in data.images.iter().zip(&data.labels).zip(&data.seeds).enumerate() {
        img.save_ppm(&img_dir.join(format!("{id}.ppm")))?;
        let label = match label {
            Label::Class(c) => c.to_string(),
            Label::Text(t) => t.clone(),
        };
        writeln!(tsv, "{id}\t{label}\t{seed}").expect("string write");
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, tsv).map_err(io_at(&manifest_path))?;
    let manifest = DatasetManifest {
        spec: spec.clone(),
        spec_hash: spec.hash(),
        train: data.train,
        val: data.len() - data.train,
    };
    let meta_path = dir.join("dataset.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable");
    std::fs::write(&meta_path, json).map_err(io_at(&meta_path))?;
    Ok(manifest)
}

/// Reads a dataset produced by [`make_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.json");
    let meta = std::fs::read_to_string(&meta_path).map_err(io_at(&meta_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&meta).map_err(|e| Error::Format(format!("{}: {e}", meta_path.display())))?;
    let tsv_path = dir.join("manifest.tsv");
    let tsv = std::fs::read_to_string(&tsv_path).map_err(io_at(&tsv_path))?;
    let channels = match manifest.spec.kind {
        DatasetKind::Shapes => 3,
        DatasetKind::Text => 1,
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut seeds = Vec::new();
    for line in tsv.lines().skip(1) {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Format(format!("manifest line {line:?}")));
        }
        let bad = |_| Error::Format(format!("manifest line {line:?}"));
        let id: usize = fields[0].parse().map_err(bad)?;
        images.push(Image::load_ppm(&dir.join("img").join(format!("{id}.ppm")), channels)?);
        labels.push(match manifest.spec.kind {
            DatasetKind::Shapes => Label::Class(fields[1].parse().map_err(bad)?),
            DatasetKind::Text => Label::Text(fields[1].to_string()),
        });
        seeds.push(fields[2].parse().map_err(bad)?);
    }
    if images.len() != manifest.train + manifest.val {
        return Err(Error::Format("manifest.tsv and dataset.json disagree on size".into()));
    }
    Ok(Dataset { kind: manifest.spec.kind, images, labels, seeds, train: manifest.train })
}
