//! Dataset interchange (JSONL records of one image, five sentences, and
//! one to five keyword phrases), quality diagnostics, seeded splits, and
//! the synthetic colored-shape fixture generator.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pgm::{self, PgmError, Raster};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::text::score::prior_similarity;
use crate::text::{tokenize, TextError, TokenSeq};
use crate::visual::{save_feature_bundle, ExtractorParams, VisualError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid record: {message}")]
    Invalid { line: usize, message: String },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Image(#[from] PgmError),
    #[error(transparent)]
    Visual(#[from] VisualError),
    #[error(transparent)]
    Text(#[from] TextError),
}

pub const SENTENCES_PER_IMAGE: usize = 5;
pub const MAX_KEYWORDS: usize = 5;

/// One record: an image, its five sentences, and its keyword phrases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub image_id: String,
    /// Image path relative to the dataset file.
    pub image: String,
    /// Optional precomputed feature bundle, relative to the dataset file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    pub category: String,
    pub sentences: Vec<String>,
    pub keywords: Vec<String>,
}

impl DatasetEntry {
    fn validate(&self, line: usize) -> Result<(), DataError> {
        let invalid = |message: String| DataError::Invalid { line, message };
        if self.sentences.len() != SENTENCES_PER_IMAGE {
            return Err(invalid(format!(
                "expected {SENTENCES_PER_IMAGE} sentences, got {}",
                self.sentences.len()
            )));
        }
        if self.keywords.is_empty() || self.keywords.len() > MAX_KEYWORDS {
            return Err(invalid(format!(
                "expected 1..={MAX_KEYWORDS} keywords, got {}",
                self.keywords.len()
            )));
        }
        if self.category.trim().is_empty() {
            return Err(invalid("empty category".into()));
        }
        for s in &self.sentences {
            if tokenize(s).is_empty() {
                return Err(invalid(format!("sentence '{s}' has no tokens")));
            }
        }
        for k in &self.keywords {
            if tokenize(k).is_empty() {
                return Err(invalid(format!("keyword '{k}' has no tokens")));
            }
        }
        Ok(())
    }

    pub fn sentence_tokens(&self) -> Vec<TokenSeq> {
        self.sentences.iter().map(|s| tokenize(s)).collect()
    }

    pub fn keyword_tokens(&self) -> Vec<TokenSeq> {
        self.keywords.iter().map(|k| tokenize(k)).collect()
    }
}

/// A loaded dataset: the records plus the directory they live in.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn caption_count(&self) -> usize {
        self.entries.len() * SENTENCES_PER_IMAGE
    }

    pub fn load_image(&self, entry: &DatasetEntry) -> Result<Tensor, DataError> {
        let raster = pgm::read_image(&self.root.join(&entry.image))?;
        Ok(raster.to_tensor())
    }

    pub fn load_raster(&self, entry: &DatasetEntry) -> Result<Raster, DataError> {
        Ok(pgm::read_image(&self.root.join(&entry.image))?)
    }

    /// All tokens appearing in any keyword phrase, for deriving keyword
    /// inputs from plain sentences.
    pub fn keyword_vocabulary(&self) -> HashSet<String> {
        let mut set = HashSet::new();
        for e in &self.entries {
            for phrase in e.keyword_tokens() {
                for t in phrase.iter() {
                    set.insert(t.clone());
                }
            }
        }
        set
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Load a JSONL dataset, validating every record. Violations are reported
/// with their line number.
pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: DatasetEntry = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        entry.validate(line_no)?;
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(Dataset {
        root: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        entries,
    })
}

pub fn save_dataset(path: &Path, entries: &[DatasetEntry]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("entry serialization");
        writeln!(f, "{line}").map_err(|err| io_err(path, err))?;
    }
    Ok(())
}

/// Seeded 80/10/10 split. Validation and test get at least one item each
/// (for n >= 3); train takes the rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> SplitIndices {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Rng::new(seed).derive(0x5911);
    rng.shuffle(&mut order);
    if n < 3 {
        return SplitIndices {
            train: order,
            val: Vec::new(),
            test: Vec::new(),
        };
    }
    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    let n_train = n - n_val - n_test;
    SplitIndices {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    }
}

/// Count of distinct tokenized sentences divided by the image count.
pub fn diversity_score(dataset: &Dataset) -> Result<f64, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let mut distinct: HashSet<TokenSeq> = HashSet::new();
    for e in &dataset.entries {
        for s in &e.sentences {
            distinct.insert(tokenize(s));
        }
    }
    Ok(distinct.len() as f64 / dataset.len() as f64)
}

/// Similarity matrix of sampled captions against every image's caption set,
/// rows ordered by the caption's own image index.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticMatrix {
    /// (image index, caption index within image) per row.
    pub rows: Vec<(usize, usize)>,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DiagnosticMatrix {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub images: usize,
    pub captions: usize,
    pub sampled_captions: usize,
    pub diversity_score: f64,
    pub average_similarity: f64,
    pub vocabulary_size: usize,
    pub category_histogram: BTreeMap<String, usize>,
}

/// Score sampled captions against every image's caption set with the prior
/// similarity. The sample is taken at evenly spaced caption indices so the
/// result is deterministic without a seed; the average is the mean of the
/// off-diagonal cells (caption against a foreign image).
pub fn similarity_diagnostic(
    dataset: &Dataset,
    sample: usize,
    bleu_weight: f64,
) -> Result<(DiagnosticsReport, DiagnosticMatrix), DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    let total = dataset.caption_count();
    let sample = sample.clamp(1, total);
    let refs: Vec<Vec<TokenSeq>> = dataset.entries.iter().map(|e| e.sentence_tokens()).collect();

    let mut rows = Vec::with_capacity(sample);
    for i in 0..sample {
        let g = i * total / sample;
        rows.push((g / SENTENCES_PER_IMAGE, g % SENTENCES_PER_IMAGE));
    }

    let cols = dataset.len();
    let mut values = Vec::with_capacity(rows.len() * cols);
    let mut off_diag_sum = 0.0;
    let mut off_diag_count = 0usize;
    for &(img, cap) in &rows {
        let caption = &refs[img][cap];
        for (col, col_refs) in refs.iter().enumerate() {
            let s = prior_similarity(caption, col_refs, bleu_weight)?;
            if col != img {
                off_diag_sum += s;
                off_diag_count += 1;
            }
            values.push(s);
        }
    }

    let mut vocab: HashSet<String> = HashSet::new();
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for e in &dataset.entries {
        *histogram.entry(e.category.clone()).or_insert(0) += 1;
        for s in e.sentence_tokens() {
            for t in s.iter() {
                vocab.insert(t.clone());
            }
        }
    }

    let report = DiagnosticsReport {
        images: dataset.len(),
        captions: total,
        sampled_captions: rows.len(),
        diversity_score: diversity_score(dataset)?,
        average_similarity: if off_diag_count > 0 {
            off_diag_sum / off_diag_count as f64
        } else {
            0.0
        },
        vocabulary_size: vocab.len(),
        category_histogram: histogram,
    };
    Ok((report, DiagnosticMatrix { rows, cols, values }))
}

// --- synthetic fixture -----------------------------------------------------

pub const CATEGORIES: [&str; 32] = [
    "industrial",
    "stadium",
    "storagetanks",
    "square",
    "playground",
    "river",
    "viaduct",
    "pond",
    "port",
    "farmland",
    "resort",
    "school",
    "park",
    "denseresidential",
    "sparseresidential",
    "bridge",
    "beach",
    "commercial",
    "center",
    "parking",
    "airport",
    "church",
    "mediumresidential",
    "meadow",
    "desert",
    "forest",
    "railwaystation",
    "mountain",
    "baseballfield",
    "intersection",
    "bareland",
    "boat",
];

const COLORS: [(&str, [u8; 3]); 10] = [
    ("red", [200, 40, 40]),
    ("blue", [40, 60, 200]),
    ("green", [40, 160, 60]),
    ("yellow", [220, 210, 60]),
    ("white", [240, 240, 240]),
    ("gray", [128, 128, 128]),
    ("purple", [140, 60, 180]),
    ("orange", [230, 140, 40]),
    ("brown", [140, 90, 50]),
    ("cyan", [60, 200, 210]),
];

const SHAPES: [&str; 8] = [
    "square", "circle", "triangle", "cross", "ring", "diamond", "stripe", "checker",
];

/// The number of distinct (color, shape) identities available to planted
/// fixtures.
pub const MAX_PLANTED_IMAGES: usize = COLORS.len() * SHAPES.len();

#[derive(Clone, Debug)]
pub struct FixtureOptions {
    pub seed: u64,
    pub images: usize,
    /// Guarantee that every caption's tokens identify its image uniquely.
    pub planted: bool,
    /// Also emit precomputed feature bundles per image.
    pub bundles: bool,
    pub image_size: usize,
}

impl FixtureOptions {
    pub fn new(seed: u64, images: usize, planted: bool) -> Self {
        Self {
            seed,
            images,
            planted,
            bundles: false,
            image_size: 256,
        }
    }
}

#[derive(Clone, Copy)]
struct Identity {
    color: usize,
    shape: usize,
    background: usize,
    category: usize,
}

fn identity_for(index: usize, planted: bool, rng: &mut Rng) -> Identity {
    if planted {
        let color = index % COLORS.len();
        Identity {
            color,
            shape: (index / COLORS.len()) % SHAPES.len(),
            // The background is the next color in the palette, which rules
            // out token-set collisions between swapped color pairs.
            background: (color + 1) % COLORS.len(),
            category: index % CATEGORIES.len(),
        }
    } else {
        let color = rng.below(COLORS.len());
        let mut background = rng.below(COLORS.len());
        if background == color {
            background = (background + 1) % COLORS.len();
        }
        Identity {
            color,
            shape: rng.below(SHAPES.len()),
            background,
            category: rng.below(CATEGORIES.len()),
        }
    }
}

fn captions_for(id: Identity) -> (Vec<String>, Vec<String>) {
    let color = COLORS[id.color].0;
    let shape = SHAPES[id.shape];
    let bg = COLORS[id.background].0;
    let cat = CATEGORIES[id.category];
    let sentences = vec![
        format!("a {color} {shape} sits on the {bg} ground near the {cat}"),
        format!("the {cat} area shows one {color} {shape} over {bg} terrain"),
        format!("one large {color} {shape} stands on a {bg} surface"),
        format!("a {bg} field holds a single {color} {shape} in the {cat} zone"),
        format!("{color} {shape} surrounded by {bg} land beside small dark blocks"),
    ];
    let keywords = vec![
        format!("{color}-{shape}"),
        format!("-{cat}"),
        format!("{bg}-ground"),
    ];
    (sentences, keywords)
}

fn put_pixel(raster: &mut Raster, x: i64, y: i64, rgb: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < raster.width && (y as usize) < raster.height {
        for c in 0..3 {
            raster.set(x as usize, y as usize, c, rgb[c]);
        }
    }
}

fn draw_shape(raster: &mut Raster, shape: usize, cx: i64, cy: i64, r: i64, rgb: [u8; 3], bg: [u8; 3]) {
    for y in cy - r..=cy + r {
        for x in cx - r..=cx + r {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match SHAPES[shape] {
                "square" => true,
                "circle" => dx * dx + dy * dy <= r * r,
                "triangle" => dy >= -r && dx.abs() * 2 <= dy + r,
                "cross" => dx.abs() <= r / 3 || dy.abs() <= r / 3,
                "ring" => {
                    let d2 = dx * dx + dy * dy;
                    d2 <= r * r && d2 >= (r / 2) * (r / 2)
                }
                "diamond" => dx.abs() + dy.abs() <= r,
                "stripe" => dy.abs() <= r / 3,
                "checker" => ((dx + r) / (r / 2).max(1) + (dy + r) / (r / 2).max(1)) % 2 == 0,
                _ => unreachable!(),
            };
            if inside {
                put_pixel(raster, x, y, rgb);
            } else if SHAPES[shape] == "checker" {
                put_pixel(raster, x, y, bg);
            }
        }
    }
}

fn render_image(id: Identity, size: usize, rng: &mut Rng) -> Raster {
    let mut raster = Raster::new(size, size, 3);
    let bg = COLORS[id.background].1;
    for y in 0..size {
        for x in 0..size {
            for c in 0..3 {
                let noise = rng.uniform(-12.0, 12.0);
                let v = (bg[c] as f64 + noise).clamp(0.0, 255.0) as u8;
                raster.set(x, y, c, v);
            }
        }
    }
    // Two muted distractor blocks.
    for _ in 0..2 {
        let w = (10 + rng.below(18)).min(size / 4).max(2) as i64;
        let x0 = rng.below((size - w as usize).max(1)) as i64;
        let y0 = rng.below((size - w as usize).max(1)) as i64;
        for y in y0..y0 + w {
            for x in x0..x0 + w {
                put_pixel(&mut raster, x, y, [70, 70, 70]);
            }
        }
    }
    let quarter = size as i64 / 4;
    let jitter = (quarter as usize / 2).max(1);
    let cx = quarter * 2 + rng.below(jitter) as i64 - quarter / 4;
    let cy = quarter * 2 + rng.below(jitter) as i64 - quarter / 4;
    let r = (size as i64 / 8) + rng.below((size / 16).max(1)) as i64;
    draw_shape(&mut raster, id.shape, cx, cy, r, COLORS[id.color].1, bg);
    raster
}

/// Stitch rasters into a square mosaic (row-major placement).
pub fn compose_mosaic(tiles: &[Raster], cols: usize) -> Raster {
    assert!(!tiles.is_empty() && cols > 0);
    let (tw, th) = (tiles[0].width, tiles[0].height);
    let rows = tiles.len().div_ceil(cols);
    let mut scene = Raster::new(cols * tw, rows * th, 3);
    for (i, tile) in tiles.iter().enumerate() {
        assert_eq!((tile.width, tile.height), (tw, th), "mosaic tiles must match");
        let (ox, oy) = ((i % cols) * tw, (i / cols) * th);
        for y in 0..th {
            for x in 0..tw {
                for c in 0..3 {
                    let src = if tile.channels == 3 { c } else { 0 };
                    scene.set(ox + x, oy + y, c, tile.get(x, y, src));
                }
            }
        }
    }
    scene
}

#[derive(Serialize)]
struct SceneMeta<'a> {
    grid: usize,
    tile: usize,
    image_ids: Vec<&'a str>,
}

/// Generate a synthetic dataset under `dir`: images, the JSONL record file,
/// a 2x2 demo scene, and (optionally) per-image feature bundles. A pure
/// function of the options: identical seeds give byte-identical trees.
pub fn make_fixture(dir: &Path, opts: &FixtureOptions) -> Result<Vec<DatasetEntry>, DataError> {
    if opts.images < 4 {
        return Err(DataError::Invalid {
            line: 0,
            message: format!("fixture needs at least 4 images, got {}", opts.images),
        });
    }
    if opts.planted && opts.images > MAX_PLANTED_IMAGES {
        return Err(DataError::Invalid {
            line: 0,
            message: format!(
                "planted mode supports at most {MAX_PLANTED_IMAGES} images, got {}",
                opts.images
            ),
        });
    }
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| io_err(&images_dir, e))?;
    let features_dir = dir.join("features");
    if opts.bundles {
        std::fs::create_dir_all(&features_dir).map_err(|e| io_err(&features_dir, e))?;
    }

    let base = Rng::new(opts.seed);
    let mut bundle_extractor = opts.bundles.then(|| {
        ExtractorParams::seeded(3, &[4, 8, 16, 32, 64], 32, &mut base.derive(0xFEA7))
    });

    let mut entries = Vec::with_capacity(opts.images);
    let mut rasters = Vec::new();
    for i in 0..opts.images {
        let mut rng = base.derive(1000 + i as u64);
        let id = identity_for(i, opts.planted, &mut rng);
        let raster = render_image(id, opts.image_size, &mut rng);
        let image_id = format!("img{i:04}");
        let image_rel = format!("images/{image_id}.ppm");
        pgm::write_image(&dir.join(&image_rel), &raster)?;
        let (sentences, keywords) = captions_for(id);
        let features = if let Some(extractor) = bundle_extractor.as_mut() {
            let pyramid = extractor.extract(&raster.to_tensor())?;
            let rel = format!("features/{image_id}.xfb");
            save_feature_bundle(&dir.join(&rel), &pyramid)?;
            Some(rel)
        } else {
            None
        };
        entries.push(DatasetEntry {
            image_id: image_id.clone(),
            image: image_rel,
            features,
            category: CATEGORIES[id.category].to_string(),
            sentences,
            keywords,
        });
        if rasters.len() < 4 {
            rasters.push(raster);
        }
    }
    save_dataset(&dir.join("dataset.jsonl"), &entries)?;

    let scene = compose_mosaic(&rasters, 2);
    pgm::write_image(&dir.join("scene.ppm"), &scene)?;
    let meta = SceneMeta {
        grid: 2,
        tile: opts.image_size,
        image_ids: entries.iter().take(4).map(|e| e.image_id.as_str()).collect(),
    };
    let meta_path = dir.join("scene.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| io_err(&meta_path, e))?;
    Ok(entries)
}
