//! Text-driven localization over large scenes: multiscale tiling with
//! half-grid offset rounds, per-tile similarity scoring, pixel-level
//! aggregation into a probability map, and median filtering.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{Model, ModelError, TextQuery};
use crate::pgm::{self, PgmError, Raster};

#[derive(Debug, Error)]
pub enum LocateError {
    #[error("invalid tiling scales: {0}")]
    BadScales(String),
    #[error("median window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("tile at ({x}, {y}) scale {scale} exceeds the {width}x{height} scene")]
    TileOutOfBounds {
        x: usize,
        y: usize,
        scale: usize,
        width: usize,
        height: usize,
    },
    #[error("scoring tile at ({x}, {y}) scale {scale}: {source}")]
    TileEncode {
        x: usize,
        y: usize,
        scale: usize,
        source: ModelError,
    },
    #[error(transparent)]
    Image(#[from] PgmError),
    #[error("heatmap i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Which cutting round produced a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileRound {
    Base,
    /// Shifted by half a grid toward the bottom right.
    Offset,
    /// Optional extra rounds: shifted along one axis only.
    OffsetX,
    OffsetY,
}

/// One fully contained square slice of the scene.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TileSpec {
    pub scale: usize,
    pub x: usize,
    pub y: usize,
    pub round: TileRound,
}

pub const DEFAULT_SCALES: [usize; 3] = [128, 256, 512];

#[derive(Clone, Debug)]
pub struct TilingOptions {
    pub scales: Vec<usize>,
    /// Add the single-axis half-offset rounds on top of base + diagonal.
    pub extra_offset_rounds: bool,
}

impl Default for TilingOptions {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            extra_offset_rounds: false,
        }
    }
}

/// Grid positions of one round: origins `base + i * scale` that keep the
/// tile inside `extent`.
fn round_origins(extent: usize, scale: usize, base: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut origin = base;
    while origin + scale <= extent {
        out.push(origin);
        origin += scale;
    }
    out
}

/// Cut every scale in grid-aligned rounds: the base grid at origin (0, 0)
/// and a second round shifted by half a grid toward the bottom right.
/// Tiles are never clipped; a scene smaller than every scale yields an
/// empty set with a warning.
pub fn tile_multiscale(
    width: usize,
    height: usize,
    opts: &TilingOptions,
) -> Result<Vec<TileSpec>, LocateError> {
    if opts.scales.is_empty() || opts.scales.contains(&0) {
        return Err(LocateError::BadScales(format!("{:?}", opts.scales)));
    }
    let mut tiles = Vec::new();
    for &scale in &opts.scales {
        let half = scale / 2;
        let mut rounds = vec![(TileRound::Base, 0, 0), (TileRound::Offset, half, half)];
        if opts.extra_offset_rounds {
            rounds.push((TileRound::OffsetX, half, 0));
            rounds.push((TileRound::OffsetY, 0, half));
        }
        for (round, bx, by) in rounds {
            for &y in &round_origins(height, scale, by) {
                for &x in &round_origins(width, scale, bx) {
                    tiles.push(TileSpec {
                        scale,
                        x,
                        y,
                        round,
                    });
                }
            }
        }
    }
    if tiles.is_empty() {
        log::warn!("scene {width}x{height} is smaller than every tiling scale");
    }
    Ok(tiles)
}

/// Per-pixel aggregated similarity field in `[0, 1]` with coverage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub counts: Vec<u32>,
}

impl ProbabilityMap {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Crop, resize, and score every tile against the query; similarities are
/// affinely rescaled from `[-1, 1]` to `[0, 1]` so aggregation produces a
/// probability field. Encode failures name the offending tile.
pub fn score_tiles(
    scene: &Raster,
    tiles: &[TileSpec],
    model: &Model,
    query: &TextQuery,
) -> Result<Vec<f64>, LocateError> {
    let text = model
        .encode_text(query)
        .map_err(|source| LocateError::TileEncode {
            x: 0,
            y: 0,
            scale: 0,
            source,
        })?;
    let input = model.config.dims.input_size;
    let mut scores = Vec::with_capacity(tiles.len());
    for t in tiles {
        if t.x + t.scale > scene.width || t.y + t.scale > scene.height {
            return Err(LocateError::TileOutOfBounds {
                x: t.x,
                y: t.y,
                scale: t.scale,
                width: scene.width,
                height: scene.height,
            });
        }
        let crop = scene.crop(t.x, t.y, t.scale, t.scale);
        let resized = crop.resize_nearest(input, input);
        let raw = (|| {
            let visual = model.encode_image(&resized.to_tensor())?;
            model.score(&visual, &text)
        })()
        .map_err(|source| LocateError::TileEncode {
            x: t.x,
            y: t.y,
            scale: t.scale,
            source,
        })?;
        scores.push(((raw + 1.0) / 2.0).clamp(0.0, 1.0));
    }
    Ok(scores)
}

/// Every pixel's value is the mean of the scores of all tiles covering it;
/// uncovered pixels stay at 0 with a coverage count of 0.
pub fn aggregate_map(
    tiles: &[TileSpec],
    scores: &[f64],
    width: usize,
    height: usize,
) -> ProbabilityMap {
    assert_eq!(tiles.len(), scores.len(), "one score per tile");
    let mut sums = vec![0.0; width * height];
    let mut counts = vec![0u32; width * height];
    for (t, &s) in tiles.iter().zip(scores) {
        for y in t.y..t.y + t.scale {
            let row = y * width;
            for x in t.x..t.x + t.scale {
                sums[row + x] += s;
                counts[row + x] += 1;
            }
        }
    }
    for (v, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    ProbabilityMap {
        width,
        height,
        values: sums,
        counts,
    }
}

/// Replace each pixel by the median of its clipped `k x k` neighborhood.
/// Border windows shrink; with an even number of candidates the lower
/// middle is taken, so outputs are always drawn from the input values.
pub fn median_filter(
    map: &ProbabilityMap,
    k: usize,
    passes: usize,
) -> Result<ProbabilityMap, LocateError> {
    if k < 3 || k % 2 == 0 {
        return Err(LocateError::BadWindow(k));
    }
    let r = (k / 2) as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let mut current = map.values.clone();
    let mut window = Vec::with_capacity(k * k);
    for _ in 0..passes {
        let mut next = vec![0.0; current.len()];
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -r..=r {
                    let sy = y + dy;
                    if sy < 0 || sy >= h {
                        continue;
                    }
                    for dx in -r..=r {
                        let sx = x + dx;
                        if sx < 0 || sx >= w {
                            continue;
                        }
                        window.push(current[(sy * w + sx) as usize]);
                    }
                }
                window.sort_by(|a, b| a.partial_cmp(b).expect("finite map"));
                next[(y * w + x) as usize] = window[(window.len() - 1) / 2];
            }
        }
        current = next;
    }
    Ok(ProbabilityMap {
        width: map.width,
        height: map.height,
        values: current,
        counts: map.counts.clone(),
    })
}

/// Sidecar metadata emitted next to every heatmap.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeatmapMeta {
    pub scales: Vec<usize>,
    pub tile_counts: Vec<(usize, usize)>,
    pub median_window: usize,
    pub median_passes: usize,
    pub score_rescale: String,
    pub query: String,
}

impl HeatmapMeta {
    pub fn new(tiles: &[TileSpec], scales: &[usize], median_window: usize, passes: usize, query: &str) -> Self {
        let tile_counts = scales
            .iter()
            .map(|&s| (s, tiles.iter().filter(|t| t.scale == s).count()))
            .collect();
        Self {
            scales: scales.to_vec(),
            tile_counts,
            median_window,
            median_passes: passes,
            score_rescale: "affine [-1,1] -> [0,1]".into(),
            query: query.to_string(),
        }
    }
}

/// Write the map as an 8-bit grayscale image (values scaled to 0..=255)
/// plus a JSON sidecar with the run settings.
pub fn emit_heatmap(map: &ProbabilityMap, path: &Path, meta: &HeatmapMeta) -> Result<(), LocateError> {
    pgm::write_gray_field(path, &map.values, map.width, map.height)?;
    let sidecar = path.with_extension("json");
    let body = serde_json::to_string_pretty(meta).expect("meta serialization");
    std::fs::write(&sidecar, body).map_err(|source| LocateError::Io {
        path: sidecar.display().to_string(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn opts(scales: &[usize]) -> TilingOptions {
        TilingOptions {
            scales: scales.to_vec(),
            extra_offset_rounds: false,
        }
    }

    #[test]
    fn reference_tiling_counts() {
        let tiles = tile_multiscale(512, 512, &opts(&[128, 256, 512])).unwrap();
        let count = |scale, round| {
            tiles
                .iter()
                .filter(|t| t.scale == scale && t.round == round)
                .count()
        };
        assert_eq!(count(128, TileRound::Base), 16);
        assert_eq!(count(128, TileRound::Offset), 9);
        assert_eq!(count(256, TileRound::Base), 4);
        assert_eq!(count(256, TileRound::Offset), 1);
        assert_eq!(count(512, TileRound::Base), 1);
        assert_eq!(count(512, TileRound::Offset), 0);
        assert_eq!(tiles.len(), 31);
    }

    #[test]
    fn exact_fit_scene_gets_one_tile() {
        let tiles = tile_multiscale(256, 256, &opts(&[256])).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!((tiles[0].x, tiles[0].y), (0, 0));
    }

    #[test]
    fn offset_round_respects_bounds() {
        // 300x300 at scale 256: one base tile, no offset tile (128 + 256 > 300).
        let tiles = tile_multiscale(300, 300, &opts(&[256])).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].round, TileRound::Base);
    }

    #[test]
    fn undersized_scene_yields_empty_set() {
        let tiles = tile_multiscale(100, 100, &opts(&[128, 256])).unwrap();
        assert!(tiles.is_empty());
    }

    #[test]
    fn extra_rounds_add_single_axis_offsets() {
        let base = tile_multiscale(512, 512, &opts(&[256])).unwrap().len();
        let mut o = opts(&[256]);
        o.extra_offset_rounds = true;
        let extra = tile_multiscale(512, 512, &o).unwrap();
        assert!(extra.len() > base);
        assert!(extra.iter().any(|t| t.round == TileRound::OffsetX));
        assert!(extra.iter().any(|t| t.round == TileRound::OffsetY));
    }

    /// Brute-force containment enumerator over all candidate origins.
    fn enumerate_tiles(width: usize, height: usize, scales: &[usize]) -> Vec<(usize, usize, usize, bool)> {
        let mut out = Vec::new();
        for &s in scales {
            for y in 0..height {
                for x in 0..width {
                    if x + s <= width && y + s <= height {
                        if x % s == 0 && y % s == 0 {
                            out.push((s, x, y, false));
                        }
                        let h = s / 2;
                        if x >= h && y >= h && (x - h) % s == 0 && (y - h) % s == 0 {
                            out.push((s, x, y, true));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn tiling_matches_brute_force_enumeration() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let w = 64 + rng.below(700);
            let h = 64 + rng.below(700);
            let scales = [64, 128, 256];
            let tiles = tile_multiscale(w, h, &opts(&scales)).unwrap();
            let mut got: Vec<(usize, usize, usize, bool)> = tiles
                .iter()
                .map(|t| (t.scale, t.x, t.y, t.round == TileRound::Offset))
                .collect();
            let mut want = enumerate_tiles(w, h, &scales);
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want, "scene {w}x{h}");
        }
    }

    #[test]
    fn interior_pixels_are_covered_at_every_scale() {
        let (w, h) = (640, 512);
        let scales = [128, 256];
        let tiles = tile_multiscale(w, h, &opts(&scales)).unwrap();
        let max_scale = 256;
        for &s in &scales {
            let mut covered = vec![false; w * h];
            for t in tiles.iter().filter(|t| t.scale == s) {
                for y in t.y..t.y + s {
                    for x in t.x..t.x + s {
                        covered[y * w + x] = true;
                    }
                }
            }
            for y in 0..h - max_scale {
                for x in 0..w - max_scale {
                    assert!(covered[y * w + x], "scale {s} missed ({x}, {y})");
                }
            }
        }
    }

    #[test]
    fn no_tile_exceeds_bounds() {
        let tiles = tile_multiscale(500, 300, &opts(&[128, 256])).unwrap();
        for t in &tiles {
            assert!(t.x + t.scale <= 500 && t.y + t.scale <= 300);
        }
    }

    #[test]
    fn single_tile_aggregation_is_constant() {
        let tiles = [TileSpec {
            scale: 4,
            x: 0,
            y: 0,
            round: TileRound::Base,
        }];
        let map = aggregate_map(&tiles, &[0.7], 4, 4);
        assert!(map.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(map.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn overlapping_tiles_average() {
        let tiles = [
            TileSpec { scale: 2, x: 0, y: 0, round: TileRound::Base },
            TileSpec { scale: 2, x: 1, y: 0, round: TileRound::Offset },
        ];
        let map = aggregate_map(&tiles, &[0.2, 0.8], 3, 2);
        assert!((map.at(0, 0) - 0.2).abs() < 1e-15);
        assert!((map.at(1, 0) - 0.5).abs() < 1e-15);
        assert!((map.at(2, 0) - 0.8).abs() < 1e-15);
        assert_eq!(map.counts[1], 2);
    }

    #[test]
    fn aggregation_is_linear_in_a_constant_shift() {
        let tiles = tile_multiscale(64, 64, &opts(&[16, 32])).unwrap();
        let mut rng = Rng::new(3);
        let scores: Vec<f64> = (0..tiles.len()).map(|_| rng.next_f64() * 0.5).collect();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 0.25).collect();
        let base = aggregate_map(&tiles, &scores, 64, 64);
        let moved = aggregate_map(&tiles, &shifted, 64, 64);
        for (i, (&a, &b)) in base.values.iter().zip(&moved.values).enumerate() {
            if base.counts[i] > 0 {
                assert!((b - a - 0.25).abs() < 1e-12);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn map_values_bounded_by_score_range() {
        let tiles = tile_multiscale(96, 96, &opts(&[32])).unwrap();
        let mut rng = Rng::new(4);
        let scores: Vec<f64> = (0..tiles.len()).map(|_| rng.uniform(0.3, 0.9)).collect();
        let map = aggregate_map(&tiles, &scores, 96, 96);
        let (lo, hi) = scores
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &s| (l.min(s), h.max(s)));
        for (i, &v) in map.values.iter().enumerate() {
            if map.counts[i] > 0 {
                assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    fn flat_map(values: Vec<f64>, width: usize, height: usize) -> ProbabilityMap {
        let counts = vec![1; values.len()];
        ProbabilityMap {
            width,
            height,
            values,
            counts,
        }
    }

    #[test]
    fn median_leaves_constant_fields_alone() {
        let map = flat_map(vec![0.4; 25], 5, 5);
        let out = median_filter(&map, 3, 1).unwrap();
        assert_eq!(out.values, map.values);
    }

    #[test]
    fn median_removes_an_impulse() {
        let mut values = vec![0.2; 25];
        values[12] = 1.0;
        let map = flat_map(values, 5, 5);
        let out = median_filter(&map, 3, 1).unwrap();
        assert_eq!(out.at(2, 2), 0.2);
    }

    #[test]
    fn median_outputs_are_input_values() {
        let mut rng = Rng::new(6);
        let values: Vec<f64> = (0..64).map(|_| rng.next_f64()).collect();
        let map = flat_map(values.clone(), 8, 8);
        let out = median_filter(&map, 3, 1).unwrap();
        for v in &out.values {
            assert!(values.contains(v));
        }
        let (lo, hi) = values
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        for &v in &out.values {
            assert!(v >= lo && v <= hi);
        }
    }

    #[test]
    fn even_window_is_rejected() {
        let map = flat_map(vec![0.0; 4], 2, 2);
        assert!(matches!(median_filter(&map, 4, 1), Err(LocateError::BadWindow(4))));
        assert!(matches!(median_filter(&map, 1, 1), Err(LocateError::BadWindow(1))));
    }

    #[test]
    fn heatmap_emission_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heat.pgm");
        let tiles = tile_multiscale(8, 8, &opts(&[4])).unwrap();
        let scores = vec![1.0; tiles.len()];
        let map = aggregate_map(&tiles, &scores, 8, 8);
        let meta = HeatmapMeta::new(&tiles, &[4], 3, 1, "test");
        emit_heatmap(&map, &path, &meta).unwrap();
        let raster = crate::pgm::read_image(&path).unwrap();
        assert!(raster.pixels.iter().all(|&p| p == 255));
        let side: HeatmapMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("heat.json")).unwrap())
                .unwrap();
        assert_eq!(side.tile_counts, vec![(4, tiles.len())]);

        let zero = flat_map(vec![0.0; 64], 8, 8);
        emit_heatmap(&zero, &path, &meta).unwrap();
        let raster = crate::pgm::read_image(&path).unwrap();
        assert!(raster.pixels.iter().all(|&p| p == 0));
    }
}
