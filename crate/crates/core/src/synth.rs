//! Deterministic shape-world scenes with known regions and captions.
//!
//! Shapes live on an 8×8 cell lattice, so every box edge is a multiple of
//! 1/8 of the canvas and normalizes exactly. Records are emitted at a nominal
//! pixel size large enough to pass the default curation filters, while the
//! stored render uses the much smaller `canvas_px`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{record_to_line, write_shards, RawRecord, RegionAnnotation};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::imageio::save_png;

pub const GRID_CELLS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Square,
    Bar,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Bar, ShapeKind::Cross];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Bar => "bar",
            ShapeKind::Cross => "cross",
        }
    }
}

/// Palette entries as (name, 8-bit RGB).
pub const PALETTE: [(&str, [u8; 3]); 8] = [
    ("red", [255, 0, 0]),
    ("green", [0, 255, 0]),
    ("blue", [0, 0, 255]),
    ("yellow", [255, 255, 0]),
    ("cyan", [0, 255, 255]),
    ("magenta", [255, 0, 255]),
    ("white", [255, 255, 255]),
    ("orange", [255, 128, 0]),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Index into [`PALETTE`].
    pub color: usize,
    /// `(x1, y1, x2, y2)` in lattice cells, half-open.
    pub cells: [usize; 4],
}

impl Shape {
    pub fn caption(&self) -> String {
        format!("{} {}", PALETTE[self.color].0, self.kind.name())
    }

    /// Whether lattice-relative point `(u, v)` in cell units is painted.
    fn covers(&self, u: f64, v: f64) -> bool {
        let [x1, y1, x2, y2] = self.cells.map(|c| c as f64);
        let inside = u >= x1 && u < x2 && v >= y1 && v < y2;
        match self.kind {
            ShapeKind::Square | ShapeKind::Bar => inside,
            ShapeKind::Cross => inside && ((u - x1 >= 1.0 && u - x1 < 2.0) || (v - y1 >= 1.0 && v - y1 < 2.0)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Side of the stored render.
    pub canvas_px: usize,
    /// Side reported in the record, used for curation thresholds.
    pub nominal_px: u32,
    /// Trailing scenes written to `heldout-*.jsonl` instead of `scenes-*.jsonl`.
    pub holdout: usize,
    pub shard_max_lines: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_px: 64,
            nominal_px: 512,
            holdout: 0,
            shard_max_lines: 10_000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_px == 0 || self.canvas_px % GRID_CELLS != 0 {
            return Err(Error::NotDivisible {
                dim: "canvas_px",
                value: self.canvas_px,
                by: GRID_CELLS,
            });
        }
        if self.nominal_px as usize % GRID_CELLS != 0 {
            return Err(Error::NotDivisible {
                dim: "nominal_px",
                value: self.nominal_px as usize,
                by: GRID_CELLS,
            });
        }
        if self.shard_max_lines == 0 {
            return Err(Error::config("shard_max_lines must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    /// Sorted by top-left corner in raster order.
    pub shapes: Vec<Shape>,
}

/// Per-record seed derived from the corpus seed and the record's index.
pub fn record_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn footprint(kind: ShapeKind, rng: &mut ChaCha8Rng) -> (usize, usize) {
    match kind {
        ShapeKind::Square => *[(2, 2), (3, 3)].choose(rng).expect("non-empty"),
        ShapeKind::Bar => *[(4, 2), (2, 4)].choose(rng).expect("non-empty"),
        ShapeKind::Cross => (3, 3),
    }
}

/// Samples 1–3 non-overlapping shapes with distinct (color, kind) pairs.
pub fn scene_spec(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wanted = rng.gen_range(1..=3);
    let mut occupied = [[false; GRID_CELLS]; GRID_CELLS];
    let mut shapes: Vec<Shape> = Vec::new();
    let mut attempts = 0;
    while shapes.len() < wanted && attempts < 200 {
        attempts += 1;
        let kind = *ShapeKind::ALL.choose(&mut rng).expect("non-empty");
        let color = rng.gen_range(0..PALETTE.len());
        if shapes.iter().any(|s| s.kind == kind && s.color == color) {
            continue;
        }
        let (w, h) = footprint(kind, &mut rng);
        let x1 = rng.gen_range(0..=GRID_CELLS - w);
        let y1 = rng.gen_range(0..=GRID_CELLS - h);
        let free = (y1..y1 + h).all(|y| (x1..x1 + w).all(|x| !occupied[y][x]));
        if !free {
            continue;
        }
        for row in occupied.iter_mut().skip(y1).take(h) {
            for cell in row.iter_mut().skip(x1).take(w) {
                *cell = true;
            }
        }
        shapes.push(Shape {
            kind,
            color,
            cells: [x1, y1, x1 + w, y1 + h],
        });
    }
    shapes.sort_by_key(|s| (s.cells[1], s.cells[0]));
    SceneSpec { seed, shapes }
}

fn with_article(caption: &str) -> String {
    let vowel = caption.starts_with(['a', 'e', 'i', 'o', 'u']);
    format!("{} {caption}", if vowel { "an" } else { "a" })
}

/// "a red square, a blue cross and an orange bar on a black background".
pub fn global_caption(spec: &SceneSpec) -> String {
    let parts: Vec<String> = spec.shapes.iter().map(|s| with_article(&s.caption())).collect();
    let listed = match parts.as_slice() {
        [] => String::from("nothing"),
        [one] => one.clone(),
        [init @ .., last] => format!("{} and {last}", init.join(", ")),
    };
    format!("{listed} on a black background")
}

/// Black canvas with each shape painted in its palette color.
pub fn render(spec: &SceneSpec, canvas_px: usize) -> Image {
    let cell = canvas_px as f64 / GRID_CELLS as f64;
    Image::from_fn(canvas_px, canvas_px, 3, |y, x, c| {
        let (u, v) = ((x as f64 + 0.5) / cell, (y as f64 + 0.5) / cell);
        spec.shapes
            .iter()
            .find(|s| s.covers(u, v))
            .map_or(0.0, |s| PALETTE[s.color].1[c] as f64 / 255.0)
    })
}

pub fn scene_record(spec: &SceneSpec, record_id: &str, image_ref: &str, nominal_px: u32) -> RawRecord {
    let unit = nominal_px as f64 / GRID_CELLS as f64;
    RawRecord {
        record_id: record_id.to_string(),
        source: "synthetic".to_string(),
        width_px: nominal_px,
        height_px: nominal_px,
        image_ref: image_ref.to_string(),
        global_caption: Some(global_caption(spec)),
        regions: spec
            .shapes
            .iter()
            .map(|s| RegionAnnotation {
                bbox_abs: s.cells.map(|c| c as f64 * unit),
                caption: s.caption(),
            })
            .collect(),
    }
}

/// Record and render for one seed; the image reference is `images/<id>.png`.
pub fn gen_scene(seed: u64, record_id: &str, cfg: &SynthConfig) -> (RawRecord, Image) {
    let spec = scene_spec(seed);
    let image = render(&spec, cfg.canvas_px);
    let record = scene_record(&spec, record_id, &format!("images/{record_id}.png"), cfg.nominal_px);
    (record, image)
}

/// Writes `n` scenes (record `i` uses `record_seed(seed, i)`) as PNGs under
/// `out_dir/images` and JSONL shards in `out_dir`. Returns shard paths,
/// training shards first.
pub fn gen_corpus(n: usize, seed: u64, out_dir: &Path, cfg: &SynthConfig) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Err(Error::EmptyInput("gen_corpus needs n >= 1"));
    }
    cfg.validate()?;
    if cfg.holdout > n {
        return Err(Error::config(format!("holdout {} exceeds n = {n}", cfg.holdout)));
    }
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut lines = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("scene-{i:05}");
        let (record, image) = gen_scene(record_seed(seed, i as u64), &id, cfg);
        save_png(&image, &out_dir.join(&record.image_ref))?;
        lines.push(record_to_line(&record));
    }
    let split = n - cfg.holdout;
    let mut paths = write_shards(out_dir, "scenes", &lines[..split], cfg.shard_max_lines)?;
    paths.extend(write_shards(out_dir, "heldout", &lines[split..], cfg.shard_max_lines)?);
    Ok(paths)
}
