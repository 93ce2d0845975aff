//! Input preprocessing and token-grid rearrangements.

use crate::bbox::NormBBox;
use crate::error::{Error, Result};
use crate::geometry::{resample_plan, FeatureGrid, Image};

/// Maps image pixel coordinates onto the padded canvas: `c = offset + scale·p`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub canvas_px: usize,
}

impl Affine {
    /// Re-expresses an image-relative box relative to the canvas.
    pub fn map_bbox(&self, b: &NormBBox, image_w: usize, image_h: usize) -> Result<NormBBox> {
        let c = self.canvas_px as f64;
        let [x1, y1, x2, y2] = b.to_abs(image_w as f64, image_h as f64);
        NormBBox::from_f64(
            (self.offset_x + self.scale_x * x1) / c,
            (self.offset_y + self.scale_y * y1) / c,
            (self.offset_x + self.scale_x * x2) / c,
            (self.offset_y + self.scale_y * y2) / c,
        )
    }
}

#[derive(Clone, Debug)]
pub struct Padded {
    pub canvas: Image,
    /// `true` where the canvas pixel is padding.
    pub pad_mask: Vec<bool>,
    pub affine: Affine,
}

/// Scales the longer side to `img_px` bilinearly and centers the result on a
/// black square canvas.
pub fn resize_pad(image: &Image, img_px: usize) -> Result<Padded> {
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 || img_px == 0 {
        return Err(Error::config("resize_pad needs a non-empty image and canvas"));
    }
    let s = img_px as f64 / h.max(w) as f64;
    let new_w = ((w as f64 * s).round() as usize).clamp(1, img_px);
    let new_h = ((h as f64 * s).round() as usize).clamp(1, img_px);
    let (ox, oy) = ((img_px - new_w) / 2, (img_px - new_h) / 2);
    let content = if (new_h, new_w) == (h, w) {
        image.clone()
    } else {
        let plan = resample_plan(h, w, [0.0, 0.0, w as f64, h as f64], new_h, new_w)?;
        image.resample(&plan, new_h, new_w)?
    };
    let c = image.channels();
    let mut canvas = Image::zeros(img_px, img_px, c);
    let mut pad_mask = vec![true; img_px * img_px];
    for y in 0..new_h {
        for x in 0..new_w {
            for ch in 0..c {
                canvas.set(y + oy, x + ox, ch, content.get(y, x, ch));
            }
            pad_mask[(y + oy) * img_px + x + ox] = false;
        }
    }
    Ok(Padded {
        canvas,
        pad_mask,
        affine: Affine {
            scale_x: new_w as f64 / w as f64,
            scale_y: new_h as f64 / h as f64,
            offset_x: ox as f64,
            offset_y: oy as f64,
            canvas_px: img_px,
        },
    })
}

fn check_divisible(h: usize, w: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::config("pixel shuffle factor must be positive"));
    }
    if h % r != 0 {
        return Err(Error::NotDivisible { dim: "height", value: h, by: r });
    }
    if w % r != 0 {
        return Err(Error::NotDivisible { dim: "width", value: w, by: r });
    }
    Ok(())
}

/// Flat source index for every element of the shuffled `(h/r)·(w/r) × c·r²`
/// layout of an `h·w × c` grid. Output channel `(by·r + bx)·c + k` of token
/// `(oy, ox)` reads channel `k` of location `(oy·r + by, ox·r + bx)`.
pub fn pixel_shuffle_index(h: usize, w: usize, c: usize, r: usize) -> Result<Vec<usize>> {
    check_divisible(h, w, r)?;
    let (oh, ow) = (h / r, w / r);
    let mut idx = Vec::with_capacity(h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for by in 0..r {
                for bx in 0..r {
                    let src = (oy * r + by) * w + ox * r + bx;
                    idx.extend((0..c).map(|k| src * c + k));
                }
            }
        }
    }
    Ok(idx)
}

pub fn pixel_shuffle(grid: &FeatureGrid, r: usize) -> Result<FeatureGrid> {
    let (h, w, c) = (grid.height(), grid.width(), grid.channels());
    let idx = pixel_shuffle_index(h, w, c, r)?;
    let data = idx.iter().map(|&i| grid.data()[i]).collect();
    FeatureGrid::new(h / r, w / r, c * r * r, data)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(grid: &FeatureGrid, r: usize) -> Result<FeatureGrid> {
    let cr = grid.channels();
    if r == 0 || cr % (r * r) != 0 {
        return Err(Error::NotDivisible {
            dim: "channels",
            value: cr,
            by: r * r,
        });
    }
    let (h, w, c) = (grid.height() * r, grid.width() * r, cr / (r * r));
    let idx = pixel_shuffle_index(h, w, c, r)?;
    let mut data = vec![0.0; h * w * c];
    for (dst, &src) in idx.iter().enumerate() {
        data[src] = grid.data()[dst];
    }
    FeatureGrid::new(h, w, c, data)
}

/// Local tiles in raster order plus a resized global view.
#[derive(Clone, Debug)]
pub struct Tiling {
    pub tiles: Vec<Image>,
    pub rows: usize,
    pub cols: usize,
    pub global: Image,
}

/// Zero-pads the image up to multiples of `tile_px` and cuts it into tiles.
pub fn tile_image(image: &Image, tile_px: usize) -> Result<Tiling> {
    if tile_px == 0 {
        return Err(Error::config("tile_px must be positive"));
    }
    let rows = image.height().div_ceil(tile_px);
    let cols = image.width().div_ceil(tile_px);
    let c = image.channels();
    let mut tiles = Vec::with_capacity(rows * cols);
    for ty in 0..rows {
        for tx in 0..cols {
            tiles.push(Image::from_fn(tile_px, tile_px, c, |y, x, ch| {
                let (sy, sx) = (ty * tile_px + y, tx * tile_px + x);
                if sy < image.height() && sx < image.width() {
                    image.get(sy, sx, ch)
                } else {
                    0.0
                }
            }));
        }
    }
    let global = resize_pad(image, tile_px)?.canvas;
    Ok(Tiling {
        tiles,
        rows,
        cols,
        global,
    })
}

/// Flat source index that reassembles tile grids stacked tile-major
/// (`rows·cols·g² × c`) into one `(rows·g)·(cols·g) × c` raster-order grid.
pub fn tile_assembly_index(rows: usize, cols: usize, g: usize, c: usize) -> Vec<usize> {
    let (h, w) = (rows * g, cols * g);
    let mut idx = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let tile = (y / g) * cols + x / g;
            let src = tile * g * g + (y % g) * g + x % g;
            idx.extend((0..c).map(|k| src * c + k));
        }
    }
    idx
}

/// Concatenates per-tile grids into their spatial arrangement.
pub fn assemble_tiles(grids: &[FeatureGrid], rows: usize, cols: usize) -> Result<FeatureGrid> {
    let first = grids.first().ok_or(Error::EmptyInput("assemble_tiles needs tiles"))?;
    let (g, c) = (first.height(), first.channels());
    if grids.len() != rows * cols || grids.iter().any(|t| t.height() != g || t.width() != g || t.channels() != c) {
        return Err(Error::config("tile grids must be square, equal-sized and rows·cols in number"));
    }
    let stacked: Vec<f64> = grids.iter().flat_map(|t| t.data().iter().copied()).collect();
    let data = tile_assembly_index(rows, cols, g, c).iter().map(|&i| stacked[i]).collect();
    FeatureGrid::new(rows * g, cols * g, c, data)
}
