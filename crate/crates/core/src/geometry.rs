//! Rasters, box overlap, and the resampling operators built on [`SamplePlan`].
//!
//! Pixel `i` covers the continuous interval `[i, i+1)`; its center sits at
//! `i + 0.5`, which is index-space position `i` for bilinear interpolation.

use finegrain_autodiff::{bilinear_taps, SamplePlan, SamplePlanBuilder, Tensor};

use crate::bbox::NormBBox;
use crate::error::{Error, Result};

/// Row-major `height × width × channels` array of `f64`.
#[derive(Clone, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// RGB image with values in `[0, 1]`.
pub type Image = Raster;

/// Spatial grid of feature vectors.
pub type FeatureGrid = Raster;

impl std::fmt::Debug for Raster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Raster({}x{}x{})", self.height, self.width, self.channels)
    }
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::config(format!(
                "raster {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    /// `[height·width, channels]` tensor, one row per location.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height * self.width, self.channels], self.data.clone())
            .expect("raster length invariant")
    }

    pub fn from_tensor(height: usize, width: usize, t: &Tensor) -> Result<Self> {
        match t.shape() {
            [n, c] if *n == height * width => Self::new(height, width, *c, t.to_vec()),
            s => Err(Error::config(format!(
                "tensor {s:?} is not a {height}x{width} grid"
            ))),
        }
    }

    /// Applies a plan over this raster's locations, producing `out_h × out_w`.
    pub fn resample(&self, plan: &SamplePlan, out_h: usize, out_w: usize) -> Result<Self> {
        if plan.src_len() != self.height * self.width || plan.len() != out_h * out_w {
            return Err(Error::config(format!(
                "plan {}→{} does not map {}x{} to {out_h}x{out_w}",
                plan.src_len(),
                plan.len(),
                self.height,
                self.width
            )));
        }
        let data = plan.apply(&self.data, self.channels)?;
        Self::new(out_h, out_w, self.channels, data)
    }
}

/// Intersection over union; 0 when the union is empty.
///
/// Computed in integer thousandths so the only rounding is the final division.
pub fn iou(a: &NormBBox, b: &NormBBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.millis().map(i64::from);
    let [bx1, by1, bx2, by2] = b.millis().map(i64::from);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0);
    let inter = iw * ih;
    let union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter;
    if union <= 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Fraction of pairs with IoU ≥ `tau`; a missing prediction is a miss.
pub fn acc_at_iou(preds: &[Option<NormBBox>], gts: &[NormBBox], tau: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(Error::LengthMismatch(preds.len(), gts.len()));
    }
    if gts.is_empty() {
        return Err(Error::EmptyInput("acc_at_iou needs at least one pair"));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| p.is_some_and(|p| iou(&p, g) >= tau))
        .count();
    Ok(hits as f64 / gts.len() as f64)
}

/// ROIAlign as a resampling plan from an `h × w` grid to `out × out` bins.
///
/// `bbox` is `(x1, y1, x2, y2)` relative to the grid extent. Each bin averages
/// `sampling²` bilinear samples placed at the centers of a regular sub-grid.
pub fn roi_align_plan(
    h: usize,
    w: usize,
    bbox: [f64; 4],
    out: usize,
    sampling: usize,
) -> Result<SamplePlan> {
    if h == 0 || w == 0 || out == 0 || sampling == 0 {
        return Err(Error::config("roi_align needs non-empty grid, output and sampling"));
    }
    let [x1, y1, x2, y2] = bbox;
    let (x1c, y1c) = (x1 * w as f64, y1 * h as f64);
    let (bw, bh) = ((x2 - x1) * w as f64, (y2 - y1) * h as f64);
    if !(bw > 1e-9 && bh > 1e-9) {
        return Err(Error::DegenerateBox(format!("{bbox:?} on {h}x{w} grid")));
    }
    let (bin_w, bin_h) = (bw / out as f64, bh / out as f64);
    let s = sampling as f64;
    let norm = 1.0 / (s * s);
    let mut b = SamplePlanBuilder::new(h * w);
    for i in 0..out {
        for j in 0..out {
            for ky in 0..sampling {
                let y = y1c + (i as f64 + (ky as f64 + 0.5) / s) * bin_h - 0.5;
                for kx in 0..sampling {
                    let x = x1c + (j as f64 + (kx as f64 + 0.5) / s) * bin_w - 0.5;
                    for (idx, wt) in bilinear_taps(y, x, h, w) {
                        b.tap(idx, wt * norm);
                    }
                }
            }
            b.finish_row();
        }
    }
    Ok(b.build())
}

/// Pools the region `bbox` of `grid` into an `out × out` grid.
pub fn roi_align(grid: &FeatureGrid, bbox: &NormBBox, out: usize, sampling: usize) -> Result<FeatureGrid> {
    let plan = roi_align_plan(grid.height, grid.width, bbox.as_array(), out, sampling)?;
    grid.resample(&plan, out, out)
}

/// Plan that crops `rect = (x1, y1, x2, y2)` (pixels) out of an
/// `src_h × src_w` image and resizes it to `out_h × out_w` bilinearly.
///
/// Sample positions are clamped to the crop's own pixel centers, so for an
/// integer rectangle this equals cropping first and resizing the crop.
pub fn resample_plan(
    src_h: usize,
    src_w: usize,
    rect: [f64; 4],
    out_h: usize,
    out_w: usize,
) -> Result<SamplePlan> {
    let [x1, y1, x2, y2] = rect;
    if !(x2 > x1 && y2 > y1) || src_h == 0 || src_w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::DegenerateBox(format!("{rect:?} on {src_h}x{src_w} image")));
    }
    let axis = |lo: f64, hi: f64, n: usize, i: usize| {
        let c = lo + (i as f64 + 0.5) * (hi - lo) / n as f64 - 0.5;
        let first = lo.max(0.0);
        let last = (hi - 1.0).max(first);
        c.clamp(first, last)
    };
    let mut b = SamplePlanBuilder::new(src_h * src_w);
    for i in 0..out_h {
        let y = axis(y1, y2, out_h, i);
        for j in 0..out_w {
            let x = axis(x1, x2, out_w, j);
            for (idx, wt) in bilinear_taps(y, x, src_h, src_w) {
                b.tap(idx, wt);
            }
            b.finish_row();
        }
    }
    Ok(b.build())
}

/// Crops a pixel box out of `image` and resizes it to `out_px × out_px`.
pub fn crop_resize(image: &Image, bbox_abs: [f64; 4], out_px: usize) -> Result<Image> {
    let plan = resample_plan(image.height, image.width, bbox_abs, out_px, out_px)?;
    image.resample(&plan, out_px, out_px)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nb(x1: u16, y1: u16, x2: u16, y2: u16) -> NormBBox {
        NormBBox::from_millis(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&nb(0, 0, 500, 500), &nb(0, 0, 500, 500)), 1.0);
        assert_eq!(iou(&nb(0, 0, 500, 500), &nb(500, 500, 1000, 1000)), 0.0);
        let v = iou(&nb(0, 0, 500, 500), &nb(250, 250, 750, 750));
        assert!((v - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn acc_examples() {
        let a = nb(0, 0, 500, 500);
        let b = nb(250, 250, 750, 750);
        let acc = acc_at_iou(&[Some(a), None], &[a, a], 0.5).unwrap();
        assert_eq!(acc, 0.5);
        assert_eq!(acc_at_iou(&[Some(b)], &[a], 0.5).unwrap(), 0.0);
        assert!(matches!(acc_at_iou(&[None], &[a, a], 0.5), Err(Error::LengthMismatch(1, 2))));
        assert!(matches!(acc_at_iou(&[], &[], 0.5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn roi_full_box_is_identity() {
        let g = Raster::from_fn(4, 4, 2, |y, x, c| (y * 4 + x) as f64 * 0.37 + c as f64);
        let out = roi_align(&g, &NormBBox::full(), 4, 1).unwrap();
        assert!(out.data().iter().zip(g.data()).all(|(a, b)| (a - b).abs() <= 1e-12));
    }

    #[test]
    fn roi_constant_field() {
        let g = Raster::from_fn(6, 6, 1, |_, _, _| 2.5);
        let out = roi_align(&g, &nb(130, 70, 910, 640), 3, 2).unwrap();
        assert!(out.data().iter().all(|v| (v - 2.5).abs() <= 1e-12));
    }

    #[test]
    fn roi_rejects_degenerate() {
        assert!(matches!(
            roi_align_plan(4, 4, [0.5, 0.2, 0.5, 0.8], 2, 2),
            Err(Error::DegenerateBox(_))
        ));
    }

    #[test]
    fn crop_resize_upsamples_checkerboard() {
        let img = Raster::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = crop_resize(&img, [0.0, 0.0, 2.0, 2.0], 4).unwrap();
        // Sample coordinates per axis: 0, 0.25, 0.75, 1.
        let w = [0.0, 0.25, 0.75, 1.0];
        for i in 0..4 {
            for j in 0..4 {
                let (fy, fx) = (w[i], w[j]);
                let expect = (1.0 - fy) * fx + fy * (1.0 - fx);
                assert!((out.get(i, j, 0) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn crop_resize_same_size_is_crop() {
        let img = Raster::from_fn(8, 8, 3, |y, x, c| (y * 31 + x * 7 + c) as f64);
        let out = crop_resize(&img, [2.0, 3.0, 6.0, 7.0], 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    assert_eq!(out.get(y, x, c), img.get(y + 3, x + 2, c));
                }
            }
        }
    }
}
