use crate::error::{shape_err, Result};

/// Sparse linear resampling operator from `src_len` rows to `len()` rows.
///
/// Each output row is a weighted sum of source rows; channels are handled
/// independently. Bilinear interpolation, ROI pooling and crop-resize all
/// compile down to one of these, so the same kernel serves plain arrays and
/// the differentiable tape op.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePlan {
    src_len: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
}

pub struct SamplePlanBuilder {
    plan: SamplePlan,
}

impl SamplePlanBuilder {
    pub fn new(src_len: usize) -> Self {
        Self {
            plan: SamplePlan {
                src_len,
                offsets: vec![0],
                indices: Vec::new(),
                weights: Vec::new(),
            },
        }
    }

    /// Adds a tap to the row currently being built.
    pub fn tap(&mut self, index: usize, weight: f64) {
        debug_assert!(index < self.plan.src_len);
        self.plan.indices.push(index);
        self.plan.weights.push(weight);
    }

    pub fn finish_row(&mut self) {
        self.plan.offsets.push(self.plan.indices.len());
    }

    pub fn build(self) -> SamplePlan {
        self.plan
    }
}

impl SamplePlan {
    pub fn src_len(&self) -> usize {
        self.src_len
    }

    /// Number of output rows.
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.weights[span].iter().copied())
    }

    /// Applies the plan to `src` laid out as `src_len × channels`.
    pub fn apply(&self, src: &[f64], channels: usize) -> Result<Vec<f64>> {
        if src.len() != self.src_len * channels {
            return Err(shape_err(
                "SamplePlan::apply",
                format!(
                    "expected {}x{channels} values, got {}",
                    self.src_len,
                    src.len()
                ),
            ));
        }
        let mut out = vec![0.0; self.len() * channels];
        for (r, dst) in out.chunks_exact_mut(channels.max(1)).enumerate().take(self.len()) {
            for (i, w) in self.row(r) {
                let s = &src[i * channels..(i + 1) * channels];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
        Ok(out)
    }

    /// Accumulates the adjoint: `grad_src += planᵀ · grad_out`.
    pub(crate) fn apply_adjoint(&self, grad_out: &[f64], channels: usize, grad_src: &mut [f64]) {
        for r in 0..self.len() {
            let g = &grad_out[r * channels..(r + 1) * channels];
            for (i, w) in self.row(r) {
                let d = &mut grad_src[i * channels..(i + 1) * channels];
                for (dv, gv) in d.iter_mut().zip(g) {
                    *dv += w * gv;
                }
            }
        }
    }
}

/// Bilinear taps at continuous index-space position `(y, x)` on an `h × w`
/// lattice. The position is clamped to `[0, h-1] × [0, w-1]` first.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h - 1);
    let x0 = (x.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}
