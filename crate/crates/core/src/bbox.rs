//! Normalized bounding boxes and their text form.
//!
//! Coordinates are stored as integer thousandths so the 0.001 quantum is
//! exact and `parse(format(b)) == b` holds on the whole lattice.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const SCALE: f64 = 1000.0;
const MAX: u16 = 1000;

/// Box in `[0, 1]` image-relative coordinates, quantized to 3 decimals.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NormBBox {
    m: [u16; 4],
}

/// Half-away-from-zero rounding to the nearest thousandth, clamped to [0, 1].
fn quantize(v: f64) -> u16 {
    (v * SCALE).round().clamp(0.0, SCALE) as u16
}

impl NormBBox {
    /// Builds a box from thousandths; requires `x1 < x2`, `y1 < y2`, all ≤ 1000.
    pub fn from_millis(x1: u16, y1: u16, x2: u16, y2: u16) -> Result<Self> {
        if x2 > MAX || y2 > MAX || x1 >= x2 || y1 >= y2 {
            return Err(Error::DegenerateBox(format!(
                "millis ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { m: [x1, y1, x2, y2] })
    }

    /// Quantizes real coordinates; fails if the result is not a proper box.
    pub fn from_f64(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox(format!("({x1}, {y1}, {x2}, {y2})")));
        }
        Self::from_millis(quantize(x1), quantize(y1), quantize(x2), quantize(y2))
    }

    pub fn full() -> Self {
        Self { m: [0, 0, MAX, MAX] }
    }

    pub fn millis(&self) -> [u16; 4] {
        self.m
    }

    pub fn x1(&self) -> f64 {
        self.m[0] as f64 / SCALE
    }
    pub fn y1(&self) -> f64 {
        self.m[1] as f64 / SCALE
    }
    pub fn x2(&self) -> f64 {
        self.m[2] as f64 / SCALE
    }
    pub fn y2(&self) -> f64 {
        self.m[3] as f64 / SCALE
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1(), self.y1(), self.x2(), self.y2()]
    }

    /// Absolute `(x1, y1, x2, y2)` on a `width × height` canvas.
    pub fn to_abs(&self, width: f64, height: f64) -> [f64; 4] {
        [
            self.x1() * width,
            self.y1() * height,
            self.x2() * width,
            self.y2() * height,
        ]
    }
}

impl fmt::Debug for NormBBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NormBBox{}", format_bbox_text(self))
    }
}

impl fmt::Display for NormBBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_bbox_text(self))
    }
}

impl Serialize for NormBBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for NormBBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        NormBBox::from_f64(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

/// Converts a pixel box to image-relative coordinates.
///
/// Each coordinate is divided by its dimension and rounded half away from
/// zero to 3 decimals. If rounding collapses an edge, the far edge is pushed
/// out by one quantum (or the near edge pulled in when already at 1.0).
pub fn normalize_bbox(bbox_abs: [f64; 4], width_px: u32, height_px: u32) -> Result<NormBBox> {
    let [x1, y1, x2, y2] = bbox_abs;
    if !(x2 > x1 && y2 > y1) || width_px == 0 || height_px == 0 {
        return Err(Error::DegenerateBox(format!("{bbox_abs:?}")));
    }
    let (w, h) = (width_px as f64, height_px as f64);
    // Multiply first so exact half-quanta stay exact.
    let q = |v: f64, d: f64| ((v * SCALE) / d).round().clamp(0.0, SCALE) as u16;
    let fix = |lo: u16, hi: u16| -> (u16, u16) {
        if lo < hi {
            (lo, hi)
        } else if hi < MAX {
            (lo, lo + 1)
        } else {
            (MAX - 1, MAX)
        }
    };
    let (mx1, mx2) = fix(q(x1, w), q(x2, w));
    let (my1, my2) = fix(q(y1, h), q(y2, h));
    NormBBox::from_millis(mx1, my1, mx2, my2)
}

fn fmt_milli(v: u16) -> String {
    format!("{}.{:03}", v / 1000, v % 1000)
}

/// Canonical text form: `[0.123, 0.456, 0.789, 0.901]`.
pub fn format_bbox_text(b: &NormBBox) -> String {
    let [x1, y1, x2, y2] = b.m;
    format!(
        "[{}, {}, {}, {}]",
        fmt_milli(x1),
        fmt_milli(y1),
        fmt_milli(x2),
        fmt_milli(y2)
    )
}

fn parse_group(inner: &str) -> Option<NormBBox> {
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        return None;
    }
    let mut v = [0.0; 4];
    for (slot, p) in v.iter_mut().zip(&parts) {
        let looks_numeric = !p.is_empty()
            && p.chars().all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'));
        if !looks_numeric {
            return None;
        }
        let x: f64 = p.parse().ok()?;
        if !x.is_finite() {
            return None;
        }
        *slot = x.clamp(0.0, 1.0);
    }
    NormBBox::from_f64(v[0], v[1], v[2], v[3]).ok()
}

/// Bracketed groups `[...]` in order of appearance.
fn bracket_groups(s: &str) -> impl Iterator<Item = &str> {
    let mut rest = s;
    std::iter::from_fn(move || {
        let open = rest.find('[')?;
        let after = &rest[open + 1..];
        let close = after.find(']')?;
        let inner = &after[..close];
        rest = &after[close + 1..];
        Some(inner)
    })
}

/// Parses the first bracketed group of `s` as a box.
///
/// Whitespace is free; exactly four numbers are required; values are clamped
/// to `[0, 1]` and quantized. Anything else is a parse failure.
pub fn parse_bbox_text(s: &str) -> Result<NormBBox> {
    bracket_groups(s)
        .next()
        .and_then(parse_group)
        .ok_or_else(|| Error::BboxParse(s.to_string()))
}

/// First bracketed group anywhere in `s` that parses as a box.
pub fn find_bbox_in_text(s: &str) -> Option<NormBBox> {
    bracket_groups(s).find_map(parse_group)
}
