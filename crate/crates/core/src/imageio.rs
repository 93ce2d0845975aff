//! Lossless 8-bit PNG storage for [`Image`] rasters.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Image;

fn fmt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Writes an RGB image, quantizing each channel to `round(255·v)`.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    if image.channels() != 3 {
        return Err(fmt_err(path, format!("expected 3 channels, got {}", image.channels())));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width() as u32, image.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut w = enc.write_header().map_err(|e| fmt_err(path, e))?;
    w.write_image_data(&bytes).map_err(|e| fmt_err(path, e))?;
    w.finish().map_err(|e| fmt_err(path, e))
}

/// Reads a PNG as RGB in `[0, 1]`; gray and alpha channels are expanded or dropped.
pub fn load_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| fmt_err(path, e))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| fmt_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(fmt_err(path, format!("unsupported color type {other:?}"))),
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for px in buf[..info.buffer_size()].chunks_exact(stride) {
        if stride <= 2 {
            data.extend([px[0]; 3].map(|b| b as f64 / 255.0));
        } else {
            data.extend(px[..3].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(h, w, 3, data)
}
