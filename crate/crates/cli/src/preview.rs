//! Advisory PNG previews. The raw tensor files are the artifacts of record;
//! these are 8-bit grayscale renderings with a fixed linear mapping so two
//! runs of the same model produce byte-identical images.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use kscan::error::Result;
use kscan::tensor::Tensor;

/// Clip to `[lo, hi]`, map linearly onto 0..=255, write grayscale PNG.
pub fn write_gray_png(path: &Path, img: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let span = hi - lo;
    let data: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (((v.clamp(lo, hi) - lo) / span) * 255.0).round() as u8)
        .collect();
    let file = File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(io_err)?;
    writer.write_image_data(&data).map_err(io_err)?;
    Ok(())
}

fn io_err(e: png::EncodingError) -> kscan::error::Error {
    std::io::Error::other(e).into()
}
