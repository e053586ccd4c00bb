use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Maps a `[3, H, W]` tensor in `[-1, 1]` to interleaved 8-bit RGB.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            let v = ((d[c * h * w + i] + 1.0) * 127.5).round().clamp(0.0, 255.0);
            out.push(v as u8);
        }
    }
    Ok((h, w, out))
}

/// Writes an 8-bit PNG preview.
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, rgb) = to_rgb8(img)?;
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path)(std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&rgb).map_err(to_io)?;
    writer.finish().map_err(to_io)
}

/// Tiles equally sized images into a grid, each pixel repeated `upscale`
/// times in both directions.
pub fn tile(images: &[Tensor], cols: usize, upscale: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::EmptyInput("image grid".into()))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || images.iter().any(|x| x.shape() != shape.as_slice()) {
        return Err(Error::Dimension("grid images must share one [C, H, W] shape".into()));
    }
    let (ch, s_h, s_w) = (shape[0], shape[1], shape[2]);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (h, w) = (rows * s_h * upscale, cols * s_w * upscale);
    let mut data = vec![-1.0; ch * h * w];
    for (n, img) in images.iter().enumerate() {
        let (r0, c0) = (n / cols * s_h * upscale, n % cols * s_w * upscale);
        for c in 0..ch {
            for y in 0..s_h * upscale {
                for x in 0..s_w * upscale {
                    data[c * h * w + (r0 + y) * w + c0 + x] =
                        img.data()[c * s_h * s_w + (y / upscale) * s_w + x / upscale];
                }
            }
        }
    }
    Ok(Tensor::new(vec![ch, h, w], data))
}
