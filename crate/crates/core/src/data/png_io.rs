use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn image_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.display().to_string(),
        msg: msg.to_string(),
    }
}

/// Reads an RGB or grayscale PNG as a `(1, 3, H, W)` tensor in `[0, 1]`.
///
/// Grayscale is replicated to three channels; images with alpha are rejected.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| image_err(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| image_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let per_pixel = match info.color_type {
        ColorType::Rgb => 3,
        ColorType::Grayscale => 1,
        ColorType::Rgba | ColorType::GrayscaleAlpha => {
            return Err(image_err(path, "images with an alpha channel are not supported"))
        }
        other => return Err(image_err(path, format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        let line = &buf[y * info.line_size..y * info.line_size + w * per_pixel];
        for x in 0..w {
            for c in 0..3 {
                let byte = line[x * per_pixel + if per_pixel == 3 { c } else { 0 }];
                data[(c * h + y) * w + x] = T::of(byte as f64 / 255.0);
            }
        }
    }
    Tensor::new(&[1, 3, h, w], data)
}

/// Writes one `(1, 3, H, W)` or `(3, H, W)` image as 8-bit RGB, clamping to
/// `[0, 1]` and rounding half to even.
pub fn save_png<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    save_png_with_text(path, img, &[])
}

/// [`save_png`] plus UTF-8 text chunks.
pub fn save_png_with_text<T: Scalar>(path: &Path, img: &Tensor<T>, text: &[(&str, &str)]) -> Result<()> {
    let (c, h, w) = match *img.shape() {
        [1, c, h, w] | [c, h, w] => (c, h, w),
        _ => return Err(image_err(path, format!("expected one CHW image, got {:?}", img.shape()))),
    };
    if c != 3 {
        return Err(image_err(path, format!("expected 3 channels, got {c}")));
    }
    let d = img.data();
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = d[(ch * h + y) * w + x].to_f64_lossy().clamp(0.0, 1.0);
                bytes.push((v * 255.0).round_ties_even() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| image_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(ColorType::Rgb);
    enc.set_depth(BitDepth::Eight);
    for (key, value) in text {
        enc.add_itxt_chunk((*key).to_owned(), (*value).to_owned())
            .map_err(|e| image_err(path, e))?;
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, color: ColorType, w: u32, h: u32, bytes: &[u8]) {
        let file = File::create(path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
        enc.set_color(color);
        enc.set_depth(BitDepth::Eight);
        let mut writer = enc.write_header().unwrap();
        writer.write_image_data(bytes).unwrap();
    }

    #[test]
    fn roundtrip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let t = Tensor::<f64>::from_fn(&[1, 3, 5, 7], |i| ((i * 37) % 101) as f64 / 100.0);
        save_png(&p, &t).unwrap();
        let back: Tensor<f64> = load_png(&p).unwrap();
        assert!(back.max_abs_diff(&t).unwrap() <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn grayscale_promoted_alpha_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = dir.path().join("g.png");
        write_raw(&g, ColorType::Grayscale, 2, 1, &[0, 255]);
        let t: Tensor<f64> = load_png(&g).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let a = dir.path().join("a.png");
        write_raw(&a, ColorType::Rgba, 1, 1, &[1, 2, 3, 4]);
        assert!(load_png::<f64>(&a).is_err());
        let junk = dir.path().join("j.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(load_png::<f64>(&junk).is_err());
    }
}
