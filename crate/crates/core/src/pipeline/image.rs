//! Image files to and from `[3, H, W]` tensors in `[0, 1]`: PNG and binary
//! PPM (P6), plus bilinear resizing.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, Rgb32FImage, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// File extensions recognised as images.
pub const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

/// Loads and bilinearly resizes to `extent` when the sizes differ.
pub fn load_image_resized(path: impl AsRef<Path>, extent: (usize, usize)) -> Result<Tensor<f32>> {
    let t = load_image(path)?;
    if t.shape()[1..] == [extent.0, extent.1] {
        Ok(t)
    } else {
        resize_bilinear(&t, extent)
    }
}

pub fn from_rgb8(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Quantizes to 8 bits, clamping to `[0, 1]`.
pub fn to_rgb8(t: &Tensor<f32>) -> Result<RgbImage> {
    let (h, w) = check_rgb(t)?;
    let plane = h * w;
    let mut raw = vec![0u8; 3 * plane];
    for (p, px) in raw.chunks_mut(3).enumerate() {
        for c in 0..3 {
            px[c] = (t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image"))
}

fn check_rgb(t: &Tensor<f32>) -> Result<(usize, usize)> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::dim("image", format!("expected [3, H, W], got {:?}", t.shape())));
    }
    Ok((t.shape()[1], t.shape()[2]))
}

/// Writes PNG or binary PPM depending on the extension.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor<f32>) -> Result<()> {
    let path = path.as_ref();
    let img = to_rgb8(t)?;
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let out = BufWriter::new(file);
    let res = match format {
        ImageFormat::Pnm => PnmEncoder::new(out)
            .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
            .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8),
        ImageFormat::Png => image::codecs::png::PngEncoder::new(out).write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            ExtendedColorType::Rgb8,
        ),
        _ => return Err(Error::Format(format!("{}: only .png and .ppm are written", path.display()))),
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Bilinear (triangle-filter) resize to `(height, width)`.
pub fn resize_bilinear(t: &Tensor<f32>, extent: (usize, usize)) -> Result<Tensor<f32>> {
    let (h, w) = check_rgb(t)?;
    if extent.0 == 0 || extent.1 == 0 {
        return Err(Error::Config("resize target must be non-empty".into()));
    }
    let plane = h * w;
    let interleaved: Vec<f32> = (0..3 * plane).map(|i| t.data()[(i % 3) * plane + i / 3]).collect();
    let src = Rgb32FImage::from_raw(w as u32, h as u32, interleaved).expect("buffer sized to image");
    let dst = imageops::resize(&src, extent.1 as u32, extent.0 as u32, FilterType::Triangle);
    let (oh, ow) = extent;
    let raw = dst.as_raw();
    Ok(Tensor::from_fn(&[3, oh, ow], |i| {
        let (c, p) = (i / (oh * ow), i % (oh * ow));
        raw[p * 3 + c]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::from_fn(&[3, 5, 7], |i| ((i * 37) % 256) as f32 / 255.0)
    }

    #[test]
    fn png_and_ppm_roundtrip_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let t = sample();
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("x.{ext}"));
            save_image(&p, &t).unwrap();
            assert_eq!(load_image(&p).unwrap(), t, "{ext}");
        }
        let head = std::fs::read(dir.path().join("x.ppm")).unwrap();
        assert_eq!(&head[..2], b"P6");
    }

    #[test]
    fn undecodable_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not an image").unwrap();
        let err = load_image(&p).unwrap_err();
        assert!(err.to_string().contains("bad.png"), "{err}");
    }

    #[test]
    fn resize_identity_and_constant() {
        let t = sample();
        assert_eq!(resize_bilinear(&t, (5, 7)).unwrap().max_abs_diff(&t), 0.0);
        let c = Tensor::full(&[3, 10, 10], 0.25f32);
        let r = resize_bilinear(&c, (4, 6)).unwrap();
        assert_eq!(r.shape(), &[3, 4, 6]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-6));
    }
}
