//! 8-bit PNG input and output, mapped linearly to `[0, 1]`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantize to 8 bits, rounding halves up and clamping to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Decode PNG bytes. Grayscale images give one channel, everything else three.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("cannot decode PNG: {e}")))?;
    from_dynamic(img)
}

fn from_dynamic(img: DynamicImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
    );
    if gray {
        let g = img.to_luma16();
        let data = g.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
        Tensor::new(vec![1, h, w], data)
    } else {
        let rgb = img.to_rgb16();
        let raw = rgb.as_raw();
        let mut data = vec![0.0; 3 * h * w];
        for i in 0..h * w {
            for c in 0..3 {
                data[c * h * w + i] = raw[3 * i + c] as f64 / 65535.0;
            }
        }
        Tensor::new(vec![3, h, w], data)
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = std::fs::read(path)?;
    decode_png(&bytes)
}

fn to_dynamic(t: &Tensor) -> Result<DynamicImage> {
    let (c, h, w) = t.image_dims()?;
    let (hu, wu) = (
        u32::try_from(h).map_err(|_| Error::shape("image too tall"))?,
        u32::try_from(w).map_err(|_| Error::shape("image too wide"))?,
    );
    match c {
        1 => {
            let raw = t.data().iter().map(|&v| quantize(v)).collect();
            Ok(DynamicImage::ImageLuma8(
                GrayImage::from_raw(wu, hu, raw).expect("buffer matches dimensions"),
            ))
        }
        3 => {
            let mut raw = vec![0u8; 3 * h * w];
            for i in 0..h * w {
                for ch in 0..3 {
                    raw[3 * i + ch] = quantize(t.data()[ch * h * w + i]);
                }
            }
            Ok(DynamicImage::ImageRgb8(
                RgbImage::from_raw(wu, hu, raw).expect("buffer matches dimensions"),
            ))
        }
        _ => Err(Error::shape(format!("cannot write a {c}-channel image as PNG"))),
    }
}

pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    to_dynamic(t)?
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("cannot encode PNG: {e}")))?;
    Ok(buf.into_inner())
}

pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rounding() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(1.5 / 255.0), 2);
        assert_eq!(quantize(1.49 / 255.0), 1);
    }

    #[test]
    fn round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [1usize, 3] {
            let t = Tensor::rand_unit(&[c, 5, 7], &mut rng);
            let path = dir.path().join(format!("img{c}.png"));
            save_image(&path, &t).unwrap();
            let back = load_image(&path).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back.sub(&t).max_abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn grayscale_png_gives_one_channel() {
        let img = DynamicImage::ImageLuma8(GrayImage::from_raw(2, 1, vec![0, 255]).unwrap());
        let mut buf = std::io::Cursor::new(Vec::new());
        img.write_to(&mut buf, ImageFormat::Png).unwrap();
        let t = decode_png(buf.get_ref()).unwrap();
        assert_eq!(t.shape(), &[1, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0]);
    }

    #[test]
    fn corrupt_input_is_an_error() {
        assert!(matches!(decode_png(b"not a png"), Err(Error::Format(_))));
        let t = Tensor::zeros(&[1, 4, 4]);
        let mut png = encode_png(&t).unwrap();
        png.truncate(png.len() / 2);
        assert!(decode_png(&png).is_err());
        assert!(encode_png(&Tensor::zeros(&[2, 4, 4])).is_err());
    }
}
