//! Linear-RGB image buffers and sRGB PNG conversion.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    /// Row-major linear RGB.
    pub pixels: Vec<Vec3>,
}

pub fn srgb_encode(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    if x <= 0.003_130_8 {
        12.92 * x
    } else {
        1.055 * x.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(x: f64) -> f64 {
    if x <= 0.040_45 {
        x / 12.92
    } else {
        ((x + 0.055) / 1.055).powf(2.4)
    }
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<Vec3>) -> Result<Self> {
        if pixels.len() != width as usize * height as usize {
            return Err(Error::contract(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: Vec3) -> Self {
        Image {
            width,
            height,
            pixels: vec![color; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> Vec3 {
        self.pixels[(y * self.width + x) as usize]
    }

    /// 8-bit sRGB bytes, row-major RGB.
    pub fn to_srgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| [p.x, p.y, p.z])
            .map(|c| (srgb_encode(c) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_srgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 3 * width as usize * height as usize {
            return Err(Error::contract(
                "sRGB buffer length does not match its dimensions",
            ));
        }
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| {
                Vec3::new(
                    srgb_decode(c[0] as f64 / 255.0),
                    srgb_decode(c[1] as f64 / 255.0),
                    srgb_decode(c[2] as f64 / 255.0),
                )
            })
            .collect();
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    /// The display-space image (sRGB-encoded values in `[0, 1]`), as stored in PNGs.
    pub fn to_display(&self) -> Image {
        let pixels = self.pixels.iter().map(|p| p.map(srgb_encode)).collect();
        Image {
            width: self.width,
            height: self.height,
            pixels,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        let enc = image::codecs::png::PngEncoder::new(&mut out);
        image::ImageEncoder::write_image(
            enc,
            &self.to_srgb8(),
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
        )?;
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Image::from_srgb8(w, h, img.as_raw())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srgb_round_trips_8bit_levels() {
        for v in 0..=255u8 {
            let lin = srgb_decode(v as f64 / 255.0);
            assert_eq!((srgb_encode(lin) * 255.0).round() as u8, v);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Image::from_srgb8(2, 1, &[0, 128, 255, 10, 20, 30]).unwrap();
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        assert_eq!(back.to_srgb8(), img.to_srgb8());
        assert!(Image::new(2, 2, vec![Vec3::zeros(); 3]).is_err());
    }
}
