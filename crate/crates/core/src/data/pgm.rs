//! 8-bit grayscale images stored as PGM.

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Image { path: "<memory>".into(), detail: format!("degenerate size {width}x{height}") });
        }
        if pixels.len() != width * height {
            return Err(Error::Image {
                path: "<memory>".into(),
                detail: format!("{width}x{height} image with {} pixels", pixels.len()),
            });
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Binary `P5` encoding.
    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        PnmEncoder::new(&mut out)
            .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
            .write_image(&self.pixels, self.width as u32, self.height as u32, ExtendedColorType::L8)
            .expect("in-memory PGM encoding");
        out
    }
}

/// Decode a PGM image (binary or ASCII). Color images are rejected; 16-bit
/// samples are reduced to 8 bits.
pub fn parse_pgm(bytes: &[u8], path: &str) -> Result<GrayImage> {
    let fail = |detail: String| Error::Image { path: path.to_string(), detail };
    let decoded = image::load_from_memory_with_format(bytes, ImageFormat::Pnm).map_err(|e| fail(e.to_string()))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let pixels = match decoded {
        DynamicImage::ImageLuma8(img) => img.into_raw(),
        img @ DynamicImage::ImageLuma16(_) => img.to_luma8().into_raw(),
        other => return Err(fail(format!("expected a grayscale image, found {:?}", other.color()))),
    };
    GrayImage::new(width, height, pixels).map_err(|e| fail(e.to_string()))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingImage(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    parse_pgm(&bytes, &path.display().to_string())
}

pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    fs::write(path, image.to_pgm_bytes())?;
    Ok(())
}
