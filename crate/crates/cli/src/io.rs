//! File formats used by the subcommands: JSON, PNG color/mask/depth, PLY.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use image::{ImageBuffer, ImageEncoder, Luma, Rgb};
use serde::de::DeserializeOwned;
use serde::Serialize;
use splatpose::util::write_atomic;
use splatpose::{GaussianCloud, Image, Mask};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |w| w.write_all(bytes)).with_context(|| format!("cannot write {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<GaussianCloud> {
    splatpose::ply::load_ply(path).with_context(|| format!("cannot load model {}", path.display()))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).with_context(|| format!("cannot read image {}", path.display()))
}

/// RGB in `[0, 1]`; 8- and 16-bit inputs, alpha dropped.
pub fn read_color(path: &Path) -> Result<Image> {
    let img = open_png(path)?.to_rgb32f();
    let (w, h) = img.dimensions();
    Ok(Image::from_vec(
        w as usize,
        h as usize,
        3,
        img.into_raw().into_iter().map(f64::from).collect(),
    ))
}

/// Nonzero pixels are valid.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let img = open_png(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Mask {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|v| v != 0).collect(),
    })
}

/// 16-bit millimeters to scene units (meters); 0 stays invalid.
pub fn read_depth(path: &Path) -> Result<Image> {
    let dynimg = open_png(path)?;
    if !matches!(dynimg, image::DynamicImage::ImageLuma16(_)) {
        bail!("depth image {} must be 16-bit single-channel", path.display());
    }
    let img = dynimg.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Image::from_vec(
        w as usize,
        h as usize,
        1,
        img.into_raw().into_iter().map(|v| v as f64 / 1000.0).collect(),
    ))
}

fn encode_png<P: image::PixelWithColorType>(buf: &ImageBuffer<P, Vec<P::Subpixel>>) -> Result<Vec<u8>>
where
    [P::Subpixel]: image::EncodableLayout,
{
    use image::EncodableLayout;
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes).write_image(
        buf.as_raw().as_bytes(),
        buf.width(),
        buf.height(),
        P::COLOR_TYPE,
    )?;
    Ok(bytes)
}

pub fn write_color(path: &Path, img: &Image) -> Result<()> {
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (img.get(x as usize, y as usize, c).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    });
    write_bytes(path, &encode_png(&buf)?)
}

pub fn write_depth(path: &Path, depth: &Image) -> Result<()> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(depth.width as u32, depth.height as u32, |x, y| {
            Luma([(depth.get(x as usize, y as usize, 0) * 1000.0)
                .round()
                .clamp(0.0, 65535.0) as u16])
        });
    write_bytes(path, &encode_png(&buf)?)
}
