//! PNG codecs for frames, occlusion maps and KITTI-style sparse flow.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::types::{debug_validate, FlowField, Frame, OcclusionMap};

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Reads an 8- or 16-bit PNG as a frame; gray images give one channel,
/// everything else three (alpha is dropped).
pub fn read_frame_png(path: impl AsRef<Path>) -> Result<Frame> {
    let img = open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img.color(),
        image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
    );
    if gray {
        let px = img.to_luma32f().into_raw();
        Frame::new(h, w, 1, px)
    } else {
        let px = img.to_rgb32f().into_raw();
        Frame::new(h, w, 3, px)
    }
}

/// Writes an 8-bit PNG, rounding each value to the nearest 1/255.
pub fn write_frame_png(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    debug_validate(frame)?;
    let (h, w, c) = frame.dims();
    let q: Vec<u8> = frame.pixels().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = if c == 1 {
        DynamicImage::ImageLuma8(ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, q).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(ImageBuffer::<Rgb<u8>, _>::from_raw(w as u32, h as u32, q).expect("buffer size"))
    };
    save(img, path.as_ref())
}

/// Writes occlusion as 8-bit gray, 255 = occluded.
pub fn write_occ_png(occ: &OcclusionMap, path: impl AsRef<Path>) -> Result<()> {
    debug_validate(occ)?;
    let q: Vec<u8> = occ.values().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = ImageBuffer::<Luma<u8>, _>::from_raw(occ.width() as u32, occ.height() as u32, q).expect("buffer size");
    save(DynamicImage::ImageLuma8(img), path.as_ref())
}

pub fn read_occ_png(path: impl AsRef<Path>) -> Result<OcclusionMap> {
    let img = open(path.as_ref())?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    OcclusionMap::new(h, w, img.to_luma32f().into_raw())
}

const KITTI_OFFSET: f64 = 32768.0;
const KITTI_SCALE: f64 = 64.0;

/// Reads a 16-bit RGB KITTI flow PNG: `u = (r - 2^15) / 64`,
/// `v = (g - 2^15) / 64`, valid where `b > 0`.
pub fn read_kitti_png(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let img = open(path)?;
    let DynamicImage::ImageRgb16(buf) = img else {
        return Err(Error::Format(format!(
            "{}: KITTI flow must be 16-bit RGB, found {:?}",
            path.display(),
            img.color()
        )));
    };
    let (w, h) = (buf.width() as usize, buf.height() as usize);
    let mut uv = Vec::with_capacity(w * h * 2);
    let mut valid = Vec::with_capacity(w * h);
    for p in buf.pixels() {
        uv.push(((p[0] as f64 - KITTI_OFFSET) / KITTI_SCALE) as f32);
        uv.push(((p[1] as f64 - KITTI_OFFSET) / KITTI_SCALE) as f32);
        valid.push(p[2] > 0);
    }
    FlowField::new(h, w, uv, Some(valid))
}

fn kitti_quantize(x: f32) -> u16 {
    (x as f64 * KITTI_SCALE + KITTI_OFFSET).round().clamp(0.0, 65535.0) as u16
}

/// Inverse of [`read_kitti_png`]; values are rounded to the nearest 1/64 and
/// clamped to the representable range. Without a mask every pixel is valid.
pub fn write_kitti_png(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    debug_validate(flow)?;
    let (h, w) = (flow.height(), flow.width());
    let mut raw = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.get(y, x);
            raw.push(kitti_quantize(u));
            raw.push(kitti_quantize(v));
            raw.push(u16::from(flow.is_valid(y, x)));
        }
    }
    let img = ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, raw).expect("buffer size");
    save(DynamicImage::ImageRgb16(img), path.as_ref())
}
