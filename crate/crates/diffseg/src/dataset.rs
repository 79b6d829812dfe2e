//! On-disk datasets.
//!
//! 2D layout: `<root>/images/<stem>.{png,tif,tiff}` and optional
//! `<root>/masks/<stem>.png` whose pixel values are class indices.
//! Volumes: a JSON header (`shape = [c, d, h, w]`, `dtype = "f32le"`, `data`
//! file name) next to a raw little-endian `f32` array in C order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use diffseg_core::data::{LabelMap, SegmentationSample};
use diffseg_core::Tensor;
use image::{DynamicImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff"];

fn files_by_stem(dir: &Path, extensions: &[&str]) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        let Some(ext) = ext else { continue };
        if !path.is_file() || !extensions.contains(&ext.as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::format(&path, "file name is not valid UTF-8"))?
            .to_string();
        if let Some(prev) = out.insert(stem, path.clone()) {
            return Err(Error::format(&path, format!("duplicate stem with {}", prev.display())));
        }
    }
    Ok(out)
}

/// `[C, H, W]` image in `[-1, 1]`. Grayscale files give one channel, colour
/// files three (alpha is dropped). 8- and 16-bit integer rasters are scaled
/// by their full range; float rasters are assumed to lie in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(Error::image(path))?;
    let color = img.color();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = if color.has_color() { 3 } else { 1 };
    let bits = 8 * color.bytes_per_pixel() as usize / color.channel_count() as usize;
    let interleaved: Vec<f32> = match (channels, bits) {
        (1, 8) => img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (3, 8) => img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        (1, 16) => img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        (3, 16) => img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        (1, _) => img.to_luma32f().into_raw(),
        _ => img.to_rgb32f().into_raw(),
    };
    let mut data = vec![0.0f32; channels * h * w];
    for (i, v) in interleaved.iter().enumerate() {
        let (pixel, c) = (i / channels, i % channels);
        data[c * h * w + pixel] = v.clamp(0.0, 1.0) * 2.0 - 1.0;
    }
    Ok(Tensor::new(&[channels, h, w], data)?)
}

pub fn read_mask(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).map_err(Error::image(path))?;
    if img.color().has_color() {
        return Err(Error::format(path, "masks must be single-channel class-index images"));
    }
    let (w, h) = (img.width(), img.height());
    // class indices are raw values; converting 8-bit to 16-bit would rescale them
    let raw: Vec<u16> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u16::from).collect(),
        DynamicImage::ImageLumaA8(_) => img.to_luma8().into_raw().into_iter().map(u16::from).collect(),
        _ => img.to_luma16().into_raw(),
    };
    let mut data = Vec::with_capacity((w * h) as usize);
    for &v in &raw {
        if v as usize >= num_classes || v > u8::MAX as u16 {
            return Err(Error::format(path, format!("mask value {v} is not below {num_classes}")));
        }
        data.push(v as u8);
    }
    Ok(LabelMap::new(h as usize, w as usize, data)?)
}

/// Loads every image under `<root>/images` in lexicographic stem order,
/// attaching `<root>/masks/<stem>.png` where present.
pub fn load_folder_dataset(root: &Path, num_classes: usize) -> Result<Vec<SegmentationSample>> {
    let images = files_by_stem(&root.join("images"), IMAGE_EXTENSIONS)?;
    let mut masks = files_by_stem(&root.join("masks"), &["png"])?;
    if let Some((_, orphan)) = masks.iter().find(|(stem, _)| !images.contains_key(*stem)) {
        return Err(Error::format(orphan, "mask without a matching image"));
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, path) in images {
        let image = read_image(&path)?;
        let label = match masks.remove(&stem) {
            Some(mask_path) => {
                let label = read_mask(&mask_path, num_classes)?;
                if (label.height(), label.width()) != (image.dim(1), image.dim(2)) {
                    return Err(Error::format(&mask_path, "mask size differs from its image"));
                }
                Some(label)
            }
            None => None,
        };
        samples.push(SegmentationSample::new(stem, image, label)?);
    }
    Ok(samples)
}

fn to_u16(v: f32) -> u16 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 65535.0).round() as u16
}

/// Writes samples in the folder layout: 16-bit images, 8-bit class masks.
pub fn export_folder_dataset(samples: &[SegmentationSample], root: &Path) -> Result<()> {
    let (img_dir, mask_dir) = (root.join("images"), root.join("masks"));
    fs::create_dir_all(&img_dir).map_err(Error::io(&img_dir))?;
    fs::create_dir_all(&mask_dir).map_err(Error::io(&mask_dir))?;
    for s in samples {
        let (c, h, w) = (s.image.dim(0), s.height(), s.width());
        let plane = |k: usize| &s.image.data()[k * h * w..(k + 1) * h * w];
        let path = img_dir.join(format!("{}.png", s.id));
        let dynamic = match c {
            1 => DynamicImage::ImageLuma16(
                ImageBuffer::from_raw(w as u32, h as u32, plane(0).iter().map(|&v| to_u16(v)).collect()).expect("sized"),
            ),
            3 => {
                let raw = (0..h * w).flat_map(|p| (0..3).map(move |k| to_u16(plane(k)[p]))).collect();
                DynamicImage::ImageRgb16(ImageBuffer::from_raw(w as u32, h as u32, raw).expect("sized"))
            }
            _ => return Err(Error::format(&path, format!("cannot export a {c}-channel image"))),
        };
        dynamic.save(&path).map_err(Error::image(&path))?;
        if let Some(label) = &s.label {
            let path = mask_dir.join(format!("{}.png", s.id));
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_raw(w as u32, h as u32, label.data().to_vec()).expect("sized");
            buf.save(&path).map_err(Error::image(&path))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    /// `[channels, depth, height, width]`.
    pub shape: [usize; 4],
    pub dtype: String,
    /// Raw file name, relative to the header.
    pub data: String,
}

/// Reads a volume from its JSON header path.
pub fn read_volume(header_path: &Path) -> Result<Tensor<f32>> {
    let text = fs::read_to_string(header_path).map_err(Error::io(header_path))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(Error::json(header_path))?;
    if header.dtype != "f32le" {
        return Err(Error::format(header_path, format!("unsupported dtype {:?}", header.dtype)));
    }
    let raw_path = header_path.parent().unwrap_or(Path::new(".")).join(&header.data);
    let bytes = fs::read(&raw_path).map_err(Error::io(&raw_path))?;
    let numel: usize = header.shape.iter().product();
    if bytes.len() != 4 * numel {
        return Err(Error::format(
            &raw_path,
            format!("{} bytes do not match shape {:?}", bytes.len(), header.shape),
        ));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok(Tensor::new(&header.shape, data)?)
}

/// Writes `<stem>.json` and `<stem>.raw` next to each other; returns the header path.
pub fn write_volume(dir: &Path, stem: &str, volume: &Tensor<f32>) -> Result<PathBuf> {
    let shape: [usize; 4] = volume
        .shape()
        .try_into()
        .map_err(|_| Error::format(dir, format!("volume must be rank 4, got shape {:?}", volume.shape())))?;
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let raw = format!("{stem}.raw");
    let raw_path = dir.join(&raw);
    let bytes: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&raw_path, bytes).map_err(Error::io(&raw_path))?;
    let header = VolumeHeader {
        shape,
        dtype: "f32le".into(),
        data: raw,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&header).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(path)
}
