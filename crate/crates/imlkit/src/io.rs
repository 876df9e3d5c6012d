//! Image/mask PNG I/O and the JSONL dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{ImlError, Result};
use crate::types::{BinaryMask, Image, Sample, TaskKind};

/// One manifest line; paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image_path: String,
    pub mask_path: String,
    pub task: TaskKind,
    pub authentic: bool,
}

pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Rgb(img.get(y, x)));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                px[[y, x, c]] = p.0[c];
            }
        }
    }
    Image::new(px)
}

/// Masks serialize as grayscale PNG with values {0,255}.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask.get(y, x) * 255]));
        }
    }
    buf.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut bits = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32).0[0];
            if v != 0 && v != 255 {
                return Err(ImlError::InvalidInput(format!(
                    "mask {path:?} has value {v}; expected 0 or 255"
                )));
            }
            bits[[y, x]] = u8::from(v == 255);
        }
    }
    BinaryMask::new(bits)
}

/// Writes samples as PNG pairs plus a JSONL manifest; returns the manifest path.
pub fn write_manifest(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = fs::File::create(&manifest_path)?;
    for (i, s) in samples.iter().enumerate() {
        let image_path = format!("img_{i:05}.png");
        let mask_path = format!("mask_{i:05}.png");
        save_image(&s.image, &dir.join(&image_path))?;
        save_mask(&s.mask, &dir.join(&mask_path))?;
        let rec = ManifestRecord { image_path, mask_path, task: s.task, authentic: s.authentic };
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    Ok(manifest_path)
}

/// Reads a manifest without loading pixel data.
pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(manifest)?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(records)
}

/// Loads every sample referenced by a manifest.
pub fn load_samples(manifest: &Path) -> Result<Vec<Sample>> {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut samples = Vec::new();
    for rec in read_manifest(manifest)? {
        let image = load_image(&base.join(&rec.image_path))?;
        let mask = load_mask(&base.join(&rec.mask_path))?;
        let sample = Sample::from_parts(image, mask, rec.task)?;
        if sample.authentic != rec.authentic {
            return Err(ImlError::InvalidInput(format!(
                "manifest says authentic={} but mask disagrees for {}",
                rec.authentic, rec.image_path
            )));
        }
        samples.push(sample);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_preserves_pixels_and_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::filled(16, 20, [1, 2, 3]).unwrap();
        img.set(3, 4, [200, 100, 50]);
        let mut mask = BinaryMask::zeros(16, 20);
        mask.set(3, 4, 1);
        mask.set(5, 6, 1);

        let ip = dir.path().join("i.png");
        let mp = dir.path().join("m.png");
        save_image(&img, &ip).unwrap();
        save_mask(&mask, &mp).unwrap();
        assert_eq!(load_image(&ip).unwrap(), img);
        assert_eq!(load_mask(&mp).unwrap(), mask);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(16, 16, [9, 9, 9]).unwrap();
        let mut mask = BinaryMask::zeros(16, 16);
        mask.set(2, 2, 1);
        let tampered = Sample::from_parts(img.clone(), mask, TaskKind::Document).unwrap();
        let authentic =
            Sample::from_parts(img, BinaryMask::zeros(16, 16), TaskKind::Natural).unwrap();
        let samples = vec![tampered, authentic];

        let path = write_manifest(&samples, dir.path()).unwrap();
        let records = read_manifest(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert!(!records[0].authentic);
        assert!(records[1].authentic);

        let loaded = load_samples(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].image, samples[0].image);
        assert_eq!(loaded[0].mask, samples[0].mask);
        assert_eq!(loaded[0].task, TaskKind::Document);
        assert_eq!(loaded[0].boxes, samples[0].boxes);
    }
}
