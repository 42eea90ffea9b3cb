//! On-disk layouts.
//!
//! **Volume directory.** A dataset root holds `manifest.json` and one directory
//! per volume. Each volume directory stores axial slices as 16-bit grayscale PNGs
//! `slice_000.png, slice_001.png, ...`; raw values are recovered as
//! `min + q / 65535 * (max - min)` with `min`/`max` taken from the manifest entry.
//! Ground-truth labels, when present, are 8-bit PNGs `label_000.png, ...`.
//!
//! **Sample cache.** Preprocessed samples in one little-endian binary file:
//!
//! ```text
//! magic    8 bytes  "HRMSAMP1"
//! count    u32
//! canvas   u32
//! repeated `count` times:
//!   site_id      u32
//!   slice_index  u32
//!   subject_len  u32, then subject_len bytes of UTF-8
//!   extent       u32 height, u32 width (original slice size)
//!   has_labels   u8
//!   pixels       3 * canvas * canvas f32
//!   labels       canvas * canvas u8   (only when has_labels == 1)
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageSample, Volume};
use crate::error::{HarmonError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const SAMPLE_MAGIC: &[u8; 8] = b"HRMSAMP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Volume directory, relative to the manifest.
    pub path: String,
    pub site_id: usize,
    pub subject_id: String,
    /// Free-form split tag such as `train`, `val` or `phantom`.
    #[serde(default)]
    pub split: String,
    pub dims: [usize; 3],
    #[serde(default = "unit_spacing")]
    pub spacing: [f32; 3],
    pub intensity_min: f32,
    pub intensity_max: f32,
    #[serde(default)]
    pub has_labels: bool,
}

fn unit_spacing() -> [f32; 3] {
    [1.0, 1.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub volumes: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self { schema_version: MANIFEST_SCHEMA_VERSION, volumes: Vec::new() }
    }
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                HarmonError::MissingArtifact(format!("no manifest at {}", path.display()))
            } else {
                e.into()
            }
        })?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(HarmonError::invalid_data(format!(
                "manifest schema_version {} unsupported",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        fs::create_dir_all(root)?;
        fs::write(root.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn entries<'a>(&'a self, split: &'a str) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.volumes.iter().filter(move |e| e.split == split)
    }
}

fn png_err(e: impl std::fmt::Display) -> HarmonError {
    HarmonError::invalid_data(format!("png: {e}"))
}

fn write_png(path: &Path, width: usize, height: usize, depth: png::BitDepth, bytes: &[u8]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn read_png(path: &Path) -> Result<(usize, usize, png::BitDepth, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(png_err(format!("{} is not grayscale", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.bit_depth, buf))
}

/// Write `volume` as a slice directory; returns its manifest entry.
pub fn write_volume(root: &Path, rel_dir: &str, volume: &Volume, split: &str) -> Result<ManifestEntry> {
    let dir = root.join(rel_dir);
    fs::create_dir_all(&dir)?;
    let (lo, hi) = volume
        .voxels
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo) as f64;
    let plane = volume.height * volume.width;
    for z in 0..volume.depth {
        let mut bytes = Vec::with_capacity(plane * 2);
        for &v in &volume.voxels[z * plane..(z + 1) * plane] {
            let q = if span > 0.0 { ((v - lo) as f64 / span * 65535.0).round() as u16 } else { 0 };
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        write_png(&dir.join(format!("slice_{z:03}.png")), volume.width, volume.height, png::BitDepth::Sixteen, &bytes)?;
        if let Some(labels) = volume.label_slice(z) {
            write_png(&dir.join(format!("label_{z:03}.png")), volume.width, volume.height, png::BitDepth::Eight, &labels)?;
        }
    }
    Ok(ManifestEntry {
        path: rel_dir.to_string(),
        site_id: volume.site_id,
        subject_id: volume.subject_id.clone(),
        split: split.to_string(),
        dims: [volume.depth, volume.height, volume.width],
        spacing: unit_spacing(),
        intensity_min: lo,
        intensity_max: hi,
        has_labels: volume.labels.is_some(),
    })
}

pub fn read_volume(root: &Path, entry: &ManifestEntry) -> Result<Volume> {
    let dir = root.join(&entry.path);
    let [depth, height, width] = entry.dims;
    let span = (entry.intensity_max - entry.intensity_min) as f64;
    let mut voxels = Vec::with_capacity(depth * height * width);
    let mut labels = entry.has_labels.then(|| Vec::with_capacity(depth * height * width));
    for z in 0..depth {
        let (w, h, bits, buf) = read_png(&dir.join(format!("slice_{z:03}.png")))?;
        if (w, h) != (width, height) || bits != png::BitDepth::Sixteen {
            return Err(HarmonError::invalid_data(format!(
                "slice {z} of {} is {w}x{h} {bits:?}, expected {width}x{height} 16-bit",
                entry.path
            )));
        }
        voxels.extend(buf.chunks_exact(2).map(|b| {
            let q = u16::from_be_bytes([b[0], b[1]]) as f64;
            (entry.intensity_min as f64 + q / 65535.0 * span) as f32
        }));
        if let Some(l) = labels.as_mut() {
            let (w, h, bits, buf) = read_png(&dir.join(format!("label_{z:03}.png")))?;
            if (w, h) != (width, height) || bits != png::BitDepth::Eight {
                return Err(HarmonError::invalid_data(format!("label slice {z} of {} malformed", entry.path)));
            }
            l.extend_from_slice(&buf);
        }
    }
    let v = Volume::new(entry.dims, voxels, entry.site_id, entry.subject_id.clone())?;
    match labels {
        Some(l) => v.with_labels(l),
        None => Ok(v),
    }
}

/// Write a grid of `tile_h x tile_w` images with values in [-1, 1] as one
/// 8-bit PNG. `rows[r][c]` is the tile in row `r`, column `c`; short rows are
/// padded with black.
pub fn write_montage(path: &Path, rows: &[Vec<Vec<f32>>], tile_h: usize, tile_w: usize) -> Result<()> {
    let n_cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    if rows.is_empty() || n_cols == 0 {
        return Err(HarmonError::invalid_arg("montage needs at least one tile"));
    }
    let (width, height) = (n_cols * tile_w, rows.len() * tile_h);
    let mut bytes = vec![0u8; width * height];
    for (r, row) in rows.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            if tile.len() != tile_h * tile_w {
                return Err(HarmonError::invalid_arg(format!("montage tile ({r}, {c}) has {} pixels", tile.len())));
            }
            for y in 0..tile_h {
                for x in 0..tile_w {
                    let v = (tile[y * tile_w + x].clamp(-1.0, 1.0) + 1.0) * 127.5;
                    bytes[(r * tile_h + y) * width + c * tile_w + x] = v.round() as u8;
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_png(path, width, height, png::BitDepth::Eight, &bytes)
}

pub fn volume_dir(site_id: usize, split: &str, subject_id: &str) -> String {
    format!("site{site_id}/{split}/{subject_id}")
}

pub fn write_samples(path: &Path, samples: &[ImageSample]) -> Result<()> {
    let canvas = samples.first().map_or(0, |s| s.canvas);
    if let Some(p) = path.parent() {
        fs::create_dir_all(p)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(SAMPLE_MAGIC)?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(canvas as u32).to_le_bytes())?;
    for s in samples {
        if s.canvas != canvas {
            return Err(HarmonError::invalid_data("samples with mixed canvas sizes"));
        }
        w.write_all(&(s.site_id as u32).to_le_bytes())?;
        w.write_all(&(s.slice_index as u32).to_le_bytes())?;
        w.write_all(&(s.subject_id.len() as u32).to_le_bytes())?;
        w.write_all(s.subject_id.as_bytes())?;
        w.write_all(&(s.extent[0] as u32).to_le_bytes())?;
        w.write_all(&(s.extent[1] as u32).to_le_bytes())?;
        w.write_all(&[s.labels.is_some() as u8])?;
        for v in &s.pixels {
            w.write_all(&v.to_le_bytes())?;
        }
        if let Some(l) = &s.labels {
            w.write_all(l)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_samples(path: &Path) -> Result<Vec<ImageSample>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SAMPLE_MAGIC {
        return Err(HarmonError::invalid_data(format!("{} is not a sample cache", path.display())));
    }
    let count = read_u32(&mut r)? as usize;
    let canvas = read_u32(&mut r)? as usize;
    let plane = canvas * canvas;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let site_id = read_u32(&mut r)? as usize;
        let slice_index = read_u32(&mut r)? as usize;
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let subject_id = String::from_utf8(name).map_err(|e| HarmonError::invalid_data(e.to_string()))?;
        let extent = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
        if extent[0] > canvas || extent[1] > canvas {
            return Err(HarmonError::invalid_data("sample extent exceeds canvas"));
        }
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut raw = vec![0u8; 3 * plane * 4];
        r.read_exact(&mut raw)?;
        let pixels = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let labels = if flag[0] == 1 {
            let mut l = vec![0u8; plane];
            r.read_exact(&mut l)?;
            Some(l)
        } else {
            None
        };
        out.push(ImageSample { pixels, canvas, site_id, subject_id, slice_index, labels, extent });
    }
    Ok(out)
}

/// Resolve every manifest entry of `split` into volumes.
pub fn load_split(root: &Path, split: &str) -> Result<Vec<Volume>> {
    let manifest = Manifest::load(root)?;
    manifest.entries(split).map(|e| read_volume(root, e)).collect()
}

pub fn manifest_path(root: &Path) -> PathBuf {
    root.join(MANIFEST_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_site_dataset, preprocess_volume, PreprocessConfig, SiteSpec, SynthShape};

    #[test]
    fn volume_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let shape = SynthShape { depth: 4, height: 10, width: 12 };
        let vol = &generate_synthetic_site_dataset(&SiteSpec::desk_sites()[1], 1, 3, shape).unwrap()[0];
        let entry = write_volume(dir.path(), &volume_dir(1, "train", &vol.subject_id), vol, "train").unwrap();
        let manifest = Manifest { volumes: vec![entry.clone()], ..Default::default() };
        manifest.save(dir.path()).unwrap();

        let loaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        let back = read_volume(dir.path(), &loaded.volumes[0]).unwrap();
        assert_eq!(back.labels, vol.labels);
        let span = entry.intensity_max - entry.intensity_min;
        for (a, b) in back.voxels.iter().zip(&vol.voxels) {
            assert!((a - b).abs() <= span / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(manifest_path(dir.path()), r#"{"schema_version":1,"volumes":[],"extra":3}"#).unwrap();
        assert!(Manifest::load(dir.path()).is_err());
        let missing = tempfile::tempdir().unwrap();
        assert!(matches!(Manifest::load(missing.path()), Err(HarmonError::MissingArtifact(_))));
    }

    #[test]
    fn sample_cache_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let shape = SynthShape { depth: 5, height: 12, width: 12 };
        let vol = &generate_synthetic_site_dataset(&SiteSpec::desk_sites()[2], 1, 1, shape).unwrap()[0];
        let cfg = PreprocessConfig { slice_count: 4, stride: 1, canvas: 16 };
        let mut samples = preprocess_volume(vol, &cfg).unwrap();
        samples[1].labels = None;
        let path = dir.path().join("cache.bin");
        write_samples(&path, &samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);
    }
}
