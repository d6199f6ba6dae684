//! Dataset ingestion. Two on-disk layouts are understood: a directory of
//! image files (class = immediate subdirectory, if any) and a packed binary
//! of raw u8 pixels. Pixels are normalized to [-1,1] on load.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::pipeline::config::DatasetFormat;

pub const PACKED_MAGIC: &[u8; 8] = b"PECOIMG1";
pub const PACKED_HEADER_LEN: usize = 32;

pub struct Dataset {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub ids: Vec<String>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let stride = self.channels * self.height * self.width;
        let data = self.images.data()[i * stride..(i + 1) * stride].to_vec();
        Tensor::from_parts(vec![self.channels, self.height, self.width], data)
    }

    /// Stack the selected images into one [b, c, h, w] batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let stride = self.channels * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        Tensor::from_parts(vec![indices.len(), self.channels, self.height, self.width], data)
    }

    pub fn num_classes(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|&m| m as usize + 1))
            .unwrap_or(0)
    }
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset> {
    let format = match format {
        DatasetFormat::Auto => detect_format(path)?,
        other => other,
    };
    match format {
        DatasetFormat::ImageDirectory => load_image_directory(path),
        DatasetFormat::PackedBinary => load_packed(path),
        DatasetFormat::Auto => unreachable!(),
    }
}

fn detect_format(path: &Path) -> Result<DatasetFormat> {
    if path.is_dir() {
        return Ok(DatasetFormat::ImageDirectory);
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() >= 8 && &bytes[..8] == PACKED_MAGIC {
        return Ok(DatasetFormat::PackedBinary);
    }
    Err(Error::Ingestion {
        entry: path.display().to_string(),
        reason: "neither a directory nor a packed dataset".into(),
    })
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn load_image_directory(root: &Path) -> Result<Dataset> {
    let mut files: Vec<std::path::PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Ingestion {
            entry: root.display().to_string(),
            reason: e.to_string(),
        })?;
        if entry.file_type().is_file() && is_image_file(entry.path()) {
            files.push(entry.path().to_path_buf());
        }
    }
    files.sort();

    // class labels come from immediate subdirectories; a flat directory is
    // an unlabeled dataset
    let mut class_names: Vec<String> = Vec::new();
    let all_in_subdirs = !files.is_empty()
        && files.iter().all(|f| f.parent().map(|p| p != root).unwrap_or(false));
    if all_in_subdirs {
        for f in &files {
            let class = f
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or("")
                .to_string();
            if !class_names.contains(&class) {
                class_names.push(class);
            }
        }
        class_names.sort();
    }

    let mut data: Vec<f32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut dims: Option<(usize, usize)> = None;
    for f in &files {
        let rel = f.strip_prefix(root).unwrap_or(f).display().to_string();
        let img = image::open(f)
            .map_err(|e| Error::Ingestion { entry: rel.clone(), reason: e.to_string() })?
            .into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d != (h, w) => {
                return Err(Error::Ingestion {
                    entry: rel,
                    reason: format!("size {w}x{h} differs from first image {}x{}", d.1, d.0),
                })
            }
            _ => {}
        }
        let raw = img.as_raw();
        // HWC u8 to CHW f32 in [-1,1]
        for c in 0..3 {
            for p in 0..h * w {
                data.push(raw[p * 3 + c] as f32 / 127.5 - 1.0);
            }
        }
        if all_in_subdirs {
            let class = f
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .unwrap_or("");
            let idx = class_names.iter().position(|c| c == class).expect("class seen");
            if idx > u8::MAX as usize {
                return Err(Error::Ingestion { entry: rel, reason: "more than 256 classes".into() });
            }
            labels.push(idx as u8);
        }
        ids.push(rel);
    }
    let (h, w) = dims.unwrap_or((0, 0));
    Ok(Dataset {
        images: Tensor::from_parts(vec![ids.len(), 3, h, w], data),
        labels: if all_in_subdirs { Some(labels) } else { None },
        ids,
        channels: 3,
        height: h,
        width: w,
    })
}

fn load_packed(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let entry = path.display().to_string();
    if bytes.len() < PACKED_HEADER_LEN || &bytes[..8] != PACKED_MAGIC {
        return Err(Error::Ingestion { entry, reason: "bad packed header".into() });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")) as usize;
    let has_labels = bytes[24] != 0;
    let pixel_len = n * c * h * w;
    let needed = PACKED_HEADER_LEN + pixel_len + if has_labels { n } else { 0 };
    if bytes.len() < needed {
        return Err(Error::Ingestion {
            entry,
            reason: format!("expected {needed} bytes, found {}", bytes.len()),
        });
    }
    let data: Vec<f32> = bytes[PACKED_HEADER_LEN..PACKED_HEADER_LEN + pixel_len]
        .iter()
        .map(|&v| v as f32 / 127.5 - 1.0)
        .collect();
    let labels = has_labels
        .then(|| bytes[PACKED_HEADER_LEN + pixel_len..PACKED_HEADER_LEN + pixel_len + n].to_vec());
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, c, h, w], data),
        labels,
        ids: (0..n).map(|i| format!("packed:{i:06}")).collect(),
        channels: c,
        height: h,
        width: w,
    })
}

/// Write a packed dataset; pixels are quantized from [-1,1] to u8.
pub fn save_packed(path: &Path, images: &Tensor, labels: Option<&[u8]>) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if let Some(l) = labels {
        if l.len() != n {
            return Err(Error::Config(format!("{} labels for {} images", l.len(), n)));
        }
    }
    let mut out = Vec::with_capacity(PACKED_HEADER_LEN + images.numel() + n);
    out.extend_from_slice(PACKED_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(c as u32).to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    out.push(labels.is_some() as u8);
    out.resize(PACKED_HEADER_LEN, 0);
    for &v in images.data() {
        out.push(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8);
    }
    if let Some(l) = labels {
        out.extend_from_slice(l);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    f.sync_all()?;
    Ok(())
}

/// Write every image of a [n,3,h,w] batch as PNGs under `root`, into one
/// subdirectory per class when labels are given.
pub fn save_image_directory(
    root: &Path,
    images: &Tensor,
    labels: Option<&[u8]>,
    class_names: Option<&[&str]>,
) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Config(format!("expected 3 channels, got {c}")));
    }
    std::fs::create_dir_all(root)?;
    for i in 0..n {
        let dir = match labels {
            Some(l) => {
                let cls = l[i] as usize;
                let name = match class_names {
                    Some(names) => names[cls].to_string(),
                    None => format!("class{cls}"),
                };
                let d = root.join(name);
                std::fs::create_dir_all(&d)?;
                d
            }
            None => root.to_path_buf(),
        };
        let base = i * c * h * w;
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = images.data()[base + ch * h * w + y * w + x];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        buf.save(dir.join(format!("img{i:05}.png")))
            .map_err(|e| Error::Ingestion { entry: format!("img{i:05}.png"), reason: e.to_string() })?;
    }
    Ok(())
}
