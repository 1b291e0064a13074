//! On-disk dataset layout:
//!
//! ```text
//! <root>/<seq_id>/rgb/000000.png ...
//! <root>/<seq_id>/tir/000000.png ...
//! <root>/<seq_id>/annotation.json   {"modality", "exist", "gt_rect"}
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageEncoder, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{Annotation, BBox, Frame, Image, Modality, Sequence, SequenceDataset};
use crate::error::{Error, Result};
use crate::fsutil::{read_to_string, write_atomic};

pub const ANNOTATION_FILE: &str = "annotation.json";

/// Annotation dialects accepted by [`load_dataset`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnnotationFormat {
    /// `annotation.json` with an explicit `modality` field.
    #[default]
    Native,
    /// Anti-UAV style `exist`/`gt_rect` record; modality inferred from the
    /// image directories present.
    AntiUav,
}

impl std::str::FromStr for AnnotationFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" | "json" => Ok(Self::Native),
            "anti-uav" | "antiuav" => Ok(Self::AntiUav),
            other => Err(Error::Parameter(format!("unknown annotation format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality: Option<Modality>,
    pub exist: Vec<u8>,
    pub gt_rect: Vec<Vec<f64>>,
}

impl AnnotationFile {
    pub fn from_annotation(ann: &Annotation, modality: Modality) -> Self {
        AnnotationFile {
            modality: Some(modality),
            exist: ann.exist.iter().map(|&e| u8::from(e)).collect(),
            gt_rect: ann
                .boxes
                .iter()
                .map(|b| b.map(|b| <[f64; 4]>::from(b).to_vec()).unwrap_or_default())
                .collect(),
        }
    }

    /// Converts to an [`Annotation`], clipping boxes to the image.
    pub fn to_annotation(&self, path: &Path, width: f64, height: f64) -> Result<Annotation> {
        let err = |message: String| Error::Ingestion { file: path.to_path_buf(), line: None, message };
        if self.exist.len() != self.gt_rect.len() {
            return Err(err(format!(
                "exist has {} entries but gt_rect has {}",
                self.exist.len(),
                self.gt_rect.len()
            )));
        }
        let mut ann = Annotation::default();
        for (t, (&e, rect)) in self.exist.iter().zip(&self.gt_rect).enumerate() {
            let visible = match e {
                0 => false,
                1 => true,
                other => return Err(err(format!("exist[{t}] = {other}, expected 0 or 1"))),
            };
            let b = match (visible, rect.as_slice()) {
                (false, []) => None,
                (true, &[x, y, w, h]) => {
                    let b = BBox::new(x, y, w, h);
                    if !(w > 0.0 && h > 0.0) || !b.is_finite() {
                        return Err(err(format!("gt_rect[{t}] = {rect:?} has a nonpositive extent")));
                    }
                    Some(b.clip(width, height).ok_or_else(|| err(format!("gt_rect[{t}] lies outside the image")))?)
                }
                (false, _) => return Err(err(format!("gt_rect[{t}] must be empty when exist is 0"))),
                (true, _) => return Err(err(format!("gt_rect[{t}] = {rect:?} is not [x, y, w, h]"))),
            };
            ann.exist.push(visible);
            ann.boxes.push(b);
        }
        Ok(ann)
    }
}

fn frame_path(dir: &Path, group: &str, t: usize) -> PathBuf {
    dir.join(group).join(format!("{t:06}.png"))
}

fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    image::codecs::png::PngEncoder::new(Cursor::new(&mut buf))
        .write_image(&img.to_rgb8(), img.width as u32, img.height as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| Error::Image { path: PathBuf::from("<memory>"), source: e })?;
    Ok(buf)
}

fn load_png(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?
        .to_rgb8();
    Image::from_rgb8(img.width() as usize, img.height() as usize, img.as_raw())
}

pub fn save_sequence(seq: &Sequence, root: &Path) -> Result<()> {
    seq.validate()?;
    let dir = root.join(&seq.id);
    for (t, frame) in seq.frames.iter().enumerate() {
        if let Some(img) = &frame.rgb {
            write_atomic(&frame_path(&dir, "rgb", t), &encode_png(img)?)?;
        }
        if let Some(img) = &frame.tir {
            write_atomic(&frame_path(&dir, "tir", t), &encode_png(img)?)?;
        }
    }
    let file = AnnotationFile::from_annotation(&seq.annotation, seq.modality);
    crate::fsutil::write_json(&dir.join(ANNOTATION_FILE), &file)
}

pub fn save_dataset(ds: &SequenceDataset, root: &Path) -> Result<()> {
    ds.sequences.iter().try_for_each(|s| save_sequence(s, root))
}

fn count_frames(dir: &Path) -> Result<Option<usize>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    for (t, name) in names.iter().enumerate() {
        if *name != format!("{t:06}.png") {
            return Err(Error::Ingestion {
                file: dir.join(name),
                line: None,
                message: format!("expected frame {t:06}.png"),
            });
        }
    }
    Ok(Some(names.len()))
}

fn load_sequence(dir: &Path, id: &str, format: AnnotationFormat) -> Result<Sequence> {
    let ann_path = dir.join(ANNOTATION_FILE);
    let text = read_to_string(&ann_path)?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        file: ann_path.clone(),
        line: Some(e.line()),
        message: e.to_string(),
    })?;

    let rgb_count = count_frames(&dir.join("rgb"))?;
    let tir_count = count_frames(&dir.join("tir"))?;
    let modality = match (format, file.modality) {
        (AnnotationFormat::Native, Some(m)) => m,
        (AnnotationFormat::Native, None) => {
            return Err(Error::Ingestion {
                file: ann_path,
                line: None,
                message: "missing or unknown modality".into(),
            })
        }
        (AnnotationFormat::AntiUav, m) => match (m, rgb_count.is_some(), tir_count.is_some()) {
            (Some(m), _, _) => m,
            (None, true, true) => Modality::Rgbt,
            (None, true, false) => Modality::Rgb,
            (None, false, true) => Modality::Tir,
            (None, false, false) => {
                return Err(Error::Ingestion { file: dir.to_path_buf(), line: None, message: "no image directories".into() })
            }
        },
    };

    let mut counts = Vec::new();
    if modality.has_rgb() {
        counts.push(("rgb", rgb_count));
    }
    if modality.has_tir() {
        counts.push(("tir", tir_count));
    }
    let mut length = None;
    for (group, count) in counts {
        let count = count.ok_or_else(|| Error::Ingestion {
            file: dir.join(group),
            line: None,
            message: format!("{modality} sequence has no {group}/ directory"),
        })?;
        if count != file.exist.len() {
            return Err(Error::Ingestion {
                file: ann_path.clone(),
                line: None,
                message: format!("annotation has {} records but {group}/ has {count} frames", file.exist.len()),
            });
        }
        length = Some(count);
    }
    let length = length.unwrap_or(0);

    let mut frames = Vec::with_capacity(length);
    for t in 0..length {
        let rgb = modality.has_rgb().then(|| load_png(&frame_path(dir, "rgb", t))).transpose()?;
        let tir = modality.has_tir().then(|| load_png(&frame_path(dir, "tir", t))).transpose()?;
        frames.push(Frame { rgb, tir, index: t });
    }
    let (w, h) = frames.first().map(|f| (f.width() as f64, f.height() as f64)).unwrap_or((0.0, 0.0));
    let annotation = file.to_annotation(&ann_path, w, h)?;
    let seq = Sequence { id: id.to_string(), modality, frames, annotation };
    seq.validate().map_err(|e| Error::Ingestion { file: dir.to_path_buf(), line: None, message: e.to_string() })?;
    Ok(seq)
}

/// Loads and validates every sequence under `root`, in sorted id order.
/// All broken sequences are reported together.
pub fn load_dataset(root: &Path, format: AnnotationFormat) -> Result<SequenceDataset> {
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(ANNOTATION_FILE).is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Ingestion {
            file: root.to_path_buf(),
            line: None,
            message: "no sequences found".into(),
        });
    }

    let mut sequences = Vec::new();
    let mut failures = Vec::new();
    for id in ids {
        match load_sequence(&root.join(&id), &id, format) {
            Ok(seq) => sequences.push(seq),
            Err(e) => failures.push(format!("{id}: {e}")),
        }
    }
    if failures.is_empty() {
        Ok(SequenceDataset { sequences })
    } else {
        Err(Error::InvalidSequences(failures))
    }
}
