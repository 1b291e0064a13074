//! Frames, annotations, unified six-channel packing and dataset I/O.

mod bbox;
mod image;
mod io;
mod synth;

pub use self::bbox::{box_diagonal, BBox};
pub use self::image::{crop_resize, CropMapping, Image, UnifiedInput};
pub use self::io::{load_dataset, save_dataset, save_sequence, AnnotationFile, AnnotationFormat};
pub use self::synth::{synth_dataset, synth_sequence, Motion, SynthDatasetParams, SynthParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sensing modality of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Modality {
    #[serde(rename = "RGB")]
    Rgb,
    #[serde(rename = "TIR")]
    Tir,
    #[serde(rename = "RGBT")]
    Rgbt,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Tir => "TIR",
            Modality::Rgbt => "RGBT",
        }
    }

    pub fn has_rgb(self) -> bool {
        matches!(self, Modality::Rgb | Modality::Rgbt)
    }

    pub fn has_tir(self) -> bool {
        matches!(self, Modality::Tir | Modality::Rgbt)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "RGB" => Ok(Modality::Rgb),
            "TIR" | "IR" => Ok(Modality::Tir),
            "RGBT" | "RGB-T" => Ok(Modality::Rgbt),
            other => Err(Error::Parameter(format!("unknown modality {other:?}"))),
        }
    }
}

/// One video frame; the channel groups present must match the sequence modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub rgb: Option<Image>,
    pub tir: Option<Image>,
    pub index: usize,
}

impl Frame {
    pub fn width(&self) -> usize {
        self.rgb.as_ref().or(self.tir.as_ref()).map_or(0, |i| i.width)
    }

    pub fn height(&self) -> usize {
        self.rgb.as_ref().or(self.tir.as_ref()).map_or(0, |i| i.height)
    }

    pub fn check_modality(&self, modality: Modality) -> Result<()> {
        let missing = |group: &str| {
            Err(Error::Data(format!(
                "frame {} lacks the {group} channels required by {modality}",
                self.index
            )))
        };
        if modality.has_rgb() && self.rgb.is_none() {
            return missing("RGB");
        }
        if modality.has_tir() && self.tir.is_none() {
            return missing("TIR");
        }
        if let (Some(a), Some(b)) = (&self.rgb, &self.tir) {
            if (a.width, a.height) != (b.width, b.height) {
                return Err(Error::Data(format!(
                    "frame {}: RGB is {}x{} but TIR is {}x{}",
                    self.index, a.width, a.height, b.width, b.height
                )));
            }
        }
        Ok(())
    }
}

/// Packs a frame into the six-channel unified layout.
///
/// RGB-T puts RGB in channels 0..3 and TIR in 3..6. A single-modality frame
/// has its three channels copied into both halves.
pub fn pack_unified(frame: &Frame, modality: Modality) -> Result<UnifiedInput> {
    frame.check_modality(modality)?;
    let (first, second) = match modality {
        Modality::Rgbt => (frame.rgb.as_ref(), frame.tir.as_ref()),
        Modality::Rgb => (frame.rgb.as_ref(), frame.rgb.as_ref()),
        Modality::Tir => (frame.tir.as_ref(), frame.tir.as_ref()),
    };
    let (a, b) = (first.expect("checked"), second.expect("checked"));
    let mut pixels = Vec::with_capacity(a.width * a.height * 6);
    for (pa, pb) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)) {
        pixels.extend_from_slice(pa);
        pixels.extend_from_slice(pb);
    }
    Ok(UnifiedInput {
        width: a.width,
        height: a.height,
        pixels,
        modality,
    })
}

/// Per-frame ground truth. `boxes[t]` is present exactly when `exist[t]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotation {
    pub boxes: Vec<Option<BBox>>,
    pub exist: Vec<bool>,
}

impl Annotation {
    pub fn len(&self) -> usize {
        self.exist.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exist.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.boxes.len() != self.exist.len() {
            return Err(Error::Data(format!(
                "{} boxes for {} visibility flags",
                self.boxes.len(),
                self.exist.len()
            )));
        }
        for (t, (b, &e)) in self.boxes.iter().zip(&self.exist).enumerate() {
            match b {
                Some(b) if !e => {
                    return Err(Error::Data(format!("frame {t}: box {b:?} on an invisible frame")))
                }
                None if e => return Err(Error::Data(format!("frame {t}: visible but no box"))),
                Some(b) if !(b.w > 0.0 && b.h > 0.0) => {
                    return Err(Error::Data(format!("frame {t}: nonpositive extent {b:?}")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub modality: Modality,
    pub frames: Vec<Frame>,
    pub annotation: Annotation,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Checks the invariants shared by loaded and synthesized sequences.
    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.annotation.len() {
            return Err(Error::Data(format!(
                "{} frames but {} annotation records",
                self.frames.len(),
                self.annotation.len()
            )));
        }
        self.annotation.validate()?;
        let (w, h) = self
            .frames
            .first()
            .map(|f| (f.width(), f.height()))
            .unwrap_or_default();
        for f in &self.frames {
            f.check_modality(self.modality)?;
            if (f.width(), f.height()) != (w, h) {
                return Err(Error::Data(format!("frame {} changes the image size", f.index)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SequenceDataset {
    pub sequences: Vec<Sequence>,
}

impl SequenceDataset {
    pub fn ids(&self) -> Vec<&str> {
        self.sequences.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Sequence> {
        self.sequences.iter().find(|s| s.id == id)
    }

    /// The single modality shared by all sequences, RGBT when they differ.
    pub fn dominant_modality(&self) -> Option<Modality> {
        let first = self.sequences.first()?.modality;
        if self.sequences.iter().all(|s| s.modality == first) {
            Some(first)
        } else {
            Some(Modality::Rgbt)
        }
    }
}
