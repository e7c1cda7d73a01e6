//! COCO-format annotation and result files.
//!
//! Only the bounding-box subset is modelled. Unknown keys (segmentation,
//! area, licenses, ...) are ignored so ordinary COCO files load unchanged.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::error::Category as JsonErrorKind;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::suppression::Detection;

/// The four underwater categories of the reference dataset.
pub const UNDERWATER_CATEGORIES: [&str; 4] = ["holothurian", "echinus", "scallop", "starfish"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default, deserialize_with = "flag_from_int_or_bool", serialize_with = "flag_as_int")]
    pub iscrowd: bool,
}

impl Annotation {
    pub fn to_box(&self) -> BBox {
        let [x, y, w, h] = self.bbox;
        BBox::from_xywh(x, y, w, h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub annotations: Vec<Annotation>,
    pub categories: Vec<Category>,
}

fn flag_from_int_or_bool<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Flag {
        B(bool),
        I(i64),
    }
    Ok(match Flag::deserialize(d)? {
        Flag::B(b) => b,
        Flag::I(i) => i != 0,
    })
}

fn flag_as_int<S: serde::Serializer>(v: &bool, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u8(u8::from(*v))
}

impl Dataset {
    /// Referential integrity: unique ids, annotations point at known images
    /// and categories, boxes are finite with nonnegative size.
    pub fn validate(&self) -> Result<()> {
        let mut images = HashSet::new();
        for im in &self.images {
            if !images.insert(im.id) {
                return Err(Error::Integrity(format!("duplicate image id {}", im.id)));
            }
        }
        let mut cats = HashSet::new();
        for c in &self.categories {
            if !cats.insert(c.id) {
                return Err(Error::Integrity(format!("duplicate category id {}", c.id)));
            }
        }
        let mut anns = HashSet::new();
        for a in &self.annotations {
            if !anns.insert(a.id) {
                return Err(Error::Integrity(format!("duplicate annotation id {}", a.id)));
            }
            if !images.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references unknown image id {}",
                    a.id, a.image_id
                )));
            }
            if !cats.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotation {} references unknown category id {}",
                    a.id, a.category_id
                )));
            }
            let [x, y, w, h] = a.bbox;
            if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
                return Err(Error::Integrity(format!(
                    "annotation {} has invalid bbox {:?}",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn image_index(&self) -> HashMap<u64, usize> {
        self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect()
    }

    /// Annotations grouped per image, in image order.
    pub fn annotations_per_image(&self) -> Vec<Vec<&Annotation>> {
        let index = self.image_index();
        let mut out = vec![Vec::new(); self.images.len()];
        for a in &self.annotations {
            if let Some(&i) = index.get(&a.image_id) {
                out[i].push(a);
            }
        }
        out
    }

    pub fn category_name(&self, id: u32) -> Option<&str> {
        self.categories.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }
}

/// A single detection in COCO results format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    pub score: f64,
}

impl ResultRecord {
    pub fn from_detection(image_id: u64, d: &Detection) -> Self {
        Self {
            image_id,
            category_id: d.class_id,
            bbox: d.bbox.to_xywh(),
            score: d.score,
        }
    }

    pub fn to_detection(&self) -> Detection {
        let [x, y, w, h] = self.bbox;
        Detection::new(BBox::from_xywh(x, y, w, h), self.score, self.category_id)
    }

    pub fn validate(&self) -> Result<()> {
        let [x, y, w, h] = self.bbox;
        if ![x, y, w, h].iter().all(|v| v.is_finite()) || w < 0.0 || h < 0.0 {
            return Err(Error::Integrity(format!(
                "detection on image {} has invalid bbox {:?}",
                self.image_id, self.bbox
            )));
        }
        if !self.score.is_finite() {
            return Err(Error::Integrity(format!(
                "detection on image {} has non-finite score",
                self.image_id
            )));
        }
        Ok(())
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_json(&text, path)
}

fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let message = e.to_string();
        let path = path.to_path_buf();
        match e.classify() {
            JsonErrorKind::Data => Error::Schema { path, message },
            JsonErrorKind::Io | JsonErrorKind::Syntax | JsonErrorKind::Eof => Error::Parse { path, message },
        }
    })
}

/// Read and integrity-check a COCO annotation file.
pub fn load_coco(path: impl AsRef<Path>) -> Result<Dataset> {
    let ds: Dataset = read_json(path.as_ref())?;
    ds.validate()?;
    Ok(ds)
}

/// Parse a COCO annotation document held in memory.
pub fn parse_coco(text: &str) -> Result<Dataset> {
    let ds: Dataset = parse_json(text, Path::new("<memory>"))?;
    ds.validate()?;
    Ok(ds)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<ResultRecord>> {
    let recs: Vec<ResultRecord> = read_json(path.as_ref())?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}

pub fn parse_results(text: &str) -> Result<Vec<ResultRecord>> {
    let recs: Vec<ResultRecord> = parse_json(text, Path::new("<memory>"))?;
    for r in &recs {
        r.validate()?;
    }
    Ok(recs)
}
