//! COCO-style annotation documents (`images`, `annotations`, `categories` tables, boxes
//! as `[x, y, w, h]`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Annotation, Dataset, ImageRecord};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    #[serde(default)]
    area: f64,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Serialize, Deserialize)]
struct CocoDocument {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CocoLoad {
    pub dataset: Dataset,
    /// Annotations discarded for degenerate or out-of-image boxes.
    pub dropped: usize,
    /// Original category id of each contiguous class index.
    pub category_ids: Vec<u64>,
}

/// Parses a document, remapping category ids to `0..n` in ascending id order. Boxes are
/// clipped to their image; anything narrower or shorter than 1 px afterwards is dropped.
pub fn load_coco_annotations(text: &str, split: &str) -> Result<CocoLoad> {
    let doc: CocoDocument = serde_json::from_str(text).map_err(|e| Error::Malformed {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut cats: Vec<&CocoCategory> = doc.categories.iter().collect();
    cats.sort_by_key(|c| c.id);
    let category_ids: Vec<u64> = cats.iter().map(|c| c.id).collect();
    let cat_index: BTreeMap<u64, usize> = category_ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    if cat_index.len() != cats.len() {
        return Err(Error::invalid("duplicate category id"));
    }
    let mut ds = Dataset::new(split, cats.iter().map(|c| c.name.clone()).collect());
    let mut img_index = BTreeMap::new();
    for img in &doc.images {
        if img_index.insert(img.id, ds.images.len()).is_some() {
            return Err(Error::invalid(format!("duplicate image id {}", img.id)));
        }
        ds.images.push(ImageRecord {
            id: img.id,
            file_name: img.file_name.clone(),
            width: img.width,
            height: img.height,
            pixels: None,
        });
        ds.annotations.push(Vec::new());
    }
    let mut dropped = 0;
    for ann in &doc.annotations {
        let &i = img_index
            .get(&ann.image_id)
            .ok_or_else(|| Error::invalid(format!("annotation {} references unknown image {}", ann.id, ann.image_id)))?;
        let &class = cat_index.get(&ann.category_id).ok_or_else(|| {
            Error::invalid(format!("annotation {} references unknown category {}", ann.id, ann.category_id))
        })?;
        let [x, y, w, h] = ann.bbox;
        let img = &ds.images[i];
        let raw = BBox {
            x1: x as f32,
            y1: y as f32,
            x2: (x + w) as f32,
            y2: (y + h) as f32,
        };
        let b = raw.clip(img.width as f32, img.height as f32);
        if !raw.is_valid() || !(w > 0.0 && h > 0.0) || b.width() < 1.0 || b.height() < 1.0 {
            dropped += 1;
            continue;
        }
        ds.annotations[i].push(Annotation { bbox: b, class });
    }
    Ok(CocoLoad {
        dataset: ds,
        dropped,
        category_ids,
    })
}

/// Serialises `ds` with ids assigned in order: annotation ids from 1, category ids
/// `class + 1`. Key order is fixed, so equal datasets give identical bytes.
pub fn export_coco(ds: &Dataset) -> String {
    let images = ds
        .images
        .iter()
        .map(|i| CocoImage {
            id: i.id,
            file_name: i.file_name.clone(),
            width: i.width,
            height: i.height,
        })
        .collect();
    let mut annotations = Vec::new();
    for (img, anns) in ds.images.iter().zip(&ds.annotations) {
        for a in anns {
            let b = &a.bbox;
            let (w, h) = (b.width() as f64, b.height() as f64);
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: img.id,
                category_id: a.class as u64 + 1,
                bbox: [b.x1 as f64, b.y1 as f64, w, h],
                area: w * h,
                iscrowd: 0,
            });
        }
    }
    let categories = ds
        .categories
        .iter()
        .enumerate()
        .map(|(i, name)| CocoCategory {
            id: i as u64 + 1,
            name: name.clone(),
        })
        .collect();
    let doc = CocoDocument {
        images,
        annotations,
        categories,
    };
    serde_json::to_string_pretty(&doc).expect("COCO document serialises")
}
