//! Synthetic low-foreground scenes and annotation I/O.

mod coco;
mod ppm;
mod scene;

pub use coco::{export_coco, load_coco_annotations, CocoLoad};
pub use ppm::{read_ppm, write_ppm};
pub use scene::{generate_dataset, generate_scene, hflip, Scene, SceneSpec};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub bbox: BBox,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    /// `3 x H x W` values in `[0, 1]`, absent for annotation-only datasets.
    pub pixels: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: String,
    pub categories: Vec<String>,
    pub images: Vec<ImageRecord>,
    /// Ground truth of each image, parallel to `images`.
    pub annotations: Vec<Vec<Annotation>>,
}

impl Dataset {
    pub fn new(split: impl Into<String>, categories: Vec<String>) -> Self {
        Dataset {
            split: split.into(),
            categories,
            images: Vec::new(),
            annotations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn num_instances(&self) -> usize {
        self.annotations.iter().map(|a| a.len()).sum()
    }

    /// Checks that every box lies inside its image with positive area and a known class.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.annotations.len() {
            return Err(Error::invalid("images and annotation lists differ in length"));
        }
        for (img, anns) in self.images.iter().zip(&self.annotations) {
            for a in anns {
                let b = &a.bbox;
                let inside = b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= img.width as f32 && b.y2 <= img.height as f32;
                if !b.is_valid() || b.area() <= 0.0 || !inside || a.class >= self.num_classes() {
                    return Err(Error::invalid(format!("image {}: invalid annotation {a:?}", img.id)));
                }
            }
        }
        Ok(())
    }

    /// Fraction of image area covered by annotated boxes, over the whole dataset.
    pub fn foreground_fraction(&self) -> f64 {
        let total: f64 = self.images.iter().map(|i| (i.width * i.height) as f64).sum();
        let fg: f64 = self.annotations.iter().flatten().map(|a| a.bbox.area() as f64).sum();
        if total == 0.0 {
            0.0
        } else {
            fg / total
        }
    }

    pub fn by_index(&self, idx: &[usize]) -> Dataset {
        Dataset {
            split: self.split.clone(),
            categories: self.categories.clone(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            annotations: idx.iter().map(|&i| self.annotations[i].clone()).collect(),
        }
    }
}
