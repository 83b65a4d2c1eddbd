//! Datasets: CUB-format annotation directories, precomputed feature maps,
//! the desk backbone and a synthetic generator with ground-truth regions.

pub mod backbone;
pub mod cub;
pub mod features;
pub mod image;
pub mod scores;
pub mod synthetic;

use std::path::PathBuf;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};
use crate::graph::NodeRegistry;
use image::RgbImage;

/// Axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelRect {
    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn intersect(&self, other: &PixelRect) -> f64 {
        let w = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let h = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        w.max(0.0) * h.max(0.0)
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }
}

/// Ground-truth location of one rendered attribute.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeMask {
    pub attribute: usize,
    pub rect: PixelRect,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleInput {
    Image(RgbImage),
    Features(Array3<f64>),
    /// Annotations only; pixels were not read.
    Unloaded(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub name: String,
    pub input: SampleInput,
    pub label: usize,
    pub attribute_scores: Vec<f64>,
    pub bbox: Option<PixelRect>,
    /// Synthetic data only.
    pub masks: Vec<AttributeMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub registry: NodeRegistry,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.registry.num_categories()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(label, attribute scores)` pairs for graph construction.
    pub fn instances(&self) -> Vec<(usize, Vec<f64>)> {
        self.samples
            .iter()
            .map(|s| (s.label, s.attribute_scores.clone()))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.registry.num_categories();
        let a = self.registry.num_attributes();
        for s in &self.samples {
            if s.label >= c {
                return Err(KerlError::Invalid(format!("sample {} has label {} >= {c}", s.id, s.label)));
            }
            if s.attribute_scores.len() != a || s.attribute_scores.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(KerlError::Invalid(format!("sample {} has invalid attribute scores", s.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
    All,
}

impl Split {
    pub fn keeps(self, is_train: bool) -> bool {
        match self {
            Split::Train => is_train,
            Split::Test => !is_train,
            Split::All => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CropMode {
    /// Whole image.
    #[default]
    Image,
    /// Image cropped to the annotated box.
    Bbox,
}
