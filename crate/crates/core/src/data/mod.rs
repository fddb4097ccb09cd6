//! Images, dataset ingestion and augmentation pipelines.

mod augment;
mod cifar;
mod synth;

pub use augment::{
    augment, augment_traced, two_views, AugKind, AugOp, AugPolicy, AugStep, PolicyConfig,
};
pub use cifar::{load_cifar_binary, parse_cifar_records, CifarMeta, CIFAR_RECORD_BYTES};
pub use synth::{synth_dataset, SynthConfig};

use crate::error::{invalid, Result};

/// An `height x width x channels` image with values in `[0, 1]`, stored
/// row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
    pub label: Option<usize>,
}

impl ImageRecord {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        pixels: Vec<f32>,
        label: Option<usize>,
    ) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(invalid(
                "image",
                format!(
                    "{height}x{width}x{channels} needs {} values, got {}",
                    height * width * channels,
                    pixels.len()
                ),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid(
                "image",
                format!("pixel value {bad} outside [0, 1]"),
            ));
        }
        Ok(ImageRecord {
            height,
            width,
            channels,
            pixels,
            label,
        })
    }

    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        ImageRecord {
            height,
            width,
            channels,
            pixels: vec![0.0; height * width * channels],
            label: None,
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageRecord) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}
