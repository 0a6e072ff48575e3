use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `height x width x channels` image with values in `[0, 1]`, stored
/// row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
    pub identity_id: u32,
}

impl ImageGrid {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        identity_id: u32,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(ImageGrid {
            height,
            width,
            channels,
            values,
            identity_id,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, identity_id: u32) -> Self {
        ImageGrid {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
            identity_id,
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.values[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn patch_count(&self, patch: usize) -> Result<usize> {
        if patch == 0 || self.height % patch != 0 || self.width % patch != 0 {
            return Err(Error::Shape(format!(
                "{}x{} image is not divisible into {patch}x{patch} patches",
                self.height, self.width
            )));
        }
        Ok((self.height / patch) * (self.width / patch))
    }

    /// Flattens non-overlapping `patch x patch` tiles into rows of length
    /// `patch * patch * channels`, tiles in row-major order.
    pub fn patches(&self, patch: usize) -> Result<(usize, Vec<f32>)> {
        let n = self.patch_count(patch)?;
        let dim = patch * patch * self.channels;
        let mut out = Vec::with_capacity(n * dim);
        for py in 0..self.height / patch {
            for px in 0..self.width / patch {
                for dy in 0..patch {
                    let y = py * patch + dy;
                    let start = (y * self.width + px * patch) * self.channels;
                    out.extend_from_slice(&self.values[start..start + patch * self.channels]);
                }
            }
        }
        Ok((n, out))
    }
}
