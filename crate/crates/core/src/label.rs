use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class ids, row-major `H×W`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}×{width} cannot hold {} entries",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Every entry is `< num_classes` or the ignore label.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != IGNORE_INDEX && v as usize >= num_classes)
        {
            Some(&class) => Err(Error::ClassOutOfRange { class, num_classes }),
            None => Ok(()),
        }
    }
}
