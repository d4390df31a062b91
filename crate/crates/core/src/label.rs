use crate::error::{shape_err, Error, Result};

/// Label written at pixels excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Integer class map, row-major `height × width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(shape_err!(
                "label map {}×{} needs {} values, got {}",
                height,
                width,
                height * width,
                data.len()
            ));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
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

    /// Fails on the first pixel outside `[0, num_classes) ∪ {ignore}`.
    pub fn validate(&self, num_classes: usize, ignore: u8) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if v != ignore && v as usize >= num_classes {
                return Err(Error::Data(format!(
                    "label {} at pixel (row {}, col {}) is outside [0, {}) and is not the ignore value {}",
                    v,
                    i / self.width,
                    i % self.width,
                    num_classes,
                    ignore
                )));
            }
        }
        Ok(())
    }

    pub fn num_valid(&self, ignore: u8) -> usize {
        self.data.iter().filter(|&&v| v != ignore).count()
    }

    pub fn flip_horizontal(&self) -> LabelMap {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        LabelMap { data, ..*self }
    }
}
