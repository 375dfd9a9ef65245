//! Binary pixel maps and integer boxes shared by the generator, the
//! detector post-processing, the augmentations and the evaluator.

use serde::{Deserialize, Serialize};

use crate::numcore::{NumError, Tensor};

/// Axis-aligned pixel box. `x_max`/`y_max` are exclusive, so the area is
/// `(x_max - x_min) * (y_max - y_min)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PixelBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl PixelBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Option<Self> {
        (x_min < x_max && y_min < y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &PixelBox) -> usize {
        let w = self.x_max.min(other.x_max).saturating_sub(self.x_min.max(other.x_min));
        let h = self.y_max.min(other.y_max).saturating_sub(self.y_min.max(other.y_min));
        w * h
    }

    /// True when the boxes, each grown by `gap` pixels, overlap.
    pub fn near(&self, other: &PixelBox, gap: usize) -> bool {
        self.x_min < other.x_max + gap
            && other.x_min < self.x_max + gap
            && self.y_min < other.y_max + gap
            && other.y_min < self.y_max + gap
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x_min..self.x_max).contains(&x) && (self.y_min..self.y_max).contains(&y)
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Row-major H×W map of 0/1 values.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![1; height * width],
        }
    }

    /// Builds a map from 0/1 bytes; any nonzero byte counts as 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), height * width, "bit count must match dimensions");
        let bits = bits.into_iter().map(|b| u8::from(b != 0)).collect();
        Self { height, width, bits }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(y, x)));
            }
        }
        Self { height, width, bits }
    }

    /// Interprets an H×W tensor whose values are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self, NumError> {
        let &[height, width] = t.shape() else {
            return Err(NumError::ShapeMismatch {
                op: "binary_map",
                lhs: t.shape().to_vec(),
                rhs: vec![0, 0],
            });
        };
        let mut bits = Vec::with_capacity(t.len());
        for (index, &v) in t.data().iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(NumError::NotBinary {
                    op: "binary_map",
                    index,
                });
            }
            bits.push(v as u8);
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = u8::from(on);
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn and(&self, other: &BinaryMap) -> BinaryMap {
        assert_eq!(self.shape(), other.shape());
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Self {
            height: self.height,
            width: self.width,
            bits,
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self.bits.iter().map(|&b| f64::from(b)).collect();
        Tensor::new(vec![self.height, self.width], data).expect("binary values are finite")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_geometry() {
        let a = PixelBox::new(0, 0, 10, 10).unwrap();
        let b = PixelBox::new(5, 0, 15, 10).unwrap();
        assert_eq!(a.area(), 100);
        assert_eq!(a.intersection(&b), 50);
        assert!(PixelBox::new(3, 0, 3, 4).is_none());
        let far = PixelBox::new(12, 0, 14, 4).unwrap();
        assert!(!a.near(&far, 2));
        assert!(a.near(&far, 3));
    }

    #[test]
    fn tensor_round_trip() {
        let m = BinaryMap::from_fn(3, 4, |y, x| (x + y) % 2 == 0);
        assert_eq!(BinaryMap::from_tensor(&m.to_tensor()).unwrap(), m);
        assert_eq!(m.count_ones(), 6);
    }
}
