use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Row-major binary map with set operations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryGrid {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryGrid {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    /// Panics if `bits.len() != height * width`.
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width, "grid size mismatch");
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn set_index(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    /// Number of set pixels.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn ensure_same_dims(&self, other: &BinaryGrid) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::InvalidInput(format!(
                "mask shape mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    fn zip(&self, other: &BinaryGrid, f: impl Fn(bool, bool) -> bool) -> BinaryGrid {
        assert_eq!(
            (self.height, self.width),
            (other.height, other.width),
            "set operation on differently sized masks"
        );
        BinaryGrid {
            height: self.height,
            width: self.width,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn is_subset(&self, other: &BinaryGrid) -> bool {
        self.ensure_same_dims(other).is_ok()
            && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Positives as `0.0 / 1.0` values.
    pub fn to_f64(&self) -> Vec<f64> {
        self.bits
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }
}

macro_rules! grid_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq, Eq, Hash)]
        pub struct $name(BinaryGrid);

        impl $name {
            pub fn zeros(height: usize, width: usize) -> Self {
                Self(BinaryGrid::filled(height, width, false))
            }

            pub fn full(height: usize, width: usize) -> Self {
                Self(BinaryGrid::filled(height, width, true))
            }

            pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
                Self(BinaryGrid::from_bits(height, width, bits))
            }

            /// Panics on a shape mismatch; callers validate shapes first.
            pub fn union(&self, other: &BinaryGrid) -> Self {
                Self(self.0.zip(other, |a, b| a || b))
            }

            pub fn intersection(&self, other: &BinaryGrid) -> Self {
                Self(self.0.zip(other, |a, b| a && b))
            }

            pub fn difference(&self, other: &BinaryGrid) -> Self {
                Self(self.0.zip(other, |a, b| a && !b))
            }

            pub fn into_grid(self) -> BinaryGrid {
                self.0
            }
        }

        impl Deref for $name {
            type Target = BinaryGrid;

            fn deref(&self) -> &BinaryGrid {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut BinaryGrid {
                &mut self.0
            }
        }

        impl From<BinaryGrid> for $name {
            fn from(grid: BinaryGrid) -> Self {
                Self(grid)
            }
        }
    };
}

grid_newtype!(
    /// Binary pedestrian/background labels.
    PixelMask
);

grid_newtype!(
    /// Pixels that contribute to a loss term.
    PixelSet
);
