//! Labeled images, the synthetic decoy generator, and on-disk storage.

mod decoy;
pub mod pgm;
mod store;

use std::fmt;
use std::str::FromStr;

use crate::error::{Result, XblError};
use crate::tensor::Tensor;

pub use decoy::{generate_decoy_dataset, Corner, DecoySpec};
pub use store::{load_image_dir, manifest_csv, write_dataset};

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy + Default> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(XblError::dim(
                "grid",
                format!("{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Grid {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
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

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

/// Binary mask stored as 0/1 bytes.
pub type Mask = Grid<u8>;

impl Grid<u8> {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn to_f32(&self) -> Grid<f32> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

impl Grid<f32> {
    /// Thresholds at 0.5 into a 0/1 mask.
    pub fn to_mask(&self) -> Mask {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| u8::from(v >= 0.5)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Intensities in [0, 1].
    pub pixels: Grid<f32>,
    pub label: usize,
    /// Region that genuinely carries the class signal.
    pub relevance_mask: Option<Mask>,
    /// Region holding the class-correlated artifact.
    pub confounder_mask: Option<Mask>,
}

impl LabeledImage {
    /// Checks value ranges, mask sizes, and mask disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(XblError::Dataset("pixel outside [0, 1]".into()));
        }
        for (name, m) in [
            ("relevance", &self.relevance_mask),
            ("confounder", &self.confounder_mask),
        ] {
            if let Some(m) = m {
                if m.dims() != self.pixels.dims() {
                    return Err(XblError::Dataset(format!(
                        "{name} mask is {:?}, image is {:?}",
                        m.dims(),
                        self.pixels.dims()
                    )));
                }
                if m.data().iter().any(|&v| v > 1) {
                    return Err(XblError::Dataset(format!("{name} mask is not binary")));
                }
            }
        }
        if let (Some(r), Some(c)) = (&self.relevance_mask, &self.confounder_mask) {
            if r.data().iter().zip(c.data()).any(|(&a, &b)| a & b != 0) {
                return Err(XblError::Dataset("relevance and confounder masks overlap".into()));
            }
        }
        Ok(())
    }

    /// The image as a (1, h, w) tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (h, w) = self.pixels.dims();
        Tensor::new([1, h, w], self.pixels.data().to_vec()).expect("grid dims match data")
    }
}

/// Stacks images into an (n, 1, h, w) batch.
pub fn stack(images: &[&LabeledImage]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| XblError::Contract("cannot stack an empty batch".into()))?;
    let (h, w) = first.pixels.dims();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.pixels.dims() != (h, w) {
            return Err(XblError::dim(
                "stack",
                format!("{:?} vs {:?}", im.pixels.dims(), (h, w)),
            ));
        }
        data.extend_from_slice(im.pixels.data());
    }
    Tensor::new([images.len(), 1, h, w], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitName {
    Train,
    Validation,
    TestClean,
    TestSwapped,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::Validation,
        SplitName::TestClean,
        SplitName::TestSwapped,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Validation => "validation",
            SplitName::TestClean => "test_clean",
            SplitName::TestSwapped => "test_swapped",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = XblError;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| XblError::Lookup(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    /// Confounded.
    pub train: Vec<LabeledImage>,
    /// Confounded, same distribution as `train`.
    pub validation: Vec<LabeledImage>,
    /// No confounder.
    pub test_clean: Vec<LabeledImage>,
    /// Confounder drawn from a wrong class.
    pub test_swapped: Vec<LabeledImage>,
}

impl DatasetSplit {
    pub fn split(&self, name: SplitName) -> &[LabeledImage] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Validation => &self.validation,
            SplitName::TestClean => &self.test_clean,
            SplitName::TestSwapped => &self.test_swapped,
        }
    }

    pub fn split_mut(&mut self, name: SplitName) -> &mut Vec<LabeledImage> {
        match name {
            SplitName::Train => &mut self.train,
            SplitName::Validation => &mut self.validation,
            SplitName::TestClean => &mut self.test_clean,
            SplitName::TestSwapped => &mut self.test_swapped,
        }
    }

    /// Per-class image counts of one split.
    pub fn class_counts(&self, name: SplitName, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for im in self.split(name) {
            if im.label < num_classes {
                counts[im.label] += 1;
            }
        }
        counts
    }
}
