//! Seeded synthetic decoy benchmark.
//!
//! Every class draws an oriented Gaussian bar through the image center (the
//! genuine signal, recorded as the relevance mask). Train and validation
//! images additionally carry a small corner patch whose corner and intensity
//! encode the class (the confounder). `test_clean` drops the patch and
//! `test_swapped` paints the patch of a random wrong class.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSplit, Grid, LabeledImage, Mask, SplitName};
use crate::error::{Result, XblError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Corner {
    TopLeft,
    TopRight,
    BottomRight,
    BottomLeft,
}

impl Corner {
    pub fn for_class(class: usize) -> Corner {
        [
            Corner::TopLeft,
            Corner::TopRight,
            Corner::BottomRight,
            Corner::BottomLeft,
        ][class % 4]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoySpec {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    /// Half length of the bar's flat section, in pixels.
    pub bar_half_length: f64,
    /// Gaussian cross-section width of the bar.
    pub bar_sigma: f64,
    /// Bar peak intensity is drawn uniformly from this range per image.
    pub bar_amplitude: (f64, f64),
    /// Maximum shift of the bar center in each axis, in pixels.
    pub bar_jitter: f64,
    /// Pixels whose noiseless bar profile reaches this fraction of the peak
    /// form the relevance mask.
    pub mask_level: f64,
    pub patch_size: usize,
    /// Distance of the patch from the image border.
    pub patch_margin: usize,
    /// Probability that a train/validation image carries its class patch.
    pub rho: f64,
    pub train_per_class: usize,
    pub validation_per_class: usize,
    pub test_clean_per_class: usize,
    pub test_swapped_per_class: usize,
    pub noise_sigma: f64,
}

impl Default for DecoySpec {
    fn default() -> Self {
        DecoySpec {
            num_classes: 4,
            height: 32,
            width: 32,
            bar_half_length: 8.0,
            bar_sigma: 1.2,
            bar_amplitude: (0.25, 0.45),
            bar_jitter: 1.5,
            mask_level: 0.2,
            patch_size: 4,
            patch_margin: 1,
            rho: 1.0,
            train_per_class: 200,
            validation_per_class: 100,
            test_clean_per_class: 100,
            test_swapped_per_class: 100,
            noise_sigma: 0.05,
        }
    }
}

impl DecoySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(XblError::Config(m));
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad(format!("rho must be in [0, 1], got {}", self.rho));
        }
        if self.noise_sigma < 0.0 || self.bar_sigma <= 0.0 || self.bar_half_length < 0.0 {
            return bad("noise_sigma, bar_sigma and bar_half_length must be nonnegative".into());
        }
        let (lo, hi) = self.bar_amplitude;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad(format!("bar amplitude range ({lo}, {hi}) must lie in (0, 1]"));
        }
        if !(0.0 < self.mask_level && self.mask_level < 1.0) {
            return bad(format!("mask_level must be in (0, 1), got {}", self.mask_level));
        }
        if self.patch_size == 0
            || 2 * (self.patch_size + self.patch_margin) > self.height.min(self.width)
        {
            return bad(format!(
                "patch of {} at margin {} does not fit a {}x{} image",
                self.patch_size, self.patch_margin, self.height, self.width
            ));
        }
        if self.train_per_class == 0 {
            return bad("train split cannot be empty".into());
        }
        Ok(())
    }

    fn bar_angle(&self, class: usize) -> f64 {
        class as f64 * PI / self.num_classes as f64
    }

    /// Noiseless bar profile with unit peak, centered at (cy, cx).
    fn bar_profile(&self, class: usize, cy: f64, cx: f64) -> Vec<f64> {
        let theta = self.bar_angle(class);
        let (s, c) = theta.sin_cos();
        let two_s2 = 2.0 * self.bar_sigma * self.bar_sigma;
        let mut out = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let along = dx * c + dy * s;
                let across = -dx * s + dy * c;
                let overhang = (along.abs() - self.bar_half_length).max(0.0);
                out.push((-(across * across + overhang * overhang) / two_s2).exp());
            }
        }
        out
    }

    fn patch_origin(&self, corner: Corner) -> (usize, usize) {
        let near = self.patch_margin;
        let far_y = self.height - self.patch_margin - self.patch_size;
        let far_x = self.width - self.patch_margin - self.patch_size;
        match corner {
            Corner::TopLeft => (near, near),
            Corner::TopRight => (near, far_x),
            Corner::BottomRight => (far_y, far_x),
            Corner::BottomLeft => (far_y, near),
        }
    }

    /// Intensity of the class patch.
    pub fn patch_intensity(&self, class: usize) -> f32 {
        (class + 1) as f32 / self.num_classes as f32
    }

    /// Mask of the patch belonging to `class`.
    pub fn patch_mask(&self, class: usize) -> Mask {
        let mut m = Grid::filled(self.height, self.width, 0u8);
        let (y0, x0) = self.patch_origin(Corner::for_class(class));
        for y in y0..y0 + self.patch_size {
            for x in x0..x0 + self.patch_size {
                m.set(y, x, 1);
            }
        }
        m
    }

    fn render(&self, rng: &mut ChaCha8Rng, label: usize, patch_class: Option<usize>) -> Result<LabeledImage> {
        let j = self.bar_jitter;
        let cy = (self.height as f64 - 1.0) / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        let cx = (self.width as f64 - 1.0) / 2.0 + if j > 0.0 { rng.gen_range(-j..=j) } else { 0.0 };
        let (lo, hi) = self.bar_amplitude;
        let amp = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let profile = self.bar_profile(label, cy, cx);
        let relevance: Vec<u8> = profile
            .iter()
            .map(|&p| u8::from(p >= self.mask_level))
            .collect();
        let mut pixels: Vec<f64> = profile.iter().map(|&p| amp * p).collect();
        let mut confounder = vec![0u8; pixels.len()];
        if let Some(pc) = patch_class {
            let mask = self.patch_mask(pc);
            let level = self.patch_intensity(pc) as f64;
            for (i, &m) in mask.data().iter().enumerate() {
                if m == 1 {
                    if relevance[i] == 1 {
                        return Err(XblError::Generation(format!(
                            "class {pc} patch overlaps the class {label} signal region"
                        )));
                    }
                    pixels[i] = level;
                    confounder[i] = 1;
                }
            }
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).expect("sigma is finite and positive");
            for p in &mut pixels {
                *p += noise.sample(rng);
            }
        }
        let pixels = pixels.iter().map(|&p| p.clamp(0.0, 1.0) as f32).collect();
        Ok(LabeledImage {
            pixels: Grid::new(self.height, self.width, pixels)?,
            label,
            relevance_mask: Some(Grid::new(self.height, self.width, relevance)?),
            confounder_mask: Some(Grid::new(self.height, self.width, confounder)?),
        })
    }

    fn per_class(&self, split: SplitName) -> usize {
        match split {
            SplitName::Train => self.train_per_class,
            SplitName::Validation => self.validation_per_class,
            SplitName::TestClean => self.test_clean_per_class,
            SplitName::TestSwapped => self.test_swapped_per_class,
        }
    }
}

/// Builds all four splits. Each image draws from its own ChaCha stream
/// (split and position select the stream), so the output depends only on
/// `spec` and `seed`.
pub fn generate_decoy_dataset(spec: &DecoySpec, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    let mut out = DatasetSplit::default();
    for (split_id, split) in SplitName::ALL.into_iter().enumerate() {
        let per_class = spec.per_class(split);
        let images = out.split_mut(split);
        for label in 0..spec.num_classes {
            for i in 0..per_class {
                let index = label * per_class + i;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(((split_id as u64) << 32) | index as u64);
                let patch = match split {
                    SplitName::Train | SplitName::Validation => {
                        (rng.gen::<f64>() < spec.rho).then_some(label)
                    }
                    SplitName::TestClean => None,
                    SplitName::TestSwapped => {
                        let k = rng.gen_range(0..spec.num_classes - 1);
                        Some(if k >= label { k + 1 } else { k })
                    }
                };
                images.push(spec.render(&mut rng, label, patch)?);
            }
        }
    }
    Ok(out)
}
