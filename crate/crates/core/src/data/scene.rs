//! Synthetic street-scene stand-in: colored rectangles and discs on a background.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, SegSample};
use crate::error::{Error, Result};
use crate::numeric::RngStream;

fn default_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Smallest and largest shape extent in pixels.
    pub min_extent: usize,
    pub max_extent: usize,
    pub noise_std: f32,
    /// Base color per class (`classes` rows of `channels` values in `[0,1]`);
    /// a fixed hue wheel when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Vec<Vec<f32>>>,
}

impl SceneConfig {
    pub fn new(height: usize, width: usize, classes: usize) -> Self {
        Self {
            height,
            width,
            classes,
            channels: 3,
            min_shapes: 1,
            max_shapes: 3,
            min_extent: 4,
            max_extent: (height.min(width) / 2).max(4),
            noise_std: 0.1,
            palette: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::Config(format!(
                "scene height/width must be positive multiples of 4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes < 2 || self.classes > 254 {
            return Err(Error::Config(format!(
                "scene.classes must lie in 2..=254, got {}",
                self.classes
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("scene.channels must be at least 1".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::Config(format!(
                "scene.min_shapes ({}) exceeds max_shapes ({})",
                self.min_shapes, self.max_shapes
            )));
        }
        if self.min_extent == 0 || self.min_extent > self.max_extent {
            return Err(Error::Config(format!(
                "scene extents must satisfy 1 <= min_extent ({}) <= max_extent ({})",
                self.min_extent, self.max_extent
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "scene.noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        if let Some(p) = &self.palette {
            if p.len() != self.classes || p.iter().any(|c| c.len() != self.channels) {
                return Err(Error::Config(format!(
                    "scene.palette must have {} rows of {} values",
                    self.classes, self.channels
                )));
            }
            if p.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Config("scene.palette values must lie in [0,1]".into()));
            }
        }
        Ok(())
    }

    /// Base color of every class.
    pub fn colors(&self) -> Vec<Vec<f32>> {
        if let Some(p) = &self.palette {
            return p.clone();
        }
        let tau = std::f64::consts::TAU;
        (0..self.classes)
            .map(|k| {
                (0..self.channels)
                    .map(|c| {
                        let phase = tau * (k as f64 / self.classes as f64 + c as f64 / self.channels as f64);
                        (0.5 + 0.4 * phase.cos()) as f32
                    })
                    .collect()
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect {
        class: u8,
        top: usize,
        left: usize,
        height: usize,
        width: usize,
    },
    Disc {
        class: u8,
        cy: usize,
        cx: usize,
        radius: usize,
    },
}

impl Shape {
    fn class(&self) -> u8 {
        match *self {
            Shape::Rect { class, .. } | Shape::Disc { class, .. } => class,
        }
    }

    fn covers(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect {
                top,
                left,
                height,
                width,
                ..
            } => y >= top && y < top + height && x >= left && x < left + width,
            Shape::Disc { cy, cx, radius, .. } => {
                let dy = y as isize - cy as isize;
                let dx = x as isize - cx as isize;
                dy * dy + dx * dx <= (radius * radius) as isize
            }
        }
    }
}

fn uniform_between(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Draws the shape list of one scene.
pub fn sample_shapes(config: &SceneConfig, rng: &mut RngStream) -> Vec<Shape> {
    let n = uniform_between(rng, config.min_shapes, config.max_shapes);
    let (h, w) = (config.height, config.width);
    (0..n)
        .map(|_| {
            let class = (1 + rng.below(config.classes - 1)) as u8;
            let max_ext = config.max_extent.min(h).min(w);
            let min_ext = config.min_extent.min(max_ext);
            if rng.below(2) == 0 {
                let height = uniform_between(rng, min_ext, max_ext);
                let width = uniform_between(rng, min_ext, max_ext);
                Shape::Rect {
                    class,
                    top: rng.below(h - height + 1),
                    left: rng.below(w - width + 1),
                    height,
                    width,
                }
            } else {
                let radius = (uniform_between(rng, min_ext, max_ext) / 2).max(1);
                Shape::Disc {
                    class,
                    cy: rng.below(h),
                    cx: rng.below(w),
                    radius,
                }
            }
        })
        .collect()
}

/// Paints `shapes` in order over background class 0 and adds per-pixel
/// Gaussian noise to the class colors, clamping to `[0,1]`.
pub fn render(config: &SceneConfig, shapes: &[Shape], rng: &mut RngStream) -> SegSample {
    let (h, w) = (config.height, config.width);
    let mut label = vec![0u8; h * w];
    for s in shapes {
        for y in 0..h {
            for x in 0..w {
                if s.covers(y, x) {
                    label[y * w + x] = s.class();
                }
            }
        }
    }
    let colors = config.colors();
    let mut image = vec![0f32; config.channels * h * w];
    for c in 0..config.channels {
        for (i, &l) in label.iter().enumerate() {
            let base = colors[l as usize][c];
            let v = if config.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(rng);
                (base + config.noise_std * z as f32).clamp(0.0, 1.0)
            } else {
                base
            };
            image[c * h * w + i] = v;
        }
    }
    SegSample { image, label }
}

pub fn generate_scene(config: &SceneConfig, rng: &mut RngStream) -> SegSample {
    let shapes = sample_shapes(config, rng);
    render(config, &shapes, rng)
}

/// `count` scenes from one stream.
pub fn generate_dataset(config: &SceneConfig, count: usize, rng: &mut RngStream) -> Result<Dataset> {
    config.validate()?;
    let samples = (0..count).map(|_| generate_scene(config, rng)).collect();
    Dataset::new(config.channels, config.height, config.width, config.classes, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SceneConfig {
        SceneConfig::new(16, 16, 4)
    }

    #[test]
    fn no_shapes_is_all_background() {
        let c = SceneConfig {
            min_shapes: 0,
            max_shapes: 0,
            ..cfg()
        };
        let s = generate_scene(&c, &mut RngStream::new(1));
        assert!(s.label.iter().all(|&l| l == 0));
    }

    #[test]
    fn noiseless_rectangle_has_exact_color() {
        let c = SceneConfig {
            noise_std: 0.0,
            ..cfg()
        };
        let rect = Shape::Rect {
            class: 2,
            top: 3,
            left: 5,
            height: 4,
            width: 6,
        };
        let s = render(&c, &[rect], &mut RngStream::new(0));
        let color = &c.colors()[2];
        let mut inside = 0;
        for y in 0..16 {
            for x in 0..16 {
                let i = y * 16 + x;
                if (3..7).contains(&y) && (5..11).contains(&x) {
                    inside += 1;
                    assert_eq!(s.label[i], 2);
                    for ch in 0..3 {
                        assert_eq!(s.image[ch * 256 + i], color[ch]);
                    }
                } else {
                    assert_eq!(s.label[i], 0);
                }
            }
        }
        assert_eq!(inside, 24);
    }

    #[test]
    fn labels_and_pixels_stay_in_range() {
        let c = SceneConfig {
            noise_std: 0.5,
            max_shapes: 6,
            ..cfg()
        };
        let mut rng = RngStream::new(9);
        for _ in 0..50 {
            let s = generate_scene(&c, &mut rng);
            assert!(s.label.iter().all(|&l| (l as usize) < c.classes));
            assert!(s.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn histogram_is_reproducible() {
        let hist = |seed| {
            let mut rng = RngStream::new(seed);
            let mut h = [0u64; 4];
            for _ in 0..1000 {
                for &l in &generate_scene(&cfg(), &mut rng).label {
                    h[l as usize] += 1;
                }
            }
            h
        };
        let a = hist(11);
        assert_eq!(a, hist(11));
        assert!(a.iter().all(|&c| c > 0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(SceneConfig::new(15, 16, 4).validate().is_err());
        assert!(SceneConfig::new(16, 16, 1).validate().is_err());
        let c = SceneConfig {
            noise_std: -1.0,
            ..cfg()
        };
        assert!(c.validate().is_err());
    }
}
