//! Generated "shapes" datasets: filled circles and rectangles on a noisy
//! background, for smoke tests and overfitting checks.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClassEntry, ClassTable, LoadedSample};
use crate::error::{EnsegError, Result};
use crate::raster::LabelMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesConfig {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    /// Shapes per image, drawn uniformly from `1..=max_shapes`.
    pub max_shapes: usize,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            count: 16,
            width: 96,
            height: 64,
            max_shapes: 3,
            seed: 0,
        }
    }
}

/// Background, circle, rectangle.
pub fn shapes_classes() -> ClassTable {
    let entry = |id, name: &str, color| ClassEntry {
        id,
        name: name.to_string(),
        color,
    };
    ClassTable::new(vec![
        entry(0, "background", [0, 0, 0]),
        entry(1, "circle", [230, 60, 60]),
        entry(2, "rectangle", [60, 120, 230]),
    ])
    .expect("static table")
}

const BASE_COLORS: [[f64; 3]; 3] = [[90.0, 90.0, 80.0], [200.0, 70.0, 60.0], [60.0, 110.0, 190.0]];

pub fn generate_shapes(cfg: &ShapesConfig) -> Result<Vec<LoadedSample>> {
    if cfg.count == 0 || cfg.max_shapes == 0 {
        return Err(EnsegError::Config("count and max_shapes must be positive".into()));
    }
    if cfg.width < 8 || cfg.height < 8 {
        return Err(EnsegError::Config("shapes images must be at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok((0..cfg.count)
        .map(|i| {
            let (image, mask) = one_image(cfg, &mut rng);
            LoadedSample {
                id: format!("shape_{i:04}"),
                image,
                mask,
            }
        })
        .collect())
}

fn one_image(cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> (RgbImage, LabelMask) {
    let (w, h) = (cfg.width, cfg.height);
    let mut labels = vec![0u8; w * h];
    let min_side = w.min(h) as f64;
    for _ in 0..rng.random_range(1..=cfg.max_shapes) {
        let class = rng.random_range(1..=2u8);
        let cx = rng.random_range(0.15..0.85) * w as f64;
        let cy = rng.random_range(0.15..0.85) * h as f64;
        let size = rng.random_range(0.12..0.3) * min_side;
        let aspect = rng.random_range(0.6..1.6);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = if class == 1 {
                    dx * dx + dy * dy <= size * size
                } else {
                    dx.abs() <= size * aspect && dy.abs() <= size / aspect
                };
                if inside {
                    labels[y * w + x] = class;
                }
            }
        }
    }
    let tint: Vec<[f64; 3]> = BASE_COLORS
        .iter()
        .map(|c| c.map(|v| v + rng.random_range(-20.0..20.0)))
        .collect();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = tint[labels[y as usize * w + x as usize] as usize];
        Rgb(c.map(|v| (v + rng.random_range(-15.0..15.0)).clamp(0.0, 255.0) as u8))
    });
    let mask = LabelMask::new(w, h, labels).expect("sized");
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_sized() {
        let cfg = ShapesConfig {
            count: 3,
            ..ShapesConfig::default()
        };
        let a = generate_shapes(&cfg).unwrap();
        let b = generate_shapes(&cfg).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.mask, y.mask);
            assert_eq!((x.mask.width(), x.mask.height()), (96, 64));
            assert!(x.mask.max_label().unwrap() <= 2);
        }
    }
}
