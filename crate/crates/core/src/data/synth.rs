//! Deterministic synthetic segmentation scenes: coloured geometric shapes on
//! a noisy background.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::rng::SplitMix64;

/// Base colours: background first, then one per shape class. Classes beyond
/// the table reuse it with a fixed tint.
const PALETTE: [[f64; 3]; 7] = [
    [0.45, 0.45, 0.45],
    [0.80, 0.30, 0.30],
    [0.30, 0.75, 0.35],
    [0.30, 0.40, 0.80],
    [0.80, 0.75, 0.25],
    [0.70, 0.30, 0.75],
    [0.25, 0.75, 0.75],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub shapes_per_image: usize,
    pub noise_sigma: f64,
    /// Half-width of the per-image, per-class colour shift (uniform per channel).
    pub color_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            classes: 4,
            shapes_per_image: 3,
            noise_sigma: 0.1,
            color_jitter: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("classes must be >= 2, got {}", self.classes)));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "image must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.classes > 255 {
            return Err(Error::Config("labels are stored as 8-bit PGM; at most 255 classes".into()));
        }
        for (name, v) in [("noise_sigma", self.noise_sigma), ("color_jitter", self.color_jitter)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Geometry of one drawn shape.
#[derive(Clone, Debug, PartialEq)]
pub enum ShapeGeometry {
    Rect { y0: usize, x0: usize, h: usize, w: usize },
    Disk { cy: f64, cx: f64, r: f64 },
    /// `|(x ∓ y) − offset| ≤ half`; `anti` selects the `x + y` diagonal.
    Stripe { anti: bool, offset: i64, half: i64 },
}

impl ShapeGeometry {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            ShapeGeometry::Rect { y0, x0, h, w } => (y0..y0 + h).contains(&y) && (x0..x0 + w).contains(&x),
            ShapeGeometry::Disk { cy, cx, r } => {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            }
            ShapeGeometry::Stripe { anti, offset, half } => {
                let t = if anti { x as i64 + y as i64 } else { x as i64 - y as i64 };
                (t - offset).abs() <= half
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub class: u32,
    pub geometry: ShapeGeometry,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample<T> {
    /// `[H, W, 3]`, values in `[0, 1]`.
    pub image: Tensor<T>,
    pub labels: LabelMask,
    pub seed: u64,
    /// Draw order; later shapes overwrite earlier ones.
    pub shapes: Vec<PlacedShape>,
}

/// Shape kind for a foreground class: rectangle, disk, stripe, repeating.
fn shape_kind(class: u32) -> u32 {
    (class - 1) % 3
}

fn draw_geometry(kind: u32, h: usize, w: usize, rng: &mut SplitMix64) -> ShapeGeometry {
    let span = |rng: &mut SplitMix64, lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
    match kind {
        0 => {
            let rh = span(rng, (h / 6).max(3), (h / 2).max(3));
            let rw = span(rng, (w / 6).max(3), (w / 2).max(3));
            ShapeGeometry::Rect {
                y0: rng.below(h - rh + 1),
                x0: rng.below(w - rw + 1),
                h: rh,
                w: rw,
            }
        }
        1 => {
            let m = h.min(w) as f64;
            let r = rng.uniform((m / 10.0).max(2.0), (m / 4.0).max(2.5));
            ShapeGeometry::Disk {
                cy: rng.uniform(r * 0.5, h as f64 - 1.0 - r * 0.5),
                cx: rng.uniform(r * 0.5, w as f64 - 1.0 - r * 0.5),
                r,
            }
        }
        _ => {
            let anti = rng.next_u64() & 1 == 1;
            let half = 1 + rng.below(2) as i64;
            let (h, w) = (h as i64, w as i64);
            // keep the stripe's centre line well inside the image
            let offset = if anti {
                h / 3 + rng.below(((w + h) / 3).max(1) as usize) as i64
            } else {
                -h / 3 + rng.below((w / 3 + h / 3).max(1) as usize) as i64
            };
            ShapeGeometry::Stripe { anti, offset, half }
        }
    }
}

fn pixel_count(g: &ShapeGeometry, h: usize, w: usize) -> usize {
    (0..h * w).filter(|&i| g.contains(i / w, i % w)).count()
}

/// Renders the sample for `seed`. A pure function of `(config, seed)`.
pub fn generate<T: Scalar>(cfg: &SynthConfig, seed: u64) -> Result<SynthSample<T>> {
    cfg.validate()?;
    let (h, w, k) = (cfg.height, cfg.width, cfg.classes);
    let mut layout = SplitMix64::derive(seed, 0);
    let mut colours = SplitMix64::derive(seed, 1);
    let mut noise = SplitMix64::derive(seed, 2);

    let mut shapes = Vec::with_capacity(cfg.shapes_per_image);
    for _ in 0..cfg.shapes_per_image {
        let class = 1 + layout.below(k - 1) as u32;
        let kind = shape_kind(class);
        let mut geometry = draw_geometry(kind, h, w, &mut layout);
        for _ in 0..16 {
            if pixel_count(&geometry, h, w) >= 4 {
                break;
            }
            geometry = draw_geometry(kind, h, w, &mut layout);
        }
        shapes.push(PlacedShape { class, geometry });
    }

    let mut labels = LabelMask::filled(h, w, 0);
    for s in &shapes {
        for y in 0..h {
            for x in 0..w {
                if s.geometry.contains(y, x) {
                    labels.set(y, x, s.class);
                }
            }
        }
    }

    let palette: Vec<[f64; 3]> = (0..k)
        .map(|c| {
            let base = PALETTE[c % PALETTE.len()];
            let tint = (c / PALETTE.len()) as f64 * 0.07;
            let mut rgb = [0.0; 3];
            for (ch, v) in rgb.iter_mut().enumerate() {
                let shift = colours.uniform(-cfg.color_jitter, cfg.color_jitter);
                *v = (base[ch] + tint + shift).clamp(0.0, 1.0);
            }
            rgb
        })
        .collect();

    let mut data = Vec::with_capacity(h * w * 3);
    for &l in labels.labels() {
        for ch in 0..3 {
            let v = palette[l as usize][ch] + cfg.noise_sigma * noise.normal();
            data.push(T::lit(v.clamp(0.0, 1.0)));
        }
    }
    Ok(SynthSample {
        image: Tensor::new(&[h, w, 3], data)?,
        labels,
        seed,
        shapes,
    })
}
