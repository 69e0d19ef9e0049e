//! Deterministic colored-shapes segmentation dataset.
//!
//! Every class has its own color and shape family. Images hold 1 to
//! `max_shapes` non-overlapping shapes on a textured background, and masks
//! are exact pixel-center rasterizations of those shapes.

use std::f64::consts::PI;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{ClassId, LabeledSample, BACKGROUND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_min_radius")]
    pub min_radius: usize,
    #[serde(default = "default_max_radius")]
    pub max_radius: usize,
    #[serde(default = "default_max_shapes")]
    pub max_shapes: usize,
}

fn default_min_radius() -> usize {
    7
}

fn default_max_radius() -> usize {
    14
}

fn default_max_shapes() -> usize {
    3
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, images_per_class: usize, height: usize, width: usize) -> Self {
        Self {
            num_classes,
            images_per_class,
            height,
            width,
            min_radius: default_min_radius(),
            max_radius: default_max_radius(),
            max_shapes: default_max_shapes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::SpecInfeasible("need at least 2 classes".into()));
        }
        if self.num_classes > 254 {
            return Err(Error::SpecInfeasible("at most 254 classes".into()));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::SpecInfeasible(format!(
                "image {}x{} smaller than 16x16",
                self.height, self.width
            )));
        }
        if self.images_per_class == 0 || self.max_shapes == 0 {
            return Err(Error::SpecInfeasible(
                "images_per_class and max_shapes must be positive".into(),
            ));
        }
        if self.min_radius == 0 || self.min_radius > self.max_radius {
            return Err(Error::SpecInfeasible(format!(
                "radius range [{}, {}] is empty",
                self.min_radius, self.max_radius
            )));
        }
        let side = 2 * self.min_radius;
        if side > self.height.min(self.width) {
            return Err(Error::SpecInfeasible(format!(
                "a shape of radius {} does not fit in {}x{}",
                self.min_radius, self.height, self.width
            )));
        }
        if self.max_shapes * side * side > self.height * self.width {
            return Err(Error::SpecInfeasible(format!(
                "{} shapes of radius {} cannot be placed in {}x{}",
                self.max_shapes, self.min_radius, self.height, self.width
            )));
        }
        Ok(())
    }

    fn effective_max_radius(&self) -> usize {
        self.max_radius.min(self.height.min(self.width) / 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Diamond,
    Triangle,
    Ring,
    Cross,
    Ellipse,
}

const FAMILIES: [ShapeFamily; 7] = [
    ShapeFamily::Disk,
    ShapeFamily::Square,
    ShapeFamily::Diamond,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
    ShapeFamily::Cross,
    ShapeFamily::Ellipse,
];

const SQUARE_HALF: f64 = 0.8;
const CROSS_HALF_WIDTH: f64 = 1.0 / 3.0;
const ELLIPSE_MINOR: f64 = 0.6;

impl ShapeFamily {
    /// Whether the offset `(dx, dy)` from the shape center lies inside a
    /// shape of radius `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeFamily::Disk => dx * dx + dy * dy <= r * r,
            ShapeFamily::Square => dx.abs() <= SQUARE_HALF * r && dy.abs() <= SQUARE_HALF * r,
            ShapeFamily::Diamond => dx.abs() + dy.abs() <= r,
            ShapeFamily::Triangle => {
                // upward equilateral triangle inscribed in the circle of radius r
                let base = r / 2.0;
                let half_side = r * 3f64.sqrt() / 2.0;
                if dy > base || dy < -r {
                    return false;
                }
                let frac = (dy + r) / (base + r);
                dx.abs() <= frac * half_side
            }
            ShapeFamily::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= r * r / 4.0
            }
            ShapeFamily::Cross => {
                let w = CROSS_HALF_WIDTH * r;
                (dx.abs() <= r && dy.abs() <= w) || (dy.abs() <= r && dx.abs() <= w)
            }
            ShapeFamily::Ellipse => {
                let (a, b) = (r, ELLIPSE_MINOR * r);
                (dx / a).powi(2) + (dy / b).powi(2) <= 1.0
            }
        }
    }

    pub fn area(self, r: f64) -> f64 {
        match self {
            ShapeFamily::Disk => PI * r * r,
            ShapeFamily::Square => (2.0 * SQUARE_HALF * r).powi(2),
            ShapeFamily::Diamond => 2.0 * r * r,
            ShapeFamily::Triangle => 3.0 * 3f64.sqrt() / 4.0 * r * r,
            ShapeFamily::Ring => 0.75 * PI * r * r,
            ShapeFamily::Cross => {
                let w = CROSS_HALF_WIDTH * r;
                2.0 * (2.0 * r) * (2.0 * w) - (2.0 * w).powi(2)
            }
            ShapeFamily::Ellipse => PI * r * ELLIPSE_MINOR * r,
        }
    }

    pub fn perimeter(self, r: f64) -> f64 {
        match self {
            ShapeFamily::Disk => 2.0 * PI * r,
            ShapeFamily::Square => 8.0 * SQUARE_HALF * r,
            ShapeFamily::Diamond => 4.0 * 2f64.sqrt() * r,
            ShapeFamily::Triangle => 3.0 * 3f64.sqrt() * r,
            ShapeFamily::Ring => 3.0 * PI * r,
            ShapeFamily::Cross => 8.0 * r,
            ShapeFamily::Ellipse => {
                // Ramanujan
                let (a, b) = (r, ELLIPSE_MINOR * r);
                PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
            }
        }
    }

    /// Rasterize by pixel-center sampling into a `height × width` boolean grid.
    pub fn rasterize(self, cx: f64, cy: f64, r: f64, height: usize, width: usize) -> Vec<bool> {
        let mut out = vec![false; height * width];
        for y in 0..height {
            for x in 0..width {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                out[y * width + x] = self.contains(dx, dy, r);
            }
        }
        out
    }
}

/// Shape family of a class (classes are 1-based).
pub fn class_family(class: ClassId) -> ShapeFamily {
    FAMILIES[(class as usize - 1) % FAMILIES.len()]
}

/// RGB color of a class: hues spread evenly, alternating value levels.
pub fn class_color(class: ClassId, num_classes: usize) -> [f32; 3] {
    let i = class as usize - 1;
    let hue = i as f32 / num_classes as f32;
    let value = if i % 2 == 0 { 0.95 } else { 0.75 };
    hsv_to_rgb(hue, 0.85, value)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).min(5.999_999);
    let sector = h6.floor() as u32;
    let f = h6 - sector as f32;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    cx: f64,
    cy: f64,
    r: f64,
}

impl Placement {
    fn overlaps(&self, other: &Placement) -> bool {
        (self.cx - other.cx).abs() < self.r + other.r && (self.cy - other.cy).abs() < self.r + other.r
    }
}

const PLACEMENT_ATTEMPTS: usize = 64;

/// Generate `num_classes * images_per_class` samples. Image `i` always shows
/// class `i % num_classes + 1` (painted first, so it is never displaced), plus
/// up to `max_shapes - 1` other distinct classes.
pub fn generate_synthetic_dataset(seed: u64, spec: &SyntheticSpec) -> Result<Vec<LabeledSample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (spec.height, spec.width);
    let total = spec.num_classes * spec.images_per_class;
    let mut out = Vec::with_capacity(total);
    for i in 0..total {
        let primary = (i % spec.num_classes) as ClassId + 1;
        let extra = rng.random_range(0..spec.max_shapes.min(spec.num_classes));
        let mut classes = vec![primary];
        let others: Vec<ClassId> = (1..=spec.num_classes as ClassId)
            .filter(|&c| c != primary)
            .collect();
        for j in index::sample(&mut rng, others.len(), extra) {
            classes.push(others[j]);
        }
        out.push(render_image(&mut rng, spec, &classes, h, w)?);
    }
    Ok(out)
}

fn render_image(
    rng: &mut ChaCha8Rng,
    spec: &SyntheticSpec,
    classes: &[ClassId],
    h: usize,
    w: usize,
) -> Result<LabeledSample> {
    let mut image = vec![0f32; 3 * h * w];
    // textured background: gray base, diagonal stripes, per-pixel noise
    let base: f32 = rng.random_range(0.25..0.55);
    let freq: f32 = rng.random_range(0.15..0.45);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let tint: [f32; 3] = [
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
    ];
    for y in 0..h {
        for x in 0..w {
            let stripe = 0.08 * ((x + y) as f32 * freq + phase).sin();
            for (c, t) in tint.iter().enumerate() {
                let noise: f32 = rng.random_range(-0.06..0.06);
                image[(c * h + y) * w + x] = (base + stripe + t + noise).clamp(0.0, 1.0);
            }
        }
    }

    let mut mask = vec![BACKGROUND; h * w];
    let mut placed: Vec<Placement> = Vec::new();
    let max_r = spec.effective_max_radius();
    for (k, &class) in classes.iter().enumerate() {
        let mut chosen = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let r = rng.random_range(spec.min_radius..=max_r) as f64;
            let cx = rng.random_range(r..=(w as f64 - r));
            let cy = rng.random_range(r..=(h as f64 - r));
            let p = Placement { cx, cy, r };
            if placed.iter().all(|q| !q.overlaps(&p)) {
                chosen = Some(p);
                break;
            }
        }
        let Some(p) = chosen else {
            if k == 0 {
                return Err(Error::SpecInfeasible("could not place primary shape".into()));
            }
            // crowded image: keep the shapes placed so far
            break;
        };
        placed.push(p);
        let family = class_family(class);
        let color = class_color(class, spec.num_classes);
        let shade: f32 = rng.random_range(-0.08..0.08);
        let cover = family.rasterize(p.cx, p.cy, p.r, h, w);
        for (idx, _) in cover.iter().enumerate().filter(|(_, &inside)| inside) {
            mask[idx] = class;
            for (c, &v) in color.iter().enumerate() {
                let noise: f32 = rng.random_range(-0.04..0.04);
                image[c * h * w + idx] = (v + shade + noise).clamp(0.0, 1.0);
            }
        }
    }
    LabeledSample::new(3, h, w, image, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = SyntheticSpec::new(4, 3, 32, 32);
        let a = generate_synthetic_dataset(7, &spec).unwrap();
        let b = generate_synthetic_dataset(7, &spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_dataset(8, &spec).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_class_meets_quota() {
        let spec = SyntheticSpec::new(5, 20, 64, 64);
        let data = generate_synthetic_dataset(3, &spec).unwrap();
        assert_eq!(data.len(), 100);
        for class in 1..=5 {
            let n = data.iter().filter(|s| s.mask.contains(&class)).count();
            assert!(n >= 20, "class {class} in {n} masks");
        }
    }

    #[test]
    fn classes_co_occur() {
        let spec = SyntheticSpec::new(5, 20, 64, 64);
        let data = generate_synthetic_dataset(3, &spec).unwrap();
        let multi = data
            .iter()
            .filter(|s| {
                let mut seen: Vec<ClassId> = s.mask.iter().copied().filter(|&c| c != 0).collect();
                seen.sort_unstable();
                seen.dedup();
                seen.len() >= 2
            })
            .count();
        assert!(multi > 20, "only {multi} multi-class images");
    }

    #[test]
    fn too_small_spec_is_infeasible() {
        let mut spec = SyntheticSpec::new(3, 1, 16, 16);
        spec.min_radius = 8;
        spec.max_radius = 8;
        spec.max_shapes = 3;
        let err = generate_synthetic_dataset(0, &spec).unwrap_err();
        assert_eq!(err.code(), "SPEC_INFEASIBLE");

        assert!(SyntheticSpec::new(1, 1, 32, 32).validate().is_err());
        assert!(SyntheticSpec::new(3, 1, 8, 32).validate().is_err());
    }

    #[test]
    fn raster_area_within_perimeter() {
        for family in FAMILIES {
            for r in [5.0, 9.0, 14.0] {
                let cover = family.rasterize(20.3, 19.7, r, 40, 40);
                let count = cover.iter().filter(|&&b| b).count() as f64;
                let err = (count - family.area(r)).abs();
                assert!(
                    err <= family.perimeter(r),
                    "{family:?} r={r}: {count} vs {}",
                    family.area(r)
                );
            }
        }
    }

    #[test]
    fn colors_are_distinct() {
        let n = 20;
        let colors: Vec<[f32; 3]> = (1..=n as ClassId).map(|c| class_color(c, n)).collect();
        for i in 0..n {
            for j in i + 1..n {
                let d: f32 = (0..3).map(|k| (colors[i][k] - colors[j][k]).abs()).sum();
                assert!(d > 0.05, "classes {} and {} too similar", i + 1, j + 1);
            }
        }
    }
}
