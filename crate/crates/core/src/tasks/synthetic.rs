//! Procedurally rendered image domains with controllable shifts.
//!
//! Each class is a distinct (shape, texture, colour) combination. Per-image
//! randomness covers position, size, texture phase, colour jitter, background
//! and pixel noise. Shifts are applied identically to every image of a
//! domain; at their neutral values they leave the renders untouched.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{ClassImages, DatasetHandle, Split};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Diamond,
    HBar,
    VBar,
    Saltire,
    Frame,
    HalfDisc,
    Corner,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Solid,
    HStripes,
    VStripes,
    Checker,
    Dots,
    Diagonal,
}

impl TextureKind {
    /// Texture used in place of `self` when a domain swaps textures.
    pub fn swapped(self) -> TextureKind {
        match self {
            TextureKind::Solid => TextureKind::Dots,
            TextureKind::Dots => TextureKind::Solid,
            TextureKind::HStripes => TextureKind::Diagonal,
            TextureKind::Diagonal => TextureKind::HStripes,
            TextureKind::VStripes => TextureKind::Checker,
            TextureKind::Checker => TextureKind::VStripes,
        }
    }

    fn on(self, x: usize, y: usize, phase: usize) -> bool {
        let (x, y) = (x + phase, y + phase / 2);
        match self {
            TextureKind::Solid => true,
            TextureKind::HStripes => (y / 2) % 2 == 0,
            TextureKind::VStripes => (x / 2) % 2 == 0,
            TextureKind::Checker => (x / 2 + y / 2) % 2 == 0,
            TextureKind::Dots => x % 3 == 0 && y % 3 == 0,
            TextureKind::Diagonal => ((x + y) / 2) % 2 == 0,
        }
    }
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 12] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Diamond,
        ShapeKind::HBar,
        ShapeKind::VBar,
        ShapeKind::Saltire,
        ShapeKind::Frame,
        ShapeKind::HalfDisc,
        ShapeKind::Corner,
    ];

    /// Membership test in shape-normalised coordinates.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            ShapeKind::Circle => r2 <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.8,
            ShapeKind::Triangle => (-0.8..=0.85).contains(&v) && u.abs() <= (v + 0.8) * 0.6,
            ShapeKind::Cross => (u.abs() <= 0.3 && v.abs() <= 0.95) || (v.abs() <= 0.3 && u.abs() <= 0.95),
            ShapeKind::Ring => (0.36..=1.0).contains(&r2),
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.0,
            ShapeKind::HBar => v.abs() <= 0.4 && u.abs() <= 0.95,
            ShapeKind::VBar => u.abs() <= 0.4 && v.abs() <= 0.95,
            ShapeKind::Saltire => r2 <= 1.0 && ((u - v).abs() <= 0.45 || (u + v).abs() <= 0.45),
            ShapeKind::Frame => (0.45..=0.85).contains(&u.abs().max(v.abs())),
            ShapeKind::HalfDisc => r2 <= 1.0 && v >= -0.1,
            ShapeKind::Corner => {
                ((-0.85..=-0.25).contains(&u) && v.abs() <= 0.85) || ((0.25..=0.85).contains(&v) && u.abs() <= 0.85)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderParams {
    pub image_size: usize,
    pub shapes: Vec<ShapeKind>,
    pub textures: Vec<TextureKind>,
    /// Foreground colours, RGB in `[0,1]`.
    pub palette: Vec<[f64; 3]>,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    /// Per-image foreground colour offsets are drawn from `[-j, j]` per channel.
    pub colour_jitter: f64,
    /// When false, classes are (shape, texture) pairs and every image draws
    /// its colour from the palette.
    pub colour_per_class: bool,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            image_size: 16,
            shapes: ShapeKind::ALL.to_vec(),
            textures: vec![TextureKind::Solid, TextureKind::HStripes, TextureKind::VStripes],
            palette: vec![
                [0.9, 0.2, 0.2],
                [0.95, 0.6, 0.1],
                [0.85, 0.85, 0.2],
                [0.9, 0.4, 0.6],
            ],
            noise_level: 0.03,
            colour_jitter: 0.06,
            colour_per_class: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Rotation of every pixel's colour around the grey axis, in degrees.
    pub hue_rotation_deg: f64,
    /// Render every class with [`TextureKind::swapped`] textures.
    pub texture_swap: bool,
    /// Box-blur radius in pixels.
    pub blur_radius: usize,
    /// Output channel `c` takes input channel `channel_permutation[c]`.
    pub channel_permutation: [usize; 3],
    /// Contrast factor around 0.5.
    pub contrast: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        ShiftParams {
            hue_rotation_deg: 0.0,
            texture_swap: false,
            blur_radius: 0,
            channel_permutation: [0, 1, 2],
            contrast: 1.0,
        }
    }
}

impl ShiftParams {
    pub fn is_neutral(&self) -> bool {
        *self == ShiftParams::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    #[serde(default = "default_domain_name")]
    pub name: String,
    pub class_count: usize,
    /// Index of the first class in the seed's shuffled list of
    /// combinations, so that domains with the same seed can hold disjoint classes.
    #[serde(default)]
    pub first_class: usize,
    #[serde(default)]
    pub render: RenderParams,
    #[serde(default)]
    pub shift: ShiftParams,
    pub seed: u64,
}

fn default_domain_name() -> String {
    "synthetic".into()
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, class_count: usize, seed: u64) -> Self {
        DomainSpec {
            name: name.into(),
            class_count,
            first_class: 0,
            render: RenderParams::default(),
            shift: ShiftParams::default(),
            seed,
        }
    }

    pub fn with_shift(mut self, shift: ShiftParams) -> Self {
        self.shift = shift;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.render;
        if self.class_count == 0 {
            return Err(Error::config("class_count", "must be positive"));
        }
        if r.image_size < 4 {
            return Err(Error::config("render.image_size", "must be at least 4"));
        }
        if r.shapes.is_empty() || r.textures.is_empty() || r.palette.is_empty() {
            return Err(Error::config("render", "shapes, textures and palette must be non-empty"));
        }
        if r.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("render.palette", "colours must lie in [0,1]"));
        }
        if !(r.noise_level >= 0.0) {
            return Err(Error::config("render.noise_level", "must be non-negative"));
        }
        if !(r.colour_jitter >= 0.0) {
            return Err(Error::config("render.colour_jitter", "must be non-negative"));
        }
        let colours = if r.colour_per_class { r.palette.len() } else { 1 };
        let combos = r.shapes.len() * r.textures.len() * colours;
        if self.first_class + self.class_count > combos {
            return Err(Error::config(
                "class_count",
                format!(
                    "classes {}..{} requested but only {combos} shape/texture/colour combinations exist",
                    self.first_class,
                    self.first_class + self.class_count
                ),
            ));
        }
        let mut perm = self.shift.channel_permutation;
        perm.sort();
        if perm != [0, 1, 2] {
            return Err(Error::config("shift.channel_permutation", "must be a permutation of [0, 1, 2]"));
        }
        if !(self.shift.contrast > 0.0) || !self.shift.hue_rotation_deg.is_finite() {
            return Err(Error::config("shift", "contrast must be positive and hue rotation finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct ClassRecipe {
    shape: ShapeKind,
    texture: TextureKind,
    /// `None` when colour is drawn per image.
    colour: Option<[f64; 3]>,
}

fn class_recipes(spec: &DomainSpec) -> Vec<ClassRecipe> {
    let r = &spec.render;
    let mut combos = Vec::new();
    for &shape in &r.shapes {
        for &texture in &r.textures {
            if r.colour_per_class {
                for &colour in &r.palette {
                    combos.push(ClassRecipe { shape, texture, colour: Some(colour) });
                }
            } else {
                combos.push(ClassRecipe { shape, texture, colour: None });
            }
        }
    }
    combos.shuffle(&mut seed::rng(seed::derive(spec.seed, seed::RENDER, u64::MAX)));
    combos.into_iter().skip(spec.first_class).take(spec.class_count).collect()
}

/// Renders `images_per_class` images for every class of the domain.
pub fn generate_domain(spec: &DomainSpec, images_per_class: usize) -> Result<DatasetHandle> {
    spec.validate()?;
    if images_per_class == 0 {
        return Err(Error::invalid("images_per_class must be positive"));
    }
    let size = spec.render.image_size;
    let classes = class_recipes(spec)
        .into_iter()
        .enumerate()
        .map(|(c, recipe)| {
            let texture = if spec.shift.texture_swap { recipe.texture.swapped() } else { recipe.texture };
            let images = (0..images_per_class)
                .map(|i| {
                    let mut rng = seed::rng(seed::derive(spec.seed, seed::RENDER, (((spec.first_class + c) as u64) << 32) | i as u64));
                    let palette = &spec.render.palette;
                    let colour = recipe.colour.unwrap_or_else(|| palette[rng.random_range(0..palette.len())]);
                    let img = render(&mut rng, recipe.shape, texture, colour, size, &spec.render);
                    apply_shift(img, &spec.shift, size)
                })
                .collect();
            let name = format!(
                "{}-{}-{}",
                serde_json::to_value(recipe.shape).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                serde_json::to_value(recipe.texture).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                recipe.colour.map(colour_tag).unwrap_or_else(|| "any".into())
            );
            ClassImages { name, images }
        })
        .collect();
    DatasetHandle::new(spec.name.clone(), Split::Train, [3, size, size], classes)
}

fn colour_tag(c: [f64; 3]) -> String {
    format!("{:02x}{:02x}{:02x}", (c[0] * 255.0) as u8, (c[1] * 255.0) as u8, (c[2] * 255.0) as u8)
}

fn render(rng: &mut impl Rng, shape: ShapeKind, texture: TextureKind, colour: [f64; 3], size: usize, params: &RenderParams) -> Vec<f64> {
    let noise = params.noise_level;
    let j = params.colour_jitter;
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let cy = s / 2.0 + rng.random_range(-0.12..0.12) * s;
    let radius = rng.random_range(0.30..0.40) * s;
    let phase = rng.random_range(0..4usize);
    let bg = rng.random_range(0.05..0.3);
    let jitter: [f64; 3] = std::array::from_fn(|_| if j > 0.0 { rng.random_range(-j..j) } else { 0.0 });
    let fg: [f64; 3] = std::array::from_fn(|c| (colour[c] + jitter[c]).clamp(0.0, 1.0));
    let normal = Normal::new(0.0, noise.max(0.0)).expect("valid noise level");
    let mut img = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            let inside = shape.contains(u, v);
            for c in 0..3 {
                let base = if !inside {
                    bg
                } else if texture.on(x, y, phase) {
                    fg[c]
                } else {
                    0.35 * fg[c] + 0.1
                };
                let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
                img[(c * size + y) * size + x] = (base + n).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn apply_shift(mut img: Vec<f64>, shift: &ShiftParams, size: usize) -> Vec<f64> {
    let plane = size * size;
    if shift.hue_rotation_deg != 0.0 {
        let m = hue_rotation_matrix(shift.hue_rotation_deg);
        for p in 0..plane {
            let rgb = [img[p], img[plane + p], img[2 * plane + p]];
            for (c, row) in m.iter().enumerate() {
                img[c * plane + p] = (row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2]).clamp(0.0, 1.0);
            }
        }
    }
    if shift.contrast != 1.0 {
        for v in img.iter_mut() {
            *v = ((*v - 0.5) * shift.contrast + 0.5).clamp(0.0, 1.0);
        }
    }
    if shift.blur_radius > 0 {
        img = box_blur(&img, size, shift.blur_radius);
    }
    if shift.channel_permutation != [0, 1, 2] {
        let src = img.clone();
        for (c, &from) in shift.channel_permutation.iter().enumerate() {
            img[c * plane..(c + 1) * plane].copy_from_slice(&src[from * plane..(from + 1) * plane]);
        }
    }
    img
}

/// Rodrigues rotation about the (1,1,1)/√3 axis.
fn hue_rotation_matrix(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    let a = (1.0 - c) / 3.0;
    let b = s / 3f64.sqrt();
    [[c + a, a - b, a + b], [a + b, c + a, a - b], [a - b, a + b, c + a]]
}

fn box_blur(img: &[f64], size: usize, radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for c in 0..3 {
        let plane = &img[c * size * size..(c + 1) * size * size];
        for y in 0..size {
            for x in 0..size {
                let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(size - 1));
                let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(size - 1));
                let mut acc = 0.0;
                for yy in y0..=y1 {
                    for xx in x0..=x1 {
                        acc += plane[yy * size + xx];
                    }
                }
                out[(c * size + y) * size + x] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
            }
        }
    }
    out
}
