//! The synthetic world: eight origami-like classes drawn as textured shapes on
//! a noisy gray background.
//!
//! Each class carries a fixed surface texture tiled on the 8-pixel patch grid.
//! The tile is the transpose of the image-text encoder applied to the gap
//! between the class's foreground and background text embeddings, so toy image
//! features of the object lean toward its descriptions the way real image-text
//! encoders do. Without it the toy encoders are unrelated random maps and the
//! text carries no information about where the object is.

use serde::{Deserialize, Serialize};

use crate::attributes::{
    attribute_prefix, background_prompt, template_prompt, AttributeFixture, ClassCatalog,
    FixtureCache,
};
use crate::error::{LdagError, Result};
use crate::image::{Image, Mask};
use crate::providers::{ToyEncoders, EMBED_DIM, IMAGE_SIZE, PATCH, PATCH_LEN};
use crate::rng::{derive_seed, fnv1a64, SplitMix64};

use super::{survives_downsampling, DatasetSplit, Episode, Phase, TOY_GRID};

pub const SYNTHETIC_DATASET: &str = "synthetic";
pub const SYNTHETIC_MODEL: &str = "synthetic";
/// Attribute strings stored per class; any `n` up to this takes a prefix.
pub const DEFAULT_ATTRIBUTE_COUNT: usize = 10;

const BACKGROUND: [f64; 3] = [122.0, 126.0, 130.0];
const NOISE: f64 = 8.0;
const TEXTURE_AMPLITUDE: f64 = 0.3;
const MARGIN: f64 = 2.0;
const RETRIES: u64 = 32;
const IMAGE_STREAM: u64 = 0x1A6E;
const TEXT_STREAM: u64 = 0x7E87;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Ring,
}

/// Inner radius of a ring as a fraction of the outer one.
const RING_HOLE: f64 = 0.5;

impl ShapeKind {
    /// Whether pixel centre offset `(dx, dy)` lies inside a shape of extent `size`.
    fn contains(self, dx: f64, dy: f64, size: f64) -> bool {
        let half = size / 2.0;
        match self {
            ShapeKind::Square => dx.abs() <= half && dy.abs() <= half,
            ShapeKind::Circle => dx * dx + dy * dy <= half * half,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                r2 <= half * half && r2 > (RING_HOLE * half).powi(2)
            }
            ShapeKind::Triangle => {
                let depth = dy + half;
                (0.0..=size).contains(&depth) && dx.abs() <= half * depth / size
            }
        }
    }

    fn area(self, size: f64) -> f64 {
        let r = size / 2.0;
        match self {
            ShapeKind::Square => size * size,
            ShapeKind::Circle => std::f64::consts::PI * r * r,
            ShapeKind::Ring => std::f64::consts::PI * r * r * (1.0 - RING_HOLE * RING_HOLE),
            ShapeKind::Triangle => size * size / 2.0,
        }
    }

    fn perimeter(self, size: f64) -> f64 {
        let r = size / 2.0;
        match self {
            ShapeKind::Square => 4.0 * size,
            ShapeKind::Circle => 2.0 * std::f64::consts::PI * r,
            ShapeKind::Ring => 2.0 * std::f64::consts::PI * r * (1.0 + RING_HOLE),
            ShapeKind::Triangle => size * (1.0 + 5f64.sqrt()),
        }
    }

    fn words(self) -> (&'static str, &'static str, &'static str) {
        match self {
            ShapeKind::Square => ("square", "square", "four straight edges and four right-angle corners"),
            ShapeKind::Circle => ("round", "circle", "a smooth curved edge with no corners"),
            ShapeKind::Triangle => ("pointed", "triangle", "three straight edges meeting at sharp corners"),
            ShapeKind::Ring => ("hollow", "ring", "a round outer edge and a hole in the middle"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub name: String,
    pub shape: ShapeKind,
    pub color: String,
    pub fill: [u8; 3],
    /// Inclusive bounds on the shape's extent in pixels.
    pub size_range: [u32; 2],
    pub attributes: Vec<String>,
    /// `3 x 8 x 8` additive surface pattern in unit intensity, channel-major.
    pub texture: Vec<f32>,
}

fn describe(name: &str, shape: ShapeKind, color: &str) -> Vec<String> {
    let (adj, noun, edges) = shape.words();
    let bodies = [
        format!("is a {adj} {color} {noun}."),
        format!("has a {color} color all over its {noun} body."),
        format!("is shaped like a {adj} {noun}."),
        format!("is made of folded {color} paper."),
        format!("shows a clear {noun} outline against the gray background."),
        format!("has a {color} surface with a fine folded texture."),
        format!("is large and fills much of the picture as a {noun}."),
        format!("looks like a {color} {noun} seen from above."),
        format!("has {edges}."),
        format!("stands out as a bright {color} {adj} shape."),
    ];
    bodies
        .into_iter()
        .map(|b| format!("{}{b}", attribute_prefix(name)))
        .collect()
}

const CLASSES: [(&str, ShapeKind, &str, [u8; 3], [u32; 2]); 8] = [
    ("tile", ShapeKind::Square, "red", [200, 50, 45], [44, 56]),
    ("coin", ShapeKind::Circle, "gold", [215, 175, 50], [50, 60]),
    ("kite", ShapeKind::Triangle, "green", [50, 165, 70], [44, 56]),
    ("hoop", ShapeKind::Ring, "blue", [50, 85, 200], [50, 60]),
    ("crate", ShapeKind::Square, "orange", [225, 125, 40], [44, 56]),
    ("plate", ShapeKind::Circle, "cyan", [50, 185, 195], [50, 60]),
    ("wedge", ShapeKind::Triangle, "purple", [140, 60, 170], [44, 56]),
    ("halo", ShapeKind::Ring, "pink", [225, 125, 170], [50, 60]),
];

impl SyntheticClassSpec {
    /// Smallest and largest foreground pixel count a scene of this class can have.
    pub fn area_bounds(&self) -> (usize, usize) {
        let lo = f64::from(self.size_range[0]);
        let hi = f64::from(self.size_range[1]);
        let min = self.shape.area(lo) - self.shape.perimeter(lo);
        let max = self.shape.area(hi) + self.shape.perimeter(hi);
        (min.max(0.0).floor() as usize, max.ceil() as usize)
    }

    /// Texture value at image pixel `(x, y)`, channel `c`.
    fn texture_at(&self, c: usize, x: usize, y: usize) -> f64 {
        f64::from(self.texture[c * PATCH * PATCH + (y % PATCH) * PATCH + x % PATCH])
    }
}

/// `W^T d` rescaled so its largest magnitude is the texture amplitude.
fn grounded_texture(encoders: &ToyEncoders, foreground: &[String], background: &str) -> Result<Vec<f32>> {
    let mut d = vec![0.0f64; EMBED_DIM];
    for prompt in foreground {
        let e = encoders.encode_text(prompt)?;
        d.iter_mut()
            .zip(e.vector.data())
            .for_each(|(a, &v)| *a += f64::from(v) / foreground.len() as f64);
    }
    let b = encoders.encode_text(background)?;
    d.iter_mut().zip(b.vector.data()).for_each(|(a, &v)| *a -= f64::from(v));

    let w = encoders.clip.weights().data();
    let mut tile = vec![0.0f64; PATCH_LEN];
    for (m, dm) in d.iter().enumerate() {
        let row = &w[m * PATCH_LEN..(m + 1) * PATCH_LEN];
        tile.iter_mut().zip(row).for_each(|(t, &wv)| *t += dm * f64::from(wv));
    }
    let peak = tile.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak == 0.0 {
        return Err(LdagError::Degenerate("class text gap is zero".into()));
    }
    Ok(tile.iter().map(|t| (t * TEXTURE_AMPLITUDE / peak) as f32).collect())
}

/// Everything needed to regenerate the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dataset: String,
    pub seed: u64,
    pub image_seed: u64,
    pub text_seed: u64,
    pub classes: Vec<SyntheticClassSpec>,
}

impl DatasetManifest {
    pub fn catalog(&self) -> Result<ClassCatalog> {
        ClassCatalog::new(
            self.dataset.clone(),
            self.classes.iter().map(|c| c.name.clone()).collect(),
        )
    }
}

/// A seeded synthetic dataset with its frozen toy encoders.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub manifest: DatasetManifest,
    pub encoders: ToyEncoders,
    pub catalog: ClassCatalog,
    /// Attribute prompt source; `None` uses the descriptions stored in the manifest.
    pub fixtures: Option<FixtureCache>,
}

impl SyntheticWorld {
    /// The default eight-class catalog, grounded against encoders derived from `seed`.
    pub fn new(seed: u64) -> Result<Self> {
        let image_seed = derive_seed(seed, IMAGE_STREAM);
        let text_seed = derive_seed(seed, TEXT_STREAM);
        let encoders = ToyEncoders::new(image_seed, text_seed);
        let classes = CLASSES
            .iter()
            .map(|&(name, shape, color, fill, size_range)| {
                let attributes = describe(name, shape, color);
                let mut fg = attributes.clone();
                fg.push(template_prompt(name));
                let texture = grounded_texture(&encoders, &fg, &background_prompt(name))?;
                Ok(SyntheticClassSpec {
                    name: name.to_owned(),
                    shape,
                    color: color.to_owned(),
                    fill,
                    size_range,
                    attributes,
                    texture,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_manifest(DatasetManifest {
            dataset: SYNTHETIC_DATASET.to_owned(),
            seed,
            image_seed,
            text_seed,
            classes,
        })
    }

    pub fn from_manifest(manifest: DatasetManifest) -> Result<Self> {
        for spec in &manifest.classes {
            if spec.texture.len() != PATCH_LEN {
                return Err(LdagError::Dimension(format!(
                    "class {} texture has {} values, expected {PATCH_LEN}",
                    spec.name,
                    spec.texture.len()
                )));
            }
            if spec.size_range[0] == 0 || spec.size_range[0] > spec.size_range[1] {
                return Err(LdagError::Contract(format!("class {} has an empty size range", spec.name)));
            }
        }
        Ok(Self {
            encoders: ToyEncoders::new(manifest.image_seed, manifest.text_seed),
            catalog: manifest.catalog()?,
            manifest,
            fixtures: None,
        })
    }

    pub fn with_fixtures(mut self, cache: FixtureCache) -> Self {
        self.fixtures = Some(cache);
        self
    }

    pub fn spec(&self, class_id: usize) -> &SyntheticClassSpec {
        &self.manifest.classes[class_id]
    }

    /// One k-shot episode; support scenes whose mask would vanish at the feature
    /// grid are redrawn a bounded number of times.
    pub fn sample_episode(
        &self,
        split: &DatasetSplit,
        class_id: usize,
        shots: usize,
        seed: u64,
        episode_id: impl Into<String>,
    ) -> Result<Episode> {
        if class_id >= self.manifest.classes.len() {
            return Err(LdagError::Contract(format!("class index {class_id} not in the catalog")));
        }
        if shots == 0 {
            return Err(LdagError::Contract("an episode needs at least one support".into()));
        }
        let spec = self.spec(class_id);
        let draw = |slot: u64| -> Result<(Image, Mask)> {
            for attempt in 0..RETRIES {
                let scene = gen_scene(spec, derive_seed(seed, slot * RETRIES + attempt));
                if survives_downsampling(&scene.1, TOY_GRID) {
                    return Ok(scene);
                }
            }
            Err(LdagError::DegenerateEpisode(format!(
                "no usable scene of class {} after {RETRIES} draws",
                spec.name
            )))
        };
        let supports = (0..shots as u64).map(|j| draw(j + 1)).collect::<Result<Vec<_>>>()?;
        Ok(Episode {
            episode_id: episode_id.into(),
            class_id,
            class_name: spec.name.clone(),
            fold: split.fold_id,
            supports,
            query: draw(0)?,
        })
    }

    /// `count` episodes cycling through the phase's classes in catalog order.
    pub fn episodes(&self, split: &DatasetSplit, phase: Phase, count: usize, shots: usize, seed: u64) -> Result<Vec<Episode>> {
        let classes = split.classes(phase);
        if classes.is_empty() {
            return Err(LdagError::Contract(format!("{} split has no classes", phase.as_str())));
        }
        let stream = derive_seed(seed, fnv1a64(phase.as_str().as_bytes()) ^ split.fold_id as u64);
        let jobs: Vec<usize> = (0..count).collect();
        crate::exec::try_map_ordered(&jobs, |&j| {
            self.sample_episode(
                split,
                classes[j % classes.len()],
                shots,
                derive_seed(stream, j as u64),
                format!("{}-f{}-{j:04}", phase.as_str(), split.fold_id),
            )
        })
    }
}

/// Attribute fixture holding the first `n` stored descriptions of a class.
pub fn synthetic_fixture(spec: &SyntheticClassSpec, n: usize) -> Result<AttributeFixture> {
    if n > spec.attributes.len() {
        return Err(LdagError::Contract(format!(
            "class {} stores {} descriptions, {n} requested",
            spec.name,
            spec.attributes.len()
        )));
    }
    Ok(AttributeFixture {
        dataset: SYNTHETIC_DATASET.to_owned(),
        class: spec.name.clone(),
        n,
        model: SYNTHETIC_MODEL.to_owned(),
        prompts: spec.attributes[..n].to_vec(),
    })
}

/// One 64x64 scene: textured shape of the class over gray noise, and its exact mask.
pub fn gen_scene(spec: &SyntheticClassSpec, seed: u64) -> (Image, Mask) {
    let mut rng = SplitMix64::new(derive_seed(seed, fnv1a64(spec.name.as_bytes())));
    let lo = f64::from(spec.size_range[0]);
    let hi = f64::from(spec.size_range[1]);
    let size = lo + rng.next_f64() * (hi - lo);
    let span = IMAGE_SIZE as f64 - size - 2.0 * MARGIN;
    let cx = MARGIN + size / 2.0 + rng.next_f64() * span;
    let cy = MARGIN + size / 2.0 + rng.next_f64() * span;

    let mut image = Image::filled(IMAGE_SIZE, IMAGE_SIZE, [0, 0, 0]);
    let mut mask = Mask::empty(IMAGE_SIZE, IMAGE_SIZE);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let inside = spec.shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size);
            let mut rgb = [0u8; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                let noise = (rng.next_f64() * 2.0 - 1.0) * NOISE;
                let v = if inside {
                    f64::from(spec.fill[c]) + 255.0 * spec.texture_at(c, x, y) + noise * 0.25
                } else {
                    BACKGROUND[c] + noise
                };
                *out = v.round().clamp(0.0, 255.0) as u8;
            }
            image.set_pixel(x, y, rgb);
            mask.set(x, y, inside);
        }
    }
    (image, mask)
}
