use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::selection::GroundTruthSet;

const PALETTE: [[f64; 3]; 8] = [
    [1.0, 0.1, 0.1],
    [0.1, 1.0, 0.1],
    [0.1, 0.1, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.1, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.5, 0.1],
    [0.5, 0.1, 1.0],
];

/// Shape of the synthetic images and how objects are drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side of the square patches fed to the backbone, in pixels.
    pub patch: usize,
    /// Rectangle sides are drawn from `min_size..=max_size` pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f64,
    /// Largest IoU allowed between two objects of one scene.
    pub max_overlap: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 32,
            width: 32,
            classes: 5,
            min_objects: 1,
            max_objects: 4,
            patch: 4,
            min_size: 5,
            max_size: 14,
            noise: 0.2,
            max_overlap: 0.3,
        }
    }
}

pub const CHANNELS: usize = 3;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("scene: {m}")));
        if self.classes == 0 || self.classes > PALETTE.len() {
            return fail(format!("classes must be in 1..={}, got {}", PALETTE.len(), self.classes));
        }
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return fail(format!(
                "patch {} must divide the {}x{} image",
                self.patch, self.height, self.width
            ));
        }
        if self.max_objects == 0 || self.min_objects > self.max_objects {
            return fail(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size || self.max_size > self.height.min(self.width) {
            return fail(format!("size range {}..={} does not fit", self.min_size, self.max_size));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return fail(format!("max_overlap must be in [0, 1], got {}", self.max_overlap));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn num_positions(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    /// `[3 x H x W]`, channel-major.
    pub image: Vec<f64>,
    pub gts: GroundTruthSet,
}

/// Draws scene `index` of the stream identified by `seed`.
pub fn gen_scene(seed: u64, index: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let (h, w) = (spec.height, spec.width);
    let mut base = vec![0.0; CHANNELS * h * w];

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut classes = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 100 {
        attempts += 1;
        let bw = rng.random_range(spec.min_size..=spec.max_size);
        let bh = rng.random_range(spec.min_size..=spec.max_size);
        let x = rng.random_range(0..=w - bw);
        let y = rng.random_range(0..=h - bh);
        let class = rng.random_range(0..spec.classes);
        let b = BBox {
            x1: x as f64 / w as f64,
            y1: y as f64 / h as f64,
            x2: (x + bw) as f64 / w as f64,
            y2: (y + bh) as f64 / h as f64,
        };
        if boxes.iter().any(|o| iou(o, &b) > spec.max_overlap) {
            continue;
        }
        let color = PALETTE[class];
        for (c, &value) in color.iter().enumerate() {
            for yy in y..y + bh {
                for xx in x..x + bw {
                    base[(c * h + yy) * w + xx] = value;
                }
            }
        }
        boxes.push(b);
        classes.push(class);
    }
    let image = base
        .iter()
        .map(|v| v * (1.0 - spec.noise) + rng.random_range(0.0..=1.0) * spec.noise)
        .collect();
    if boxes.len() < spec.min_objects {
        return Err(Error::Config(format!(
            "scene {index}: could place only {} of at least {} objects",
            boxes.len(),
            spec.min_objects
        )));
    }
    Ok(SyntheticScene {
        image,
        gts: GroundTruthSet::new(classes, boxes)?,
    })
}

/// Flattens the image into `[P x 3*patch*patch]` patch vectors, row-major over the grid.
pub fn patches(image: &[f64], spec: &SceneSpec) -> Result<Tensor> {
    let (h, w, p) = (spec.height, spec.width, spec.patch);
    if image.len() != CHANNELS * h * w {
        return Err(Error::Invalid(format!(
            "image has {} values, expected {}",
            image.len(),
            CHANNELS * h * w
        )));
    }
    let (rows, cols) = spec.grid();
    let mut data = Vec::with_capacity(rows * cols * spec.patch_dim());
    for r in 0..rows {
        for c in 0..cols {
            for ch in 0..CHANNELS {
                for dy in 0..p {
                    for dx in 0..p {
                        data.push(image[(ch * h + r * p + dy) * w + c * p + dx]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows * cols, spec.patch_dim()], data)
}

/// A contiguous run of scenes from one stream, with their patch tensors.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SceneSpec,
    pub seed: u64,
    pub start: u64,
    pub scenes: Vec<SyntheticScene>,
    pub patches: Vec<Tensor>,
}

impl Dataset {
    pub fn generate(spec: &SceneSpec, seed: u64, start: u64, count: usize) -> Result<Self> {
        let mut scenes = Vec::with_capacity(count);
        let mut all_patches = Vec::with_capacity(count);
        for i in 0..count as u64 {
            let s = gen_scene(seed, start + i, spec)?;
            all_patches.push(patches(&s.image, spec)?);
            scenes.push(s);
        }
        Ok(Dataset {
            spec: spec.clone(),
            seed,
            start,
            scenes,
            patches: all_patches,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(gen_scene(3, 17, &spec).unwrap(), gen_scene(3, 17, &spec).unwrap());
        assert_ne!(gen_scene(3, 17, &spec).unwrap(), gen_scene(3, 18, &spec).unwrap());
    }

    #[test]
    fn single_object_spec() {
        let spec = SceneSpec {
            min_objects: 1,
            max_objects: 1,
            ..SceneSpec::default()
        };
        for i in 0..20 {
            assert_eq!(gen_scene(0, i, &spec).unwrap().gts.len(), 1);
        }
    }

    #[test]
    fn boxes_are_valid_and_inside() {
        let spec = SceneSpec::default();
        for i in 0..50 {
            let s = gen_scene(1, i, &spec).unwrap();
            assert!(!s.gts.is_empty() && s.gts.len() <= spec.max_objects);
            for b in &s.gts.boxes {
                b.validate().unwrap();
                assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 1.0 && b.y2 <= 1.0);
                assert!(b.area() > 0.0);
            }
        }
    }

    #[test]
    fn patch_layout() {
        let spec = SceneSpec {
            height: 4,
            width: 4,
            patch: 2,
            min_size: 1,
            max_size: 2,
            ..SceneSpec::default()
        };
        let image: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let p = patches(&image, &spec).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // Second patch of the first row: columns 2..4 of rows 0..2, red channel first.
        assert_eq!(&p.row(1)[..4], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(1)[4], 18.0);
    }

    #[test]
    fn invalid_specs() {
        let bad = SceneSpec {
            patch: 5,
            ..SceneSpec::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SceneSpec {
            classes: 0,
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }
}
