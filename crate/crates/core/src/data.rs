//! Synthetic paired image/caption data: one colored shape per image, captions
//! naming its color and shape.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::tensor::Tensor;

pub const PAD: usize = 0;

const PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.15, 0.15],
    [0.15, 0.85, 0.2],
    [0.2, 0.3, 0.95],
    [0.95, 0.85, 0.1],
    [0.85, 0.2, 0.85],
    [0.1, 0.85, 0.85],
    [0.95, 0.55, 0.1],
    [0.9, 0.9, 0.9],
];

const SHAPES: [&str; 8] = ["square", "disk", "triangle", "cross", "ring", "diamond", "hbar", "vbar"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_shapes: usize,
    pub num_colors: usize,
    pub image_size: usize,
    /// Caption length including padding: `[color, shape, PAD, ...]`.
    pub caption_len: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub seed: u64,
    /// Std of additive background noise; 0 gives a blank field.
    pub noise: f32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_shapes: 4,
            num_colors: 4,
            image_size: 32,
            caption_len: 8,
            train_size: 2048,
            val_size: 16,
            seed: 0,
            noise: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn num_classes(&self) -> usize {
        self.num_shapes * self.num_colors
    }

    /// Smallest vocabulary holding every caption token.
    pub fn vocab_needed(&self) -> usize {
        1 + self.num_colors + self.num_shapes
    }

    pub fn color_token(&self, class: usize) -> usize {
        1 + class % self.num_colors
    }

    pub fn shape_token(&self, class: usize) -> usize {
        1 + self.num_colors + class / self.num_colors
    }

    /// Human-readable caption of a class.
    pub fn describe(&self, class: usize) -> String {
        let c = class % self.num_colors;
        let s = class / self.num_colors;
        format!("color{c} {}", SHAPES[s])
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=PALETTE.len()).contains(&self.num_colors) {
            return Err(Error::Config(format!("data.num_colors must be in 1..={}", PALETTE.len())));
        }
        if !(1..=SHAPES.len()).contains(&self.num_shapes) {
            return Err(Error::Config(format!("data.num_shapes must be in 1..={}", SHAPES.len())));
        }
        if self.image_size < 8 {
            return Err(Error::Config("data.image_size must be at least 8".into()));
        }
        if self.caption_len < 2 {
            return Err(Error::Config("data.caption_len must be at least 2".into()));
        }
        if self.train_size == 0 || self.val_size == 0 {
            return Err(Error::Config("data.train_size and data.val_size must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("data.noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// One rendered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// `[3 × H × W]` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub tokens: Vec<usize>,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub examples: Vec<Example>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct Layout {
    class: usize,
    cx: usize,
    cy: usize,
    radius: usize,
}

fn inside(shape: usize, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        0 => ax <= r && ay <= r,
        1 => dx * dx + dy * dy <= r * r,
        2 => dy <= r && dy >= -r && ax <= (dy + r) * 0.5,
        3 => (ax <= r * 0.35 && ay <= r) || (ay <= r * 0.35 && ax <= r),
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        5 => ax + ay <= r,
        6 => ax <= r && ay <= r * 0.4,
        _ => ay <= r && ax <= r * 0.4,
    }
}

fn render(spec: &SynthSpec, l: Layout, rng: &mut ChaCha8Rng) -> Example {
    let n = spec.image_size;
    let color = PALETTE[l.class % spec.num_colors];
    let shape = l.class / spec.num_colors;
    let mut image = vec![0.0f32; 3 * n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = x as f32 + 0.5 - l.cx as f32;
            let dy = y as f32 + 0.5 - l.cy as f32;
            if inside(shape, dx, dy, l.radius as f32) {
                for c in 0..3 {
                    image[(c * n + y) * n + x] = color[c];
                }
            }
        }
    }
    if spec.noise > 0.0 {
        for v in &mut image {
            let u: f32 = rng.random::<f32>() - 0.5;
            *v = (*v + u * spec.noise * 2.0).clamp(0.0, 1.0);
        }
    }
    let mut tokens = vec![PAD; spec.caption_len];
    tokens[0] = spec.color_token(l.class);
    tokens[1] = spec.shape_token(l.class);
    Example { image, tokens, class: l.class }
}

fn draw_layout(spec: &SynthSpec, class: usize, rng: &mut ChaCha8Rng) -> Layout {
    let n = spec.image_size;
    let rmin = (n / 8).max(2);
    let rmax = (n / 4).max(rmin);
    let radius = rng.random_range(rmin..=rmax);
    let cx = rng.random_range(radius..=n - radius);
    let cy = rng.random_range(radius..=n - radius);
    Layout { class, cx, cy, radius }
}

/// Builds `(train, val)`. The val set cycles through classes in order, so a
/// val set of at least `num_classes` covers every class. No train layout
/// repeats a val layout.
pub fn make_synth_dataset(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let classes = spec.num_classes();
    let mut val_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    val_rng.set_stream(1);
    let mut seen = HashSet::new();
    let mut val = Vec::with_capacity(spec.val_size);
    for i in 0..spec.val_size {
        let l = draw_layout(spec, i % classes, &mut val_rng);
        seen.insert(l);
        val.push(render(spec, l, &mut val_rng));
    }
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(0);
    let mut train = Vec::with_capacity(spec.train_size);
    while train.len() < spec.train_size {
        let class = train_rng.random_range(0..classes);
        let l = draw_layout(spec, class, &mut train_rng);
        if seen.contains(&l) {
            continue;
        }
        train.push(render(spec, l, &mut train_rng));
    }
    Ok((Dataset { spec: spec.clone(), examples: train }, Dataset { spec: spec.clone(), examples: val }))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stacks the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let n = self.spec.image_size;
        let l = self.spec.caption_len;
        let mut pixels = Vec::with_capacity(indices.len() * 3 * n * n);
        let mut ids = Vec::with_capacity(indices.len() * l);
        for &i in indices {
            let ex = self.examples.get(i).ok_or_else(|| Error::Index(format!("example {i} of {}", self.len())))?;
            pixels.extend_from_slice(&ex.image);
            ids.extend_from_slice(&ex.tokens);
        }
        let mask = ids.iter().map(|&t| t == PAD).collect();
        Batch::new(Tensor::new(vec![indices.len(), 3, n, n], pixels)?, ids, mask, l)
    }

    /// Image `i` as a `[3 × H × W]` tensor.
    pub fn image(&self, i: usize) -> Result<Tensor> {
        let n = self.spec.image_size;
        let ex = self.examples.get(i).ok_or_else(|| Error::Index(format!("example {i} of {}", self.len())))?;
        Tensor::new(vec![3, n, n], ex.image.clone())
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.class).collect()
    }

    /// One caption per class, in class order, as `(ids, pad mask)`.
    pub fn class_captions(&self) -> (Vec<usize>, Vec<bool>) {
        let s = &self.spec;
        let mut ids = Vec::with_capacity(s.num_classes() * s.caption_len);
        for c in 0..s.num_classes() {
            let mut row = vec![PAD; s.caption_len];
            row[0] = s.color_token(c);
            row[1] = s.shape_token(c);
            ids.extend(row);
        }
        let mask = ids.iter().map(|&t| t == PAD).collect();
        (ids, mask)
    }
}
