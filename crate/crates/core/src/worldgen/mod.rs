//! Synthetic stereo scenes with exact semantic and disparity ground truth.
//!
//! A scene is a fronto-parallel background plane plus textured rectangles and
//! ellipses, each at one integer disparity. Objects are painted back to front
//! (ascending disparity) into the left view; the right view shows every
//! surface shifted left by its disparity. Because every surface is a
//! constant-disparity plane, occlusion and left-right consistency can be read
//! off the two depth orders directly.

mod io;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_kitti_sample, load_sample_dir, sample_dir_name, write_dataset, write_sample, SamplePaths};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub num_objects: usize,
    pub num_classes: usize,
    /// Inclusive integer disparity range `[d_min, d_max]`; the background sits at `d_min`.
    pub disparity_range: (u32, u32),
    pub background_class: u8,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            num_objects: 3,
            num_classes: 4,
            disparity_range: (2, 16),
            background_class: 0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let (d_min, d_max) = self.disparity_range;
        let fail = |m: String| Err(Error::Invalid(format!("scene spec: {m}")));
        if self.width == 0 || self.height == 0 {
            return fail("empty image".into());
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return fail(format!("class count {} not in [2, 256]", self.num_classes));
        }
        if d_min > d_max {
            return fail(format!("d_min {d_min} > d_max {d_max}"));
        }
        if d_max as usize >= self.width {
            return fail(format!("d_max {d_max} must be below the width {}", self.width));
        }
        if self.background_class as usize >= self.num_classes {
            return fail(format!("background class {} out of range", self.background_class));
        }
        if self.num_objects > (d_max - d_min) as usize {
            return fail(format!(
                "{} objects need {} distinct disparities above the background, range allows {}",
                self.num_objects,
                self.num_objects,
                d_max - d_min
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Half-open box `[x0, x1) × [y0, y1)` in left-view pixels.
    Rect { x0: i32, y0: i32, x1: i32, y1: i32 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    pub fn contains(&self, x: i32, y: i32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub class: u8,
    pub disparity: u32,
    pub texture_seed: u64,
}

/// Explicit scene description; [`generate_scene`] samples one from a [`SceneSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneLayout {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub background_class: u8,
    pub background_disparity: u32,
    pub background_texture_seed: u64,
    pub objects: Vec<SceneObject>,
}

/// One rectified stereo pair with dense left/right annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub left: Tensor<f32>,
    pub right: Tensor<f32>,
    pub labels_left: Vec<u8>,
    pub disp_left: Vec<f32>,
    pub disp_right: Vec<f32>,
    pub valid_left: Vec<bool>,
    pub valid_right: Vec<bool>,
    pub occlusion_left: Vec<bool>,
    pub meta: Option<SceneSpec>,
}

impl StereoSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn disp_left_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width], self.disp_left.clone()).expect("shape")
    }

    pub fn disp_right_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[1, self.height, self.width], self.disp_right.clone()).expect("shape")
    }

    pub fn has_right_disparity(&self) -> bool {
        self.valid_right.iter().any(|&v| v)
    }

    /// Same window from every map; validity is recomputed so that a left pixel
    /// whose correspondence leaves the cropped frame becomes invalid.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<StereoSample> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Invalid(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let pick = |v: &[f32], c: usize| -> Vec<f32> {
            let mut out = Vec::with_capacity(c * w * h);
            for ch in 0..c {
                for y in y0..y0 + h {
                    let row = (ch * self.height + y) * self.width;
                    out.extend_from_slice(&v[row + x0..row + x0 + w]);
                }
            }
            out
        };
        fn pick_t<X: Copy>(v: &[X], width: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<X> {
            (y0..y0 + h).flat_map(|y| v[y * width + x0..y * width + x0 + w].iter().copied()).collect()
        }
        let disp_left = pick(&self.disp_left, 1);
        let disp_right = pick(&self.disp_right, 1);
        let mut valid_left = pick_t(&self.valid_left, self.width, x0, y0, w, h);
        let mut valid_right = pick_t(&self.valid_right, self.width, x0, y0, w, h);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if valid_left[i] && (x as f32) < disp_left[i] {
                    valid_left[i] = false;
                }
                if valid_right[i] && x as f32 + disp_right[i] > (w - 1) as f32 {
                    valid_right[i] = false;
                }
            }
        }
        Ok(StereoSample {
            width: w,
            height: h,
            num_classes: self.num_classes,
            left: Tensor::new(&[3, h, w], pick(self.left.data(), 3))?,
            right: Tensor::new(&[3, h, w], pick(self.right.data(), 3))?,
            labels_left: pick_t(&self.labels_left, self.width, x0, y0, w, h),
            disp_left,
            disp_right,
            valid_left,
            valid_right,
            occlusion_left: pick_t(&self.occlusion_left, self.width, x0, y0, w, h),
            meta: self.meta.clone(),
        })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-pixel noise in `[0, 1)` attached to surface coordinates, so the same
/// surface point has the same texture in both views.
fn noise(seed: u64, x: i32, y: i32, channel: usize) -> f32 {
    let h = splitmix(seed ^ splitmix(((x as u32 as u64) << 32) | y as u32 as u64) ^ (channel as u64) << 60);
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Fixed per-class base colour (shared across scenes so classes are learnable).
pub fn class_color(class: u8, num_classes: usize) -> [f32; 3] {
    let hue = class as f32 / num_classes as f32;
    let sector = hue * 6.0;
    let f = sector.fract();
    let (r, g, b) = match sector as u32 % 6 {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    // Keep saturation moderate so the noise term stays visible on every channel.
    [0.25 + 0.5 * r, 0.25 + 0.5 * g, 0.25 + 0.5 * b]
}

fn texel(class: u8, num_classes: usize, seed: u64, x: i32, y: i32) -> [f32; 3] {
    let base = class_color(class, num_classes);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let v = base[c] * (0.55 + 0.45 * noise(seed, x, y, c)) + 0.15 * noise(seed, x, y, 3);
        // Quantised to 8 bits so PNG round trips are exact.
        *o = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    out
}

/// Sample a layout from `spec`.
pub fn sample_layout(spec: &SceneSpec) -> Result<SceneLayout> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d_min, d_max) = spec.disparity_range;
    let mut pool: Vec<u32> = (d_min + 1..=d_max).collect();
    let (w, h) = (spec.width as i32, spec.height as i32);
    let mut objects = Vec::with_capacity(spec.num_objects);
    for _ in 0..spec.num_objects {
        let disparity = pool.swap_remove(rng.random_range(0..pool.len()));
        let foreground: Vec<u8> =
            (0..spec.num_classes as u8).filter(|&c| c != spec.background_class).collect();
        let class = foreground[rng.random_range(0..foreground.len())];
        let ow = rng.random_range((w / 6).max(2)..=(w / 2).max(3));
        let oh = rng.random_range((h / 6).max(2)..=(h / 2).max(3));
        let x0 = rng.random_range(-(ow / 4)..=(w - ow + ow / 4).max(0));
        let y0 = rng.random_range(-(oh / 4)..=(h - oh + oh / 4).max(0));
        let shape = if rng.random_bool(0.5) {
            Shape::Rect { x0, y0, x1: x0 + ow, y1: y0 + oh }
        } else {
            Shape::Ellipse {
                cx: x0 as f64 + ow as f64 / 2.0,
                cy: y0 as f64 + oh as f64 / 2.0,
                rx: ow as f64 / 2.0,
                ry: oh as f64 / 2.0,
            }
        };
        objects.push(SceneObject { shape, class, disparity, texture_seed: rng.random() });
    }
    Ok(SceneLayout {
        width: spec.width,
        height: spec.height,
        num_classes: spec.num_classes,
        background_class: spec.background_class,
        background_disparity: d_min,
        background_texture_seed: rng.random(),
        objects,
    })
}

/// Deterministic in `spec.seed`.
pub fn generate_scene(spec: &SceneSpec) -> Result<StereoSample> {
    let layout = sample_layout(spec)?;
    let mut sample = render(&layout)?;
    sample.meta = Some(spec.clone());
    Ok(sample)
}

/// `count` scenes whose seeds derive from `base.seed`.
pub fn generate_dataset(base: &SceneSpec, count: usize) -> Result<Vec<StereoSample>> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec { seed: splitmix(base.seed.wrapping_mul(1_000_003).wrapping_add(i as u64)), ..base.clone() };
            generate_scene(&spec)
        })
        .collect()
}

/// Topmost surface at a pixel: index into `objects` or `None` for background.
fn topmost(objects: &[&SceneObject], x: i32, y: i32, right_view: bool) -> Option<usize> {
    // `objects` is sorted by ascending disparity; the last hit is nearest.
    objects.iter().rposition(|o| {
        let sx = if right_view { x + o.disparity as i32 } else { x };
        o.shape.contains(sx, y)
    })
}

pub fn render(layout: &SceneLayout) -> Result<StereoSample> {
    let (w, h) = (layout.width, layout.height);
    if layout.num_classes < 2 || layout.background_class as usize >= layout.num_classes {
        return Err(Error::Invalid("layout classes".into()));
    }
    let mut order: Vec<&SceneObject> = layout.objects.iter().collect();
    order.sort_by_key(|o| o.disparity);
    for pair in order.windows(2) {
        if pair[0].disparity == pair[1].disparity {
            return Err(Error::Invalid("objects must have distinct disparities".into()));
        }
    }
    if order.iter().any(|o| o.disparity <= layout.background_disparity || o.class as usize >= layout.num_classes) {
        return Err(Error::Invalid("objects must lie in front of the background with valid classes".into()));
    }
    let n = w * h;
    let mut left = vec![0.0f32; 3 * n];
    let mut right = vec![0.0f32; 3 * n];
    let mut labels = vec![layout.background_class; n];
    let mut disp_left = vec![layout.background_disparity as f32; n];
    let mut disp_right = vec![layout.background_disparity as f32; n];
    let bg = layout.background_disparity as i32;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (xi, yi) = (x as i32, y as i32);
            let (rgb_l, class, d) = match topmost(&order, xi, yi, false) {
                Some(k) => {
                    let o = order[k];
                    (texel(o.class, layout.num_classes, o.texture_seed, xi, yi), o.class, o.disparity)
                }
                None => (
                    texel(layout.background_class, layout.num_classes, layout.background_texture_seed, xi, yi),
                    layout.background_class,
                    layout.background_disparity,
                ),
            };
            labels[p] = class;
            disp_left[p] = d as f32;
            let (rgb_r, dr) = match topmost(&order, xi, yi, true) {
                Some(k) => {
                    let o = order[k];
                    let sx = xi + o.disparity as i32;
                    (texel(o.class, layout.num_classes, o.texture_seed, sx, yi), o.disparity)
                }
                None => (
                    texel(layout.background_class, layout.num_classes, layout.background_texture_seed, xi + bg, yi),
                    layout.background_disparity,
                ),
            };
            disp_right[p] = dr as f32;
            for c in 0..3 {
                left[c * n + p] = rgb_l[c];
                right[c * n + p] = rgb_r[c];
            }
        }
    }
    let mut valid_left = vec![false; n];
    let mut valid_right = vec![false; n];
    let mut occlusion_left = vec![false; n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let d = disp_left[p] as usize;
            if x >= d {
                valid_left[p] = true;
                occlusion_left[p] = disp_right[y * w + x - d] != disp_left[p];
            }
            valid_right[p] = x + (disp_right[p] as usize) < w;
        }
    }
    Ok(StereoSample {
        width: w,
        height: h,
        num_classes: layout.num_classes,
        left: Tensor::new(&[3, h, w], left)?,
        right: Tensor::new(&[3, h, w], right)?,
        labels_left: labels,
        disp_left,
        disp_right,
        valid_left,
        valid_right,
        occlusion_left,
        meta: None,
    })
}
