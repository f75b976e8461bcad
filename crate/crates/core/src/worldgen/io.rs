//! On-disk sample layout (KITTI conventions for disparity).

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::{SceneSpec, StereoSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DISP_SCALE: f32 = 256.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub dir: PathBuf,
    pub left: PathBuf,
    pub right: PathBuf,
    pub labels: PathBuf,
    pub disp_left: PathBuf,
    pub disp_right: PathBuf,
    pub meta: PathBuf,
}

impl SamplePaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            left: dir.join("left.png"),
            right: dir.join("right.png"),
            labels: dir.join("labels.png"),
            disp_left: dir.join("disp_left.png"),
            disp_right: dir.join("disp_right.png"),
            meta: dir.join("meta.json"),
        }
    }
}

/// Directory name of the `index`-th sample in a dataset.
pub fn sample_dir_name(index: usize) -> String {
    format!("{index:06}")
}

fn rgb_image(t: &Tensor<f32>) -> RgbImage {
    let (_, h, w) = t.chw();
    let d = t.data();
    let n = h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let q = |c: usize| (d[c * n + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

fn disparity_image(disp: &[f32], valid: &[bool], w: usize, h: usize) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        let raw = if valid[p] { (disp[p] * DISP_SCALE).round().clamp(1.0, u16::MAX as f32) as u16 } else { 0 };
        Luma([raw])
    })
}

fn save(img: DynamicImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes the sample into `dir`, creating it if needed.
///
/// Disparity pixels outside the validity mask are written as 0; everything
/// else is stored as `round(d * 256)` clamped to at least 1.
pub fn write_sample(sample: &StereoSample, dir: &Path) -> Result<SamplePaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = SamplePaths::in_dir(dir);
    let (w, h) = (sample.width, sample.height);
    save(DynamicImage::ImageRgb8(rgb_image(&sample.left)), &p.left)?;
    save(DynamicImage::ImageRgb8(rgb_image(&sample.right)), &p.right)?;
    let labels = GrayImage::from_raw(w as u32, h as u32, sample.labels_left.clone())
        .ok_or_else(|| Error::Shape("label buffer size".into()))?;
    save(DynamicImage::ImageLuma8(labels), &p.labels)?;
    // A KITTI disparity file only encodes validity, so the left map keeps
    // every in-bounds-correspondence pixel and the right map its own mask.
    save(DynamicImage::ImageLuma16(disparity_image(&sample.disp_left, &sample.valid_left, w, h)), &p.disp_left)?;
    save(DynamicImage::ImageLuma16(disparity_image(&sample.disp_right, &sample.valid_right, w, h)), &p.disp_right)?;
    let meta = serde_json::json!({
        "width": w,
        "height": h,
        "num_classes": sample.num_classes,
        "spec": sample.meta,
    });
    fs::write(&p.meta, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&p.meta, e))?;
    Ok(p)
}

/// Writes `samples` to `root/000000`, `root/000001`, ...
pub fn write_dataset(samples: &[StereoSample], root: &Path) -> Result<Vec<SamplePaths>> {
    samples.iter().enumerate().map(|(i, s)| write_sample(s, &root.join(sample_dir_name(i)))).collect()
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn load_rgb(path: &Path) -> Result<(usize, usize, Tensor<f32>)> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut data = vec![0.0f32; 3 * n];
    for (x, y, px) in img.enumerate_pixels() {
        let p = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * n + p] = px[c] as f32 / 255.0;
        }
    }
    Ok((w, h, Tensor::new(&[3, h, w], data)?))
}

fn load_labels(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    match open(path)? {
        DynamicImage::ImageLuma8(img) => Ok((img.width() as usize, img.height() as usize, img.into_raw())),
        other => Err(Error::Invalid(format!(
            "{}: labels must be 8-bit single channel, got {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn load_disparity(path: &Path) -> Result<(usize, usize, Vec<f32>, Vec<bool>)> {
    let img = match open(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::Invalid(format!(
                "{}: disparity must be 16-bit single channel, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let valid = raw.iter().map(|&r| r != 0).collect();
    let disp = raw.iter().map(|&r| r as f32 / DISP_SCALE).collect();
    Ok((w, h, disp, valid))
}

fn check_size(what: &str, expected: (usize, usize), got: (usize, usize)) -> Result<()> {
    if expected != got {
        return Err(Error::Shape(format!(
            "{what} is {}x{}, left image is {}x{}",
            got.0, got.1, expected.0, expected.1
        )));
    }
    Ok(())
}

/// Loads a KITTI-style sample. Without a right disparity file, `valid_right`
/// is all false. Occlusion is unknown for real data and left empty.
pub fn load_kitti_sample(
    left: &Path,
    right: &Path,
    labels: &Path,
    disp_left: &Path,
    disp_right: Option<&Path>,
) -> Result<StereoSample> {
    let (w, h, left_t) = load_rgb(left)?;
    let (rw, rh, right_t) = load_rgb(right)?;
    check_size("right image", (w, h), (rw, rh))?;
    let (lw, lh, labels_left) = load_labels(labels)?;
    check_size("label map", (w, h), (lw, lh))?;
    let (dw, dh, dl, vl) = load_disparity(disp_left)?;
    check_size("left disparity", (w, h), (dw, dh))?;
    let (dr, vr) = match disp_right {
        Some(p) => {
            let (dw, dh, d, v) = load_disparity(p)?;
            check_size("right disparity", (w, h), (dw, dh))?;
            (d, v)
        }
        None => (vec![0.0; w * h], vec![false; w * h]),
    };
    let num_classes = labels_left.iter().copied().max().map_or(0, |m| m as usize + 1);
    Ok(StereoSample {
        width: w,
        height: h,
        num_classes,
        left: left_t,
        right: right_t,
        labels_left,
        disp_left: dl,
        disp_right: dr,
        valid_left: vl,
        valid_right: vr,
        occlusion_left: vec![false; w * h],
        meta: None,
    })
}

/// Loads a directory written by [`write_sample`] (or laid out the same way).
/// The class count comes from `meta.json` when present.
pub fn load_sample_dir(dir: &Path) -> Result<StereoSample> {
    let p = SamplePaths::in_dir(dir);
    let right_disp = p.disp_right.exists().then_some(p.disp_right.as_path());
    let mut s = load_kitti_sample(&p.left, &p.right, &p.labels, &p.disp_left, right_disp)?;
    if p.meta.exists() {
        let text = fs::read_to_string(&p.meta).map_err(|e| Error::io(&p.meta, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        if let Some(c) = v.get("num_classes").and_then(|c| c.as_u64()) {
            s.num_classes = c as usize;
        }
        if let Some(spec) = v.get("spec").filter(|x| !x.is_null()) {
            s.meta = Some(serde_json::from_value::<SceneSpec>(spec.clone())?);
        }
    }
    if let Some(&bad) = s.labels_left.iter().find(|&&l| l as usize >= s.num_classes) {
        return Err(Error::LabelOutOfRange { label: bad as usize, classes: s.num_classes });
    }
    Ok(s)
}
