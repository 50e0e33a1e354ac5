//! Landmark-driven face operations: alignment, color transfer, hull-based
//! face swapping, eye/mouth cropping and eye/mouth masking.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Landmarks68, Point, Rect, EYES, MOUTH};
use crate::error::{Error, Result};
use crate::geometry::{landmark_hull, Polygon, SimilarityTransform};
use crate::image::{Image, CHANNELS};
use crate::rng::Rng;

pub use crate::geometry::{estimate_alignment, Alignment};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaceOpsConfig {
    /// Probability that a positive view is face-swapped.
    pub faceswap_probability: f64,
    /// Probability that the mask step fires.
    pub mask_probability: f64,
    /// Region box margin as a fraction of the box size, on each side.
    pub margin_frac: f64,
    /// Blend band width as a fraction of the hull's bounding-box diagonal.
    pub feather_frac: f64,
    /// Largest tolerated alignment RMS residual, as a fraction of the target
    /// face's interocular distance.
    pub alignment_residual_max: f64,
    /// Side length of the eye and mouth crops fed to the descriptor.
    pub crop_size: usize,
}

impl Default for FaceOpsConfig {
    fn default() -> Self {
        FaceOpsConfig {
            faceswap_probability: 0.5,
            mask_probability: 0.8,
            margin_frac: 0.15,
            feather_frac: 0.05,
            alignment_residual_max: 0.25,
            crop_size: 56,
        }
    }
}

impl FaceOpsConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        for (k, v) in [
            ("faceswap_probability", self.faceswap_probability),
            ("mask_probability", self.mask_probability),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{section}.{k}"), "must be in [0, 1]"));
            }
        }
        if !(self.margin_frac >= 0.0) {
            return Err(Error::config(format!("{section}.margin_frac"), "must be >= 0"));
        }
        if !(self.feather_frac >= 0.0) {
            return Err(Error::config(format!("{section}.feather_frac"), "must be >= 0"));
        }
        if !(self.alignment_residual_max > 0.0) {
            return Err(Error::config(
                format!("{section}.alignment_residual_max"),
                "must be > 0",
            ));
        }
        if self.crop_size < 8 {
            return Err(Error::config(format!("{section}.crop_size"), "must be >= 8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionBoxes {
    pub eyes_box: Rect,
    pub mouth_box: Rect,
    pub margin_frac: f64,
}

impl RegionBoxes {
    pub fn eyes_degenerate(&self) -> bool {
        self.eyes_box.is_degenerate()
    }

    pub fn mouth_degenerate(&self) -> bool {
        self.mouth_box.is_degenerate()
    }
}

/// Eye (36..48) and mouth (48..68) boxes grown by `margin_frac` and clipped
/// to the image.
pub fn region_boxes(lm: &Landmarks68, width: usize, height: usize, margin_frac: f64) -> RegionBoxes {
    RegionBoxes {
        eyes_box: lm.bounding_box(EYES).expand(margin_frac).clip(width, height),
        mouth_box: lm.bounding_box(MOUTH).expand(margin_frac).clip(width, height),
        margin_frac,
    }
}

fn pixel_in_rect(r: &Rect, x: usize, y: usize) -> bool {
    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
    px >= r.x0 && px <= r.x1 && py >= r.y0 && py <= r.y1
}

/// Result of [`color_correct`].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorCorrection {
    pub image: Image,
    /// Set when some source channel had zero in-region variance and only its
    /// mean was shifted.
    pub mean_shift_only: bool,
}

fn region_stats(img: &Image, mask: &[bool]) -> ([f64; 3], [f64; 3]) {
    let n = mask.iter().filter(|&&m| m).count() as f64;
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..CHANNELS {
        let plane = img.plane(c);
        let m = plane
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| v as f64)
            .sum::<f64>()
            / n;
        let var = plane
            .iter()
            .zip(mask)
            .filter(|(_, &k)| k)
            .map(|(&v, _)| (v as f64 - m).powi(2))
            .sum::<f64>()
            / n;
        mean[c] = m;
        std[c] = var.sqrt();
    }
    (mean, std)
}

/// Per-channel affine transfer making the in-region mean and standard
/// deviation of `src` match those of `dst`. Pixels outside the region are
/// copied from `src` unchanged; corrected pixels are clipped to `[0, 1]`.
pub fn color_correct(src: &Image, dst: &Image, region: &Polygon) -> Result<ColorCorrection> {
    if !src.same_size(dst) {
        return Err(Error::Argument("color_correct needs equally sized images".into()));
    }
    let mask = region.raster_mask(src.width(), src.height());
    color_correct_masked(src, dst, &mask)
}

pub(crate) fn color_correct_masked(src: &Image, dst: &Image, mask: &[bool]) -> Result<ColorCorrection> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Geometry("color correction region covers no pixels".into()));
    }
    let (ms, ss) = region_stats(src, mask);
    let (md, sd) = region_stats(dst, mask);
    let mut out = src.clone();
    let mut mean_shift_only = false;
    for c in 0..CHANNELS {
        let gain = if ss[c] > 1e-12 {
            sd[c] / ss[c]
        } else {
            mean_shift_only = true;
            1.0
        };
        let plane = out.plane_mut(c);
        for (i, v) in plane.iter_mut().enumerate() {
            if mask[i] {
                let corrected = (*v as f64 - ms[c]) * gain + md[c];
                *v = corrected.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(ColorCorrection {
        image: out,
        mean_shift_only,
    })
}

/// Resamples `src` into a `width × height` canvas so that a point `p` of
/// `src` lands at `transform(p)`. Coordinates are continuous with pixel
/// `(x, y)` covering `[x, x+1) × [y, y+1)`.
pub fn warp_similarity(src: &Image, transform: &SimilarityTransform, width: usize, height: usize) -> Image {
    let inv = transform.inverse();
    let mut out = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let q = inv.apply(Point::new(x as f64 + 0.5, y as f64 + 0.5));
            for c in 0..CHANNELS {
                out.set(c, x, y, src.sample_bilinear(c, q.x - 0.5, q.y - 0.5));
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct SwapOutcome {
    pub image: Image,
    /// Expression-source landmarks after alignment onto the identity face.
    pub landmarks: Landmarks68,
    pub hull: Polygon,
    pub alignment: Alignment,
    /// Width of the blend band in pixels.
    pub feather_px: f64,
    pub mean_shift_only: bool,
}

/// Pastes the landmark-hull region of `s_emo` onto `s_id`.
///
/// `s_emo` is aligned to `s_id` with a similarity transform fitted on the
/// nose and eye landmarks, color-corrected toward `s_id`'s in-hull
/// statistics, and alpha-blended with a weight that ramps from 0 on the
/// hull boundary to 1 at `feather_px` inside it. Pixels outside the
/// aligned hull are copied from `s_id` bit-for-bit.
pub fn face_swap(
    s_emo: (&Image, &Landmarks68),
    s_id: (&Image, &Landmarks68),
    cfg: &FaceOpsConfig,
) -> Result<SwapOutcome> {
    let (emo_img, emo_lm) = s_emo;
    let (id_img, id_lm) = s_id;
    let alignment = estimate_alignment(emo_lm, id_lm)?;
    let limit = cfg.alignment_residual_max * id_lm.interocular_distance();
    if !(alignment.residual_rms <= limit) {
        return Err(Error::Geometry(format!(
            "alignment residual {:.3} px exceeds {:.3} px",
            alignment.residual_rms, limit
        )));
    }
    let t = alignment.transform;
    let (w, h) = (id_img.width(), id_img.height());
    let warped = warp_similarity(emo_img, &t, w, h);
    let aligned = emo_lm.map(|p| t.apply(p))?;
    let hull = landmark_hull(&aligned)?;
    let mask = hull.raster_mask(w, h);
    let corrected = color_correct_masked(&warped, id_img, &mask)?;
    let feather_px = cfg.feather_frac * hull.bounding_diagonal();

    let mut out = id_img.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let alpha = if feather_px > 0.0 {
                let d = hull.boundary_distance(Point::new(x as f64 + 0.5, y as f64 + 0.5));
                (d / feather_px).min(1.0) as f32
            } else {
                1.0
            };
            for c in 0..CHANNELS {
                let a = corrected.image.get(c, x, y);
                let b = id_img.get(c, x, y);
                out.set(c, x, y, alpha * a + (1.0 - alpha) * b);
            }
        }
    }
    Ok(SwapOutcome {
        image: out,
        landmarks: aligned,
        hull,
        alignment,
        feather_px,
        mean_shift_only: corrected.mean_shift_only,
    })
}

fn crop_box(img: &Image, r: &Rect, size: usize) -> Image {
    let mut out = Image::new(size, size);
    let sx = r.width() / size as f64;
    let sy = r.height() / size as f64;
    for y in 0..size {
        for x in 0..size {
            let px = r.x0 + (x as f64 + 0.5) * sx - 0.5;
            let py = r.y0 + (y as f64 + 0.5) * sy - 0.5;
            for c in 0..CHANNELS {
                out.set(c, x, y, img.sample_bilinear(c, px, py));
            }
        }
    }
    out
}

/// Eye and mouth crops resampled to `size × size`.
pub fn crop_regions(
    img: &Image,
    lm: &Landmarks68,
    margin_frac: f64,
    size: usize,
) -> Result<(Image, Image, RegionBoxes)> {
    let boxes = region_boxes(lm, img.width(), img.height(), margin_frac);
    if boxes.eyes_degenerate() {
        return Err(Error::Geometry("eye region box is degenerate".into()));
    }
    if boxes.mouth_degenerate() {
        return Err(Error::Geometry("mouth region box is degenerate".into()));
    }
    Ok((
        crop_box(img, &boxes.eyes_box, size),
        crop_box(img, &boxes.mouth_box, size),
        boxes,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskTarget {
    Eyes,
    Mouth,
    /// Eyes or mouth with equal probability.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedRegion {
    Eyes,
    Mouth,
}

#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub image: Image,
    pub region: MaskedRegion,
    /// Set when the selected box was degenerate and nothing was filled.
    pub skipped: bool,
}

/// Fills the eye or mouth box with a constant color.
pub fn mask_regions(
    img: &Image,
    lm: &Landmarks68,
    target: MaskTarget,
    fill: [f32; 3],
    margin_frac: f64,
    rng: &mut Rng,
) -> MaskOutcome {
    let region = match target {
        MaskTarget::Eyes => MaskedRegion::Eyes,
        MaskTarget::Mouth => MaskedRegion::Mouth,
        MaskTarget::Random => {
            if rng.gen_bool(0.5) {
                MaskedRegion::Eyes
            } else {
                MaskedRegion::Mouth
            }
        }
    };
    let boxes = region_boxes(lm, img.width(), img.height(), margin_frac);
    let rect = match region {
        MaskedRegion::Eyes => boxes.eyes_box,
        MaskedRegion::Mouth => boxes.mouth_box,
    };
    if rect.is_degenerate() {
        log::warn!("skipping mask of degenerate {region:?} box");
        return MaskOutcome {
            image: img.clone(),
            region,
            skipped: true,
        };
    }
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            if pixel_in_rect(&rect, x, y) {
                out.set_pixel(x, y, fill);
            }
        }
    }
    MaskOutcome {
        image: out,
        region,
        skipped: false,
    }
}
