//! Per-view augmentation chains for pretraining and downstream training.
//!
//! Pretraining order: `[TimeAug] → [FaceSwap] → Mask → Resize → RandomCrop →
//! Flip → Jitter → Blur → Gray → Normalize`. TimeAug is applied by the batch
//! builder (it needs the manifest); everything after it happens here.
//! Downstream training drops TimeAug and FaceSwap; downstream eval is
//! `Resize → CenterCrop → Normalize`.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::batch::ViewRole;
use crate::data::Landmarks68;
use crate::error::{Error, Result};
use crate::face_ops::{face_swap, mask_regions, FaceOpsConfig, MaskTarget, MaskedRegion};
use crate::image::{hsv_to_rgb, luma, rgb_to_hsv, Image};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugConfig {
    pub resize: usize,
    pub crop: usize,
    pub p_flip: f64,
    pub p_jitter: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p_blur: f64,
    pub blur_sigma: (f64, f64),
    pub p_gray: f64,
    pub mask_target: MaskTarget,
    /// Per-channel normalization mean; computed from the corpus when absent.
    pub mean: Option<[f32; 3]>,
    pub std: Option<[f32; 3]>,
    /// Swap, mask and crop geometry, including the swap and mask probabilities.
    pub face: FaceOpsConfig,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig {
            resize: 128,
            crop: 112,
            p_flip: 0.5,
            p_jitter: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.2,
            p_blur: 0.5,
            blur_sigma: (0.1, 2.0),
            p_gray: 0.5,
            mask_target: MaskTarget::Random,
            mean: None,
            std: None,
            face: FaceOpsConfig::default(),
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let sec = "augmentation";
        for (k, v) in [
            ("p_flip", self.p_flip),
            ("p_jitter", self.p_jitter),
            ("p_blur", self.p_blur),
            ("p_gray", self.p_gray),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{sec}.{k}"), format!("must be in [0, 1], got {v}")));
            }
        }
        for (k, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!("{sec}.{k}"), "must be >= 0"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config(format!("{sec}.hue"), "must be in [0, 0.5]"));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config(format!("{sec}.blur_sigma"), "needs 0 < min <= max"));
        }
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::config(
                format!("{sec}.crop"),
                format!("crop {} must be in 1..=resize ({})", self.crop, self.resize),
            ));
        }
        if let Some(s) = self.std {
            if s.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::config(format!("{sec}.std"), "must be positive"));
            }
        }
        self.face.validate(&format!("{sec}.face"))
    }

    pub fn mean_or_default(&self) -> [f32; 3] {
        self.mean.unwrap_or([0.5; 3])
    }

    pub fn std_or_default(&self) -> [f32; 3] {
        self.std.unwrap_or([0.25; 3])
    }

    /// Odd blur kernel of about a tenth of the crop.
    pub fn blur_kernel(&self) -> usize {
        let k = (0.1 * self.crop as f64).round() as usize;
        (k | 1).max(3)
    }

    /// Copy with every stochastic step disabled.
    pub fn deterministic(&self) -> Self {
        AugConfig {
            p_flip: 0.0,
            p_jitter: 0.0,
            p_blur: 0.0,
            p_gray: 0.0,
            face: FaceOpsConfig {
                faceswap_probability: 0.0,
                mask_probability: 0.0,
                ..self.face
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterStep {
    Brightness,
    Contrast,
    Saturation,
    Hue,
}

/// One applied step, as recorded in augmentation traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    TimeAug { from: String, to: String, dt: f64 },
    FaceSwap { partner: String },
    FaceSwapFailed { partner: String, reason: String },
    Mask { region: MaskedRegion, skipped: bool },
    Resize { size: usize },
    RandomCrop { x0: usize, y0: usize, size: usize },
    CenterCrop { x0: usize, y0: usize, size: usize },
    Flip,
    Jitter { brightness: f64, contrast: f64, saturation: f64, hue: f64, order: Vec<JitterStep> },
    Blur { sigma: f64, kernel: usize },
    Gray,
    Normalize,
}

impl AugOp {
    /// Position in the canonical chain; traces must be strictly increasing.
    pub fn stage(&self) -> usize {
        match self {
            AugOp::TimeAug { .. } => 0,
            AugOp::FaceSwap { .. } | AugOp::FaceSwapFailed { .. } => 1,
            AugOp::Mask { .. } => 2,
            AugOp::Resize { .. } => 3,
            AugOp::RandomCrop { .. } | AugOp::CenterCrop { .. } => 4,
            AugOp::Flip => 5,
            AugOp::Jitter { .. } => 6,
            AugOp::Blur { .. } => 7,
            AugOp::Gray => 8,
            AugOp::Normalize => 9,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugOp::TimeAug { .. } => "time_aug",
            AugOp::FaceSwap { .. } => "face_swap",
            AugOp::FaceSwapFailed { .. } => "face_swap_failed",
            AugOp::Mask { .. } => "mask",
            AugOp::Resize { .. } => "resize",
            AugOp::RandomCrop { .. } => "random_crop",
            AugOp::CenterCrop { .. } => "center_crop",
            AugOp::Flip => "flip",
            AugOp::Jitter { .. } => "jitter",
            AugOp::Blur { .. } => "blur",
            AugOp::Gray => "gray",
            AugOp::Normalize => "normalize",
        }
    }
}

pub fn trace_in_order(ops: &[AugOp]) -> bool {
    ops.windows(2).all(|w| w[0].stage() < w[1].stage())
}

/// A frame with its pixels and landmarks.
#[derive(Debug, Clone, Copy)]
pub struct FrameView<'a> {
    pub key: &'a str,
    pub image: &'a Image,
    pub landmarks: &'a Landmarks68,
}

#[derive(Debug, Clone)]
pub struct AugmentedView {
    pub image: Image,
    pub ops: Vec<AugOp>,
}

impl AugmentedView {
    pub fn swapped(&self) -> bool {
        self.ops.iter().any(|o| matches!(o, AugOp::FaceSwap { .. }))
    }

    pub fn swap_failed(&self) -> bool {
        self.ops.iter().any(|o| matches!(o, AugOp::FaceSwapFailed { .. }))
    }
}

/// Pretraining chain for one view. `x` is the already time-shifted frame for
/// positives; `partner` is the identity donor, given only when FaceSwap is
/// enabled. Swap failures fall back to the un-swapped frame and are traced.
pub fn augment_pretrain_view(
    x: FrameView<'_>,
    role: ViewRole,
    partner: Option<FrameView<'_>>,
    cfg: &AugConfig,
    rng: &mut Rng,
) -> Result<AugmentedView> {
    let mut ops = Vec::new();
    let mut img = x.image.clone();
    let mut lm = x.landmarks.clone();
    if role == ViewRole::Positive {
        if let Some(p) = partner {
            if rng.gen_bool(cfg.face.faceswap_probability) {
                match face_swap((x.image, x.landmarks), (p.image, p.landmarks), &cfg.face) {
                    Ok(out) => {
                        img = out.image;
                        lm = out.landmarks;
                        ops.push(AugOp::FaceSwap {
                            partner: p.key.to_string(),
                        });
                    }
                    Err(e) => ops.push(AugOp::FaceSwapFailed {
                        partner: p.key.to_string(),
                        reason: e.to_string(),
                    }),
                }
            }
        }
    }
    let image = spatial_chain(&img, &lm, cfg, true, rng, &mut ops)?;
    Ok(AugmentedView { image, ops })
}

/// Downstream chain: the spatial pretraining chain in train mode, resize and
/// center crop in eval mode.
pub fn augment_downstream_view(
    x: FrameView<'_>,
    cfg: &AugConfig,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<AugmentedView> {
    let mut ops = Vec::new();
    let image = spatial_chain(x.image, x.landmarks, cfg, train_mode, rng, &mut ops)?;
    Ok(AugmentedView { image, ops })
}

fn spatial_chain(
    src: &Image,
    lm: &Landmarks68,
    cfg: &AugConfig,
    train: bool,
    rng: &mut Rng,
    ops: &mut Vec<AugOp>,
) -> Result<Image> {
    let mean = cfg.mean_or_default();
    let std = cfg.std_or_default();
    let mut img = src.clone();
    if train && rng.gen_bool(cfg.face.mask_probability) {
        let out = mask_regions(&img, lm, cfg.mask_target, mean, cfg.face.margin_frac, rng);
        ops.push(AugOp::Mask {
            region: out.region,
            skipped: out.skipped,
        });
        img = out.image;
    }
    img = img.resize(cfg.resize, cfg.resize);
    ops.push(AugOp::Resize { size: cfg.resize });
    let span = cfg.resize - cfg.crop;
    if train {
        let x0 = rng.gen_range(0..=span);
        let y0 = rng.gen_range(0..=span);
        img = img.crop(x0, y0, cfg.crop, cfg.crop)?;
        ops.push(AugOp::RandomCrop { x0, y0, size: cfg.crop });
        if rng.gen_bool(cfg.p_flip) {
            img = img.flip_horizontal();
            ops.push(AugOp::Flip);
        }
        if rng.gen_bool(cfg.p_jitter) {
            let op = color_jitter(&mut img, cfg, rng);
            ops.push(op);
        }
        if rng.gen_bool(cfg.p_blur) {
            let sigma = rng.gen_range(cfg.blur_sigma.0..=cfg.blur_sigma.1);
            let kernel = cfg.blur_kernel();
            img = img.gaussian_blur(sigma, kernel);
            ops.push(AugOp::Blur { sigma, kernel });
        }
        if rng.gen_bool(cfg.p_gray) {
            img = img.grayscale();
            ops.push(AugOp::Gray);
        }
    } else {
        let (x0, y0) = (span / 2, span / 2);
        img = img.crop(x0, y0, cfg.crop, cfg.crop)?;
        ops.push(AugOp::CenterCrop { x0, y0, size: cfg.crop });
    }
    img = img.normalize(mean, std);
    ops.push(AugOp::Normalize);
    Ok(img)
}

fn factor(strength: f64, rng: &mut Rng) -> f64 {
    if strength == 0.0 {
        1.0
    } else {
        rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

/// Brightness, contrast, saturation and hue perturbation in random order.
fn color_jitter(img: &mut Image, cfg: &AugConfig, rng: &mut Rng) -> AugOp {
    let b = factor(cfg.brightness, rng);
    let c = factor(cfg.contrast, rng);
    let s = factor(cfg.saturation, rng);
    let h = if cfg.hue > 0.0 {
        rng.gen_range(-cfg.hue..=cfg.hue)
    } else {
        0.0
    };
    let mut order = vec![
        JitterStep::Brightness,
        JitterStep::Contrast,
        JitterStep::Saturation,
        JitterStep::Hue,
    ];
    order.shuffle(rng);
    for step in &order {
        match step {
            JitterStep::Brightness => {
                *img = img.map_pixels(|p| p.map(|v| v * b as f32));
            }
            JitterStep::Contrast => {
                let n = (img.width() * img.height()) as f32;
                let mut m = 0.0f32;
                for y in 0..img.height() {
                    for x in 0..img.width() {
                        m += luma(img.pixel(x, y));
                    }
                }
                let m = m / n;
                *img = img.map_pixels(|p| p.map(|v| c as f32 * v + (1.0 - c as f32) * m));
            }
            JitterStep::Saturation => {
                *img = img.map_pixels(|p| {
                    let l = luma(p);
                    p.map(|v| s as f32 * v + (1.0 - s as f32) * l)
                });
            }
            JitterStep::Hue => {
                if h != 0.0 {
                    *img = img.map_pixels(|p| {
                        let mut hsv = rgb_to_hsv(p);
                        hsv[0] = (hsv[0] + h as f32).rem_euclid(1.0);
                        hsv_to_rgb(hsv)
                    });
                }
            }
        }
        img.clamp01();
    }
    AugOp::Jitter {
        brightness: b,
        contrast: c,
        saturation: s,
        hue: h,
        order,
    }
}

/// Per-channel mean and standard deviation over a set of images.
pub fn channel_stats(images: &[Image]) -> ([f32; 3], [f32; 3]) {
    let mut s = [0.0f64; 3];
    let mut ss = [0.0f64; 3];
    let mut n = 0.0f64;
    for img in images {
        for c in 0..3 {
            for &v in img.plane(c) {
                s[c] += v as f64;
                ss[c] += (v as f64) * (v as f64);
            }
        }
        n += (img.width() * img.height()) as f64;
    }
    let mut mean = [0.0f32; 3];
    let mut std = [1.0f32; 3];
    if n > 0.0 {
        for c in 0..3 {
            let m = s[c] / n;
            mean[c] = m as f32;
            std[c] = ((ss[c] / n - m * m).max(1e-8)).sqrt() as f32;
        }
    }
    (mean, std)
}
