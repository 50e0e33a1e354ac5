//! Procedural flat-shaded faces whose identity lives in appearance (hue,
//! proportions) and whose expression lives in eye and mouth geometry.
//!
//! Every rendered frame comes with the exact 68 landmarks used to draw it,
//! plus ground-truth eye and mouth pixel masks for coverage tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, FrameRecord, Landmarks68, Point, NUM_LANDMARKS};
use crate::error::{Error, Result};
use crate::geometry::Polygon;
use crate::image::{hsv_to_rgb, Image};
use crate::rng::{derive_seed, rng, Rng};

pub const MIN_SIZE: usize = 64;
/// Number of expression classes produced by [`ExpressionLatents::class`].
pub const NUM_CLASSES: usize = 4;

pub const FACE_ASPECT_RANGE: (f64, f64) = (0.8, 1.2);
pub const EYE_SPACING_RANGE: (f64, f64) = (0.3, 0.5);
pub const MOUTH_CURVE_RANGE: (f64, f64) = (-1.0, 1.0);
pub const MOUTH_OPEN_RANGE: (f64, f64) = (0.0, 1.0);
pub const EYE_OPEN_RANGE: (f64, f64) = (0.1, 1.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityLatents {
    /// Skin hue in `[0, 1)`; hair uses the opposite hue.
    pub hue: f64,
    /// Face height over width relative to the base proportions, `[0.8, 1.2]`.
    pub face_aspect: f64,
    /// Eye center distance as a fraction of face width, `[0.3, 0.5]`.
    pub eye_spacing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpressionLatents {
    /// Smile (+1) to frown (−1).
    pub mouth_curve: f64,
    pub mouth_open: f64,
    pub eye_open: f64,
}

impl ExpressionLatents {
    /// Quantized class: `2·[mouth_curve ≥ 0] + [mouth_open ≥ 0.5]`.
    ///
    /// 0 = closed frown, 1 = open frown, 2 = closed smile, 3 = open smile.
    pub fn class(&self) -> usize {
        2 * usize::from(self.mouth_curve >= 0.0) + usize::from(self.mouth_open >= 0.5)
    }

    /// `(valence, arousal)`; valence is the mouth curve, arousal averages
    /// mouth opening and eye narrowing.
    pub fn valence_arousal(&self) -> (f64, f64) {
        (
            self.mouth_curve,
            (self.mouth_open + (1.0 - self.eye_open)) / 2.0,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceLatents {
    pub identity: IdentityLatents,
    pub expression: ExpressionLatents,
}

impl FaceLatents {
    pub fn expression_class(&self) -> usize {
        self.expression.class()
    }

    pub fn va(&self) -> (f64, f64) {
        self.expression.valence_arousal()
    }

    fn validate(&self) -> Result<()> {
        let i = &self.identity;
        let e = &self.expression;
        let checks = [
            ("hue", i.hue, 0.0, 1.0),
            ("face_aspect", i.face_aspect, FACE_ASPECT_RANGE.0, FACE_ASPECT_RANGE.1),
            ("eye_spacing", i.eye_spacing, EYE_SPACING_RANGE.0, EYE_SPACING_RANGE.1),
            ("mouth_curve", e.mouth_curve, MOUTH_CURVE_RANGE.0, MOUTH_CURVE_RANGE.1),
            ("mouth_open", e.mouth_open, MOUTH_OPEN_RANGE.0, MOUTH_OPEN_RANGE.1),
            ("eye_open", e.eye_open, EYE_OPEN_RANGE.0, EYE_OPEN_RANGE.1),
        ];
        for (name, v, lo, hi) in checks {
            if !(v >= lo && v <= hi) {
                return Err(Error::Argument(format!("{name}={v} outside [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Rendered frame with ground-truth region masks (row-major, `size²`).
#[derive(Debug, Clone)]
pub struct RenderedFace {
    pub image: Image,
    pub landmarks: Landmarks68,
    pub eye_mask: Vec<bool>,
    pub mouth_mask: Vec<bool>,
}

struct FaceGeometry {
    cx: f64,
    cy: f64,
    half_w: f64,
    half_h: f64,
    eye_y: f64,
}

fn geometry(id: &IdentityLatents, size: usize) -> FaceGeometry {
    let s = size as f64;
    let half_w = 0.30 * s;
    let half_h = half_w * 1.25 * id.face_aspect;
    let cy = 0.52 * s;
    FaceGeometry {
        cx: 0.5 * s,
        cy,
        half_w,
        half_h,
        eye_y: cy - 0.18 * half_h,
    }
}

/// Exact landmark layout for the given latents.
pub fn face_landmarks(latents: &FaceLatents, size: usize) -> Landmarks68 {
    let g = geometry(&latents.identity, size);
    let e = &latents.expression;
    let (a, b) = (g.half_w, g.half_h);
    let mut pts = [Point::default(); NUM_LANDMARKS];

    // Jaw: image-left temple, around the chin, to image-right temple.
    for (k, p) in pts[0..17].iter_mut().enumerate() {
        let theta = (PI + 0.12) - k as f64 * (PI + 0.24) / 16.0;
        *p = Point::new(g.cx + a * theta.cos(), g.cy + b * theta.sin());
    }

    let eye_dx = latents.identity.eye_spacing * a;
    let eye_w = 0.34 * a;
    let eye_h = 0.30 * a * e.eye_open * latents.identity.face_aspect;

    // Brows, outer to inner on the image-left side, inner to outer on the right.
    let brow_y = g.eye_y - 0.20 * b;
    for k in 0..5 {
        let t = k as f64 / 4.0;
        let arch = (t * PI).sin() * 0.05 * b;
        let xl = g.cx - eye_dx - 0.6 * eye_w + t * 1.1 * eye_w;
        pts[17 + k] = Point::new(xl, brow_y - arch);
        let xr = g.cx + eye_dx - 0.5 * eye_w + t * 1.1 * eye_w;
        pts[22 + k] = Point::new(xr, brow_y - (((1.0 - t) * PI).sin() * 0.05 * b));
    }

    // Nose bridge then base.
    let nose_top = g.eye_y;
    let nose_bottom = g.cy + 0.22 * b;
    for k in 0..4 {
        let t = k as f64 / 3.0;
        pts[27 + k] = Point::new(g.cx, nose_top + t * (nose_bottom - nose_top));
    }
    for k in 0..5 {
        let t = k as f64 / 4.0 * 2.0 - 1.0;
        pts[31 + k] = Point::new(g.cx + t * 0.14 * a, nose_bottom + 0.06 * b - (1.0 - t * t) * 0.03 * b);
    }

    // Eyes as lenses: corner, two upper-lid points, corner, two lower-lid points.
    let lid = (PI / 3.0).sin();
    let eye = |center_x: f64| -> [Point; 6] {
        let (x0, x3) = (center_x - eye_w / 2.0, center_x + eye_w / 2.0);
        let x1 = x0 + eye_w / 3.0;
        let x2 = x0 + 2.0 * eye_w / 3.0;
        let up = g.eye_y - eye_h / 2.0 * lid;
        let dn = g.eye_y + eye_h / 2.0 * lid;
        [
            Point::new(x0, g.eye_y),
            Point::new(x1, up),
            Point::new(x2, up),
            Point::new(x3, g.eye_y),
            Point::new(x2, dn),
            Point::new(x1, dn),
        ]
    };
    pts[36..42].copy_from_slice(&eye(g.cx - eye_dx));
    pts[42..48].copy_from_slice(&eye(g.cx + eye_dx));

    // Mouth: base curve y(t) = my − curve·k·t², lips open symmetrically about it.
    let my = g.cy + 0.55 * b;
    let mw = 0.50 * a;
    let bend = 0.25 * b * e.mouth_curve;
    let gap = 0.22 * b * e.mouth_open;
    let lip = 0.06 * b;
    let base = |t: f64| my - bend * t * t;
    let round = |t: f64| (1.0 - t * t).max(0.0).sqrt();
    let outer_upper = [-1.0, -2.0 / 3.0, -1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    for (k, &t) in outer_upper.iter().enumerate() {
        pts[48 + k] = Point::new(g.cx + t * mw, base(t) - (gap + lip) * round(t));
    }
    let outer_lower = [2.0 / 3.0, 1.0 / 3.0, 0.0, -1.0 / 3.0, -2.0 / 3.0];
    for (k, &t) in outer_lower.iter().enumerate() {
        pts[55 + k] = Point::new(g.cx + t * mw, base(t) + (gap + lip) * round(t));
    }
    let inner_corner = 0.85;
    pts[60] = Point::new(g.cx - inner_corner * mw, base(-inner_corner));
    for (k, &t) in [-1.0 / 3.0, 0.0, 1.0 / 3.0].iter().enumerate() {
        pts[61 + k] = Point::new(g.cx + t * mw, base(t) - gap * round(t));
    }
    pts[64] = Point::new(g.cx + inner_corner * mw, base(inner_corner));
    for (k, &t) in [1.0 / 3.0, 0.0, -1.0 / 3.0].iter().enumerate() {
        pts[65 + k] = Point::new(g.cx + t * mw, base(t) + gap * round(t));
    }

    Landmarks68::new(pts).expect("generated landmarks are finite")
}

fn ellipse_contains(cx: f64, cy: f64, a: f64, b: f64, x: f64, y: f64) -> bool {
    let dx = (x - cx) / a;
    let dy = (y - cy) / b;
    dx * dx + dy * dy <= 1.0
}

fn thick_polyline(img: &mut Image, pts: &[Point], radius: f64, rgb: [f32; 3]) {
    let (w, h) = (img.width(), img.height());
    for seg in pts.windows(2) {
        let poly = Polygon::new(vec![seg[0], seg[1]]);
        let bb = crate::data::Rect::bounding(seg.iter().copied()).unwrap();
        let x0 = (bb.x0 - radius).floor().max(0.0) as usize;
        let y0 = (bb.y0 - radius).floor().max(0.0) as usize;
        let x1 = ((bb.x1 + radius).ceil().max(0.0) as usize).min(w);
        let y1 = ((bb.y1 + radius).ceil().max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if poly.boundary_distance(p) <= radius {
                    img.set_pixel(x, y, rgb);
                }
            }
        }
    }
}

/// Renders a face and returns the exact landmarks used to draw it.
pub fn render_face(latents: &FaceLatents, size: usize, seed: u64) -> Result<(Image, Landmarks68)> {
    let r = render_face_detailed(latents, size, seed)?;
    Ok((r.image, r.landmarks))
}

pub fn render_face_detailed(latents: &FaceLatents, size: usize, seed: u64) -> Result<RenderedFace> {
    if size < MIN_SIZE {
        return Err(Error::Argument(format!("face size {size} < {MIN_SIZE}")));
    }
    latents.validate()?;
    let lm = face_landmarks(latents, size);
    let g = geometry(&latents.identity, size);
    let hue = latents.identity.hue as f32;

    let background = [0.46f32, 0.47, 0.50];
    let skin = hsv_to_rgb([hue, 0.45, 0.85]);
    let hair = hsv_to_rgb([(hue + 0.5).rem_euclid(1.0), 0.55, 0.40]);
    let brow = hsv_to_rgb([hue, 0.50, 0.30]);
    let nose = hsv_to_rgb([hue, 0.50, 0.62]);
    let sclera = [0.95f32, 0.95, 0.95];
    let pupil = [0.10f32, 0.10, 0.12];
    let lips = [0.72f32, 0.18, 0.24];
    let cavity = [0.15f32, 0.04, 0.05];

    let mut img = Image::filled(size, size, background);
    let hair_cut = g.eye_y - 0.32 * g.half_h;
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if ellipse_contains(g.cx, g.cy, g.half_w, g.half_h, px, py) {
                img.set_pixel(x, y, skin);
            }
            if py < hair_cut
                && ellipse_contains(g.cx, g.cy - 0.08 * g.half_h, g.half_w * 1.08, g.half_h * 1.06, px, py)
            {
                img.set_pixel(x, y, hair);
            }
        }
    }

    let p = lm.points();
    let line_r = (0.022 * size as f64).max(0.6);
    thick_polyline(&mut img, &p[17..22], line_r, brow);
    thick_polyline(&mut img, &p[22..27], line_r, brow);
    thick_polyline(&mut img, &p[27..31], line_r * 0.8, nose);
    thick_polyline(&mut img, &p[31..36], line_r * 0.8, nose);

    let mut eye_mask = vec![false; size * size];
    for range in [36..42, 42..48] {
        let poly = Polygon::new(p[range.clone()].to_vec());
        let mask = poly.raster_mask(size, size);
        let c = lm.centroid(range);
        let pr = 0.09 * g.half_w;
        for (i, &m) in mask.iter().enumerate() {
            if m {
                let (x, y) = (i % size, i / size);
                let d = (x as f64 + 0.5 - c.x).hypot(y as f64 + 0.5 - c.y);
                img.set_pixel(x, y, if d <= pr { pupil } else { sclera });
                eye_mask[i] = true;
            }
        }
    }

    let outer = Polygon::new(p[48..60].to_vec());
    let inner = Polygon::new(p[60..68].to_vec());
    let mouth_mask = outer.raster_mask(size, size);
    let inner_mask = inner.raster_mask(size, size);
    for i in 0..size * size {
        if mouth_mask[i] {
            let (x, y) = (i % size, i / size);
            img.set_pixel(x, y, if inner_mask[i] { cavity } else { lips });
        }
    }

    // Sensor noise, independent of latents.
    let mut r = rng(seed);
    for v in img.plane_mut(0).iter_mut() {
        *v += r.gen_range(-0.02f32..0.02);
    }
    for c in 1..3 {
        for v in img.plane_mut(c).iter_mut() {
            *v += r.gen_range(-0.02f32..0.02);
        }
    }
    img.clamp01();

    Ok(RenderedFace {
        image: img,
        landmarks: lm,
        eye_mask,
        mouth_mask,
    })
}

fn reflect_into(mut v: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let period = 2.0 * span;
    v = (v - lo).rem_euclid(period);
    if v > span {
        v = period - v;
    }
    lo + v
}

/// One synthetic frame: its latents and the seed its pixels are rendered with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFrame {
    pub timestamp_s: f64,
    pub latents: FaceLatents,
    pub render_seed: u64,
}

/// Latent trajectory of one video: constant identity, expression following a
/// reflected Gaussian random walk with standard deviation `drift·√Δt`.
pub fn generate_trajectory(
    latents0: &FaceLatents,
    duration_s: f64,
    fps: f64,
    drift: f64,
    seed: u64,
) -> Result<Vec<SyntheticFrame>> {
    if !(duration_s > 0.0) || !(fps > 0.0) {
        return Err(Error::Argument(format!(
            "duration ({duration_s}) and fps ({fps}) must be positive"
        )));
    }
    if !(drift >= 0.0) {
        return Err(Error::Argument(format!("drift {drift} must be non-negative")));
    }
    latents0.validate()?;
    let n = ((duration_s * fps) - 1e-9).ceil().max(1.0) as usize;
    let step = drift * (1.0 / fps).sqrt();
    let mut r = rng(seed);
    let mut expr = latents0.expression;
    let mut frames = Vec::with_capacity(n);
    for k in 0..n {
        if k > 0 && step > 0.0 {
            let mut walk = |v: f64, (lo, hi): (f64, f64)| {
                let z: f64 = StandardNormal.sample(&mut r);
                reflect_into(v + step * z, lo, hi)
            };
            expr.mouth_curve = walk(expr.mouth_curve, MOUTH_CURVE_RANGE);
            expr.mouth_open = walk(expr.mouth_open, MOUTH_OPEN_RANGE);
            expr.eye_open = walk(expr.eye_open, EYE_OPEN_RANGE);
        }
        frames.push(SyntheticFrame {
            timestamp_s: k as f64 / fps,
            latents: FaceLatents {
                identity: latents0.identity,
                expression: expr,
            },
            render_seed: derive_seed(seed, &[k as u64, 0x5EED]),
        });
    }
    Ok(frames)
}

/// Ground truth stored alongside a synthetic manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameLabel {
    pub key: String,
    pub latents: FaceLatents,
    pub expression_class: usize,
    pub valence: f64,
    pub arousal: f64,
    pub render_seed: u64,
    pub size: usize,
}

impl FrameLabel {
    pub fn render(&self) -> Result<(Image, Landmarks68)> {
        render_face(&self.latents, self.size, self.render_seed)
    }
}

pub const SYNTH_SCHEME: &str = "synth:";

/// Builds the frame records of one video.
#[allow(clippy::too_many_arguments)]
pub fn generate_video(
    latents0: &FaceLatents,
    duration_s: f64,
    fps: f64,
    drift: f64,
    seed: u64,
    size: usize,
    identity_id: &str,
    video_id: &str,
) -> Result<(Vec<FrameRecord>, Vec<FrameLabel>)> {
    if size < MIN_SIZE {
        return Err(Error::Argument(format!("face size {size} < {MIN_SIZE}")));
    }
    let frames = generate_trajectory(latents0, duration_s, fps, drift, seed)?;
    let mut records = Vec::with_capacity(frames.len());
    let mut labels = Vec::with_capacity(frames.len());
    for f in frames {
        let landmarks = face_landmarks(&f.latents, size);
        let rec = FrameRecord {
            video_id: video_id.to_string(),
            identity_id: identity_id.to_string(),
            timestamp_s: f.timestamp_s,
            image_ref: String::new(),
            landmarks,
        };
        let key = rec.key();
        let (valence, arousal) = f.latents.va();
        labels.push(FrameLabel {
            key: key.clone(),
            latents: f.latents,
            expression_class: f.latents.expression_class(),
            valence,
            arousal,
            render_seed: f.render_seed,
            size,
        });
        records.push(FrameRecord {
            image_ref: format!("{SYNTH_SCHEME}{key}"),
            ..rec
        });
    }
    Ok((records, labels))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub n_identities: usize,
    pub videos_per_id: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub drift: f64,
    pub size: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_identities: 16,
            videos_per_id: 2,
            duration_s: 4.0,
            fps: 5.0,
            drift: 0.15,
            size: MIN_SIZE,
            seed: 0,
        }
    }
}

/// Synthetic manifest plus its label sidecar, keyed by record key.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub manifest: DatasetManifest,
    pub labels: BTreeMap<String, FrameLabel>,
}

pub fn sample_identity(r: &mut Rng) -> IdentityLatents {
    IdentityLatents {
        hue: r.gen_range(0.0..1.0),
        face_aspect: r.gen_range(FACE_ASPECT_RANGE.0..=FACE_ASPECT_RANGE.1),
        eye_spacing: r.gen_range(EYE_SPACING_RANGE.0..=EYE_SPACING_RANGE.1),
    }
}

pub fn sample_expression(r: &mut Rng) -> ExpressionLatents {
    ExpressionLatents {
        mouth_curve: r.gen_range(MOUTH_CURVE_RANGE.0..=MOUTH_CURVE_RANGE.1),
        mouth_open: r.gen_range(MOUTH_OPEN_RANGE.0..=MOUTH_OPEN_RANGE.1),
        eye_open: r.gen_range(EYE_OPEN_RANGE.0..=EYE_OPEN_RANGE.1),
    }
}

/// Expression drawn uniformly within the quadrant of `class`.
pub fn sample_expression_in_class(class: usize, r: &mut Rng) -> ExpressionLatents {
    let (c0, c1) = MOUTH_CURVE_RANGE;
    let (o0, o1) = MOUTH_OPEN_RANGE;
    let (om, cm) = ((o0 + o1) / 2.0, 0.0);
    let mouth_curve = if class >= 2 { r.gen_range(cm..=c1) } else { r.gen_range(c0..cm) };
    let mouth_open = if class % 2 == 1 { r.gen_range(om..=o1) } else { r.gen_range(o0..om) };
    ExpressionLatents {
        mouth_curve,
        mouth_open,
        eye_open: r.gen_range(EYE_OPEN_RANGE.0..=EYE_OPEN_RANGE.1),
    }
}

/// Videos start in classes drawn from a shuffled, balanced class list, so
/// every class opens roughly the same number of videos.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    if spec.n_identities == 0 || spec.videos_per_id == 0 {
        return Err(Error::Argument("identity and video counts must be positive".into()));
    }
    let mut id_rng = rng(derive_seed(spec.seed, &[0x1D]));
    let mut classes: Vec<usize> = (0..spec.n_identities * spec.videos_per_id)
        .map(|j| j % NUM_CLASSES)
        .collect();
    classes.shuffle(&mut rng(derive_seed(spec.seed, &[0xC1A5])));
    let mut records = Vec::new();
    let mut labels = BTreeMap::new();
    for i in 0..spec.n_identities {
        let identity = sample_identity(&mut id_rng);
        let identity_id = format!("id{i:04}");
        for v in 0..spec.videos_per_id {
            let video_seed = derive_seed(spec.seed, &[i as u64, v as u64]);
            let mut vr = rng(derive_seed(video_seed, &[0xE0]));
            let latents0 = FaceLatents {
                identity,
                expression: sample_expression_in_class(classes[i * spec.videos_per_id + v], &mut vr),
            };
            let video_id = format!("{identity_id}_v{v:02}");
            let (recs, labs) = generate_video(
                &latents0,
                spec.duration_s,
                spec.fps,
                spec.drift,
                video_seed,
                spec.size,
                &identity_id,
                &video_id,
            )?;
            records.extend(recs);
            for l in labs {
                labels.insert(l.key.clone(), l);
            }
        }
    }
    Ok(SyntheticCorpus {
        manifest: DatasetManifest::from_records(records)?,
        labels,
    })
}

pub fn save_labels(labels: &BTreeMap<String, FrameLabel>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for l in labels.values() {
        let line = serde_json::to_string(l).expect("label serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<BTreeMap<String, FrameLabel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: FrameLabel = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.insert(l.key.clone(), l);
    }
    Ok(out)
}
