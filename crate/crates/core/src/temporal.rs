//! Temporal positive sampling (nearby frames of the same clip) and
//! same-identity hard-negative sampling (distant frames).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Slack for comparing timestamps that come from `k / fps` arithmetic.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositivePdf {
    /// `p(t) = 2 (T1 − t) / T1²` on `[0, T1]`.
    LinearDecreasing,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    /// Largest interval, in seconds, still treated as a positive.
    pub t1_seconds: f64,
    /// Smallest interval, in seconds, treated as a hard negative.
    pub t2_seconds: f64,
    pub positive_pdf: PositivePdf,
    /// Optional upper bound on the hard-negative interval.
    pub t2_max_seconds: Option<f64>,
    /// Fall back to another clip of the same identity when the anchor's own
    /// clip has no frame at least `t2_seconds` away.
    pub cross_video_hard_negatives: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            t1_seconds: 1.0,
            t2_seconds: 3.0,
            positive_pdf: PositivePdf::LinearDecreasing,
            t2_max_seconds: None,
            cross_video_hard_negatives: true,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t1_seconds > 0.0) {
            return Err(Error::config("temporal.t1_seconds", "must be > 0"));
        }
        if !(self.t1_seconds < self.t2_seconds) {
            return Err(Error::config(
                "temporal.t2_seconds",
                format!(
                    "t1_seconds ({}) must be < t2_seconds ({})",
                    self.t1_seconds, self.t2_seconds
                ),
            ));
        }
        if let Some(max) = self.t2_max_seconds {
            if !(max >= self.t2_seconds) {
                return Err(Error::config(
                    "temporal.t2_max_seconds",
                    "must be >= t2_seconds",
                ));
            }
        }
        Ok(())
    }
}

/// Raw interval draw from the configured density on `[0, T1]`.
pub fn draw_interval(pdf: PositivePdf, t1: f64, rng: &mut Rng) -> f64 {
    let u: f64 = rng.gen_range(0.0..1.0);
    match pdf {
        // Inverse CDF of F(t) = 1 − (1 − t/T1)².
        PositivePdf::LinearDecreasing => t1 * (1.0 - (1.0 - u).sqrt()),
        PositivePdf::Uniform => t1 * u,
    }
}

/// Frame positions of the anchor's clip with `0 < |Δt| ≤ T1`, split by
/// direction (earlier, later).
fn positive_candidates(
    manifest: &DatasetManifest,
    anchor: usize,
    t1: f64,
) -> (Vec<usize>, Vec<usize>) {
    let frames = manifest.video(manifest.video_of(anchor)).frames.clone();
    let t0 = manifest.record(anchor).timestamp_s;
    let mut earlier = Vec::new();
    let mut later = Vec::new();
    for pos in frames {
        if pos == anchor {
            continue;
        }
        let dt = manifest.record(pos).timestamp_s - t0;
        if dt.abs() <= t1 + TIME_EPS {
            if dt < 0.0 {
                earlier.push(pos);
            } else {
                later.push(pos);
            }
        }
    }
    (earlier, later)
}

/// Samples a temporal positive for the frame at `anchor`.
///
/// The interval is drawn from the configured density, a direction is picked
/// uniformly among directions that have frames within `T1`, and the draw is
/// snapped to the nearest frame in that direction (ties go to the earlier
/// frame).
pub fn sample_positive(
    manifest: &DatasetManifest,
    anchor: usize,
    cfg: &TemporalConfig,
    rng: &mut Rng,
) -> Result<usize> {
    let (earlier, later) = positive_candidates(manifest, anchor, cfg.t1_seconds);
    if earlier.is_empty() && later.is_empty() {
        let rec = manifest.record(anchor);
        return Err(Error::Sampling(format!(
            "video {} has no frame within {} s of t={}",
            rec.video_id, cfg.t1_seconds, rec.timestamp_s
        )));
    }
    let t1 = draw_interval(cfg.positive_pdf, cfg.t1_seconds, rng);
    let candidates = match (earlier.is_empty(), later.is_empty()) {
        (false, true) => &earlier,
        (true, false) => &later,
        _ => {
            if rng.gen_bool(0.5) {
                &earlier
            } else {
                &later
            }
        }
    };
    let t0 = manifest.record(anchor).timestamp_s;
    let mut best = candidates[0];
    let mut best_err = f64::INFINITY;
    // Candidates are time-sorted, so strict `<` keeps the earlier frame on ties.
    for &pos in candidates {
        let err = ((manifest.record(pos).timestamp_s - t0).abs() - t1).abs();
        if err < best_err - TIME_EPS {
            best = pos;
            best_err = err;
        }
    }
    Ok(best)
}

/// Same-identity frames eligible as hard negatives for `anchor`: first the
/// anchor's own clip at `|Δt| ≥ T2` (capped by `t2_max_seconds`), otherwise,
/// when enabled, every frame of the identity's other clips.
pub fn hard_negative_candidates(
    manifest: &DatasetManifest,
    anchor: usize,
    cfg: &TemporalConfig,
) -> (Vec<usize>, bool) {
    let video = manifest.video_of(anchor);
    let t0 = manifest.record(anchor).timestamp_s;
    let same: Vec<usize> = manifest
        .video(video)
        .frames
        .clone()
        .filter(|&pos| {
            let dt = (manifest.record(pos).timestamp_s - t0).abs();
            dt + TIME_EPS >= cfg.t2_seconds
                && cfg.t2_max_seconds.map_or(true, |m| dt <= m + TIME_EPS)
        })
        .collect();
    if !same.is_empty() || !cfg.cross_video_hard_negatives {
        return (same, false);
    }
    let identity = &manifest.record(anchor).identity_id;
    let other: Vec<usize> = manifest
        .videos_of_identity(identity)
        .into_iter()
        .filter(|&v| v != video)
        .flat_map(|v| manifest.video(v).frames.clone())
        .collect();
    (other, true)
}

/// Samples a hard negative uniformly over the eligible frames.
pub fn sample_hard_negative(
    manifest: &DatasetManifest,
    anchor: usize,
    cfg: &TemporalConfig,
    rng: &mut Rng,
) -> Result<usize> {
    let (candidates, _) = hard_negative_candidates(manifest, anchor, cfg);
    if candidates.is_empty() {
        return Err(Error::Sampling(format!(
            "identity {} has no frame at least {} s from {}",
            manifest.record(anchor).identity_id,
            cfg.t2_seconds,
            manifest.record(anchor).key()
        )));
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

pub fn has_positive(manifest: &DatasetManifest, anchor: usize, cfg: &TemporalConfig) -> bool {
    let (e, l) = positive_candidates(manifest, anchor, cfg.t1_seconds);
    !(e.is_empty() && l.is_empty())
}

pub fn has_hard_negative(manifest: &DatasetManifest, anchor: usize, cfg: &TemporalConfig) -> bool {
    !hard_negative_candidates(manifest, anchor, cfg).0.is_empty()
}
