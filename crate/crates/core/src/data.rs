//! Frame records, landmark sets, the dataset manifest and evaluation reports.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Named facial regions of the 68-point annotation scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Jaw,
    RightEyebrow,
    LeftEyebrow,
    Nose,
    RightEye,
    LeftEye,
    Mouth,
}

impl Region {
    pub const ALL: [Region; 7] = [
        Region::Jaw,
        Region::RightEyebrow,
        Region::LeftEyebrow,
        Region::Nose,
        Region::RightEye,
        Region::LeftEye,
        Region::Mouth,
    ];

    pub fn indices(self) -> Range<usize> {
        match self {
            Region::Jaw => 0..17,
            Region::RightEyebrow => 17..22,
            Region::LeftEyebrow => 22..27,
            Region::Nose => 27..36,
            Region::RightEye => 36..42,
            Region::LeftEye => 42..48,
            Region::Mouth => 48..68,
        }
    }

    pub fn of_index(index: usize) -> Option<Region> {
        Region::ALL.into_iter().find(|r| r.indices().contains(&index))
    }
}

/// Both eyes, indices 36..48.
pub const EYES: Range<usize> = 36..48;
/// Outer and inner lip contour, indices 48..68.
pub const MOUTH: Range<usize> = 48..68;
/// Nose and eyes, the subset used for alignment.
pub const ALIGNMENT_SUBSET: Range<usize> = 27..48;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Axis-aligned rectangle `[x0, x1) × [y0, y1)` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn bounding(points: impl IntoIterator<Item = Point>) -> Option<Rect> {
        let mut iter = points.into_iter();
        let first = iter.next()?;
        let mut r = Rect {
            x0: first.x,
            y0: first.y,
            x1: first.x,
            y1: first.y,
        };
        for p in iter {
            r.x0 = r.x0.min(p.x);
            r.y0 = r.y0.min(p.y);
            r.x1 = r.x1.max(p.x);
            r.y1 = r.y1.max(p.y);
        }
        Some(r)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x0 < self.x1 && self.y0 < self.y1)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains_rect(&self, other: &Rect) -> bool {
        self.x0 <= other.x0 && self.y0 <= other.y0 && self.x1 >= other.x1 && self.y1 >= other.y1
    }

    pub fn expand(&self, frac: f64) -> Rect {
        let dx = self.width() * frac;
        let dy = self.height() * frac;
        Rect {
            x0: self.x0 - dx,
            y0: self.y0 - dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Rect {
        Rect {
            x0: self.x0 + dx,
            y0: self.y0 + dy,
            x1: self.x1 + dx,
            y1: self.y1 + dy,
        }
    }

    pub fn clip(&self, width: usize, height: usize) -> Rect {
        Rect {
            x0: self.x0.clamp(0.0, width as f64),
            y0: self.y0.clamp(0.0, height as f64),
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
        }
    }
}

/// 68 ordered facial landmarks in pixel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Landmarks68 {
    points: [Point; NUM_LANDMARKS],
}

impl Landmarks68 {
    pub fn new(points: [Point; NUM_LANDMARKS]) -> Result<Self> {
        if let Some(i) = points
            .iter()
            .position(|p| !p.x.is_finite() || !p.y.is_finite())
        {
            return Err(Error::Validation(format!("landmark {i} is not finite")));
        }
        Ok(Landmarks68 { points })
    }

    pub fn from_slice(points: &[Point]) -> Result<Self> {
        let arr: [Point; NUM_LANDMARKS] = points.try_into().map_err(|_| {
            Error::Validation(format!(
                "expected {NUM_LANDMARKS} landmark points, got {}",
                points.len()
            ))
        })?;
        Self::new(arr)
    }

    /// Builds from the flat `x0, y0, …, x67, y67` layout.
    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if values.len() != 2 * NUM_LANDMARKS {
            return Err(Error::Validation(format!(
                "expected {} landmark values ({NUM_LANDMARKS} points), got {} ({} points)",
                2 * NUM_LANDMARKS,
                values.len(),
                values.len() / 2
            )));
        }
        let pts: Vec<Point> = values
            .chunks_exact(2)
            .map(|c| Point::new(c[0], c[1]))
            .collect();
        Self::from_slice(&pts)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn points(&self) -> &[Point; NUM_LANDMARKS] {
        &self.points
    }

    pub fn region(&self, region: Region) -> &[Point] {
        &self.points[region.indices()]
    }

    pub fn subset(&self, range: Range<usize>) -> &[Point] {
        &self.points[range]
    }

    pub fn map(&self, f: impl Fn(Point) -> Point) -> Result<Self> {
        let mut points = self.points;
        for p in points.iter_mut() {
            *p = f(*p);
        }
        Self::new(points)
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        self.map(|p| Point::new(p.x + dx, p.y + dy))
    }

    pub fn bounding_box(&self, range: Range<usize>) -> Rect {
        Rect::bounding(self.points[range].iter().copied()).expect("non-empty landmark range")
    }

    pub fn centroid(&self, range: Range<usize>) -> Point {
        let pts = &self.points[range];
        let n = pts.len() as f64;
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Point::new(sx / n, sy / n)
    }

    /// Distance between the two eye centroids.
    pub fn interocular_distance(&self) -> f64 {
        let r = self.centroid(Region::RightEye.indices());
        let l = self.centroid(Region::LeftEye.indices());
        ((r.x - l.x).powi(2) + (r.y - l.y).powi(2)).sqrt()
    }
}

impl Serialize for Landmarks68 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_flat().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Landmarks68 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let flat = Vec::<f64>::deserialize(d)?;
        Landmarks68::from_flat(&flat).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LandmarkWarning {
    OutOfBounds { index: usize, point: Point },
    DegenerateRegion { region: &'static str },
}

impl fmt::Display for LandmarkWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LandmarkWarning::OutOfBounds { index, point } => {
                write!(f, "landmark {index} at ({}, {}) is out of bounds", point.x, point.y)
            }
            LandmarkWarning::DegenerateRegion { region } => {
                write!(f, "{region} bounding box has zero area")
            }
        }
    }
}

/// Reports out-of-bounds points and zero-area eye or mouth boxes.
pub fn validate_landmarks(lm: &Landmarks68, image_w: usize, image_h: usize) -> Vec<LandmarkWarning> {
    let mut warnings = Vec::new();
    for (index, p) in lm.points().iter().enumerate() {
        if p.x < 0.0 || p.y < 0.0 || p.x > image_w as f64 || p.y > image_h as f64 {
            warnings.push(LandmarkWarning::OutOfBounds { index, point: *p });
        }
    }
    for (name, range) in [
        ("right eye", Region::RightEye.indices()),
        ("left eye", Region::LeftEye.indices()),
        ("mouth", MOUTH),
    ] {
        if lm.bounding_box(range).area() <= 0.0 {
            warnings.push(LandmarkWarning::DegenerateRegion { region: name });
        }
    }
    warnings
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub identity_id: String,
    pub timestamp_s: f64,
    pub image_ref: String,
    pub landmarks: Landmarks68,
}

impl FrameRecord {
    /// Stable key identifying the frame across files (sidecars, traces).
    pub fn key(&self) -> String {
        format!("{}@{}", self.video_id, self.timestamp_s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub identity_id: String,
    pub video_id: String,
    /// Positions of this video's frames in `records`, contiguous and time-sorted.
    pub frames: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifestFormat {
    Csv,
    Jsonl,
}

impl ManifestFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(ManifestFormat::Csv),
            "jsonl" | "json" => Some(ManifestFormat::Jsonl),
            _ => None,
        }
    }
}

/// Time-sorted frame corpus with an identity → video → frames index.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    records: Vec<FrameRecord>,
    videos: Vec<VideoEntry>,
    index: BTreeMap<String, BTreeMap<String, usize>>,
    video_of_record: Vec<usize>,
}

impl DatasetManifest {
    /// Sorts records by (identity, video, time) and builds the index.
    /// Records are rejected when one video holds two frames with the same
    /// timestamp or when a video is shared between identities.
    pub fn from_records(mut records: Vec<FrameRecord>) -> Result<Self> {
        for r in &records {
            if !r.timestamp_s.is_finite() || r.timestamp_s < 0.0 {
                return Err(Error::Validation(format!(
                    "frame {} has invalid timestamp {}",
                    r.key(),
                    r.timestamp_s
                )));
            }
        }
        records.sort_by(|a, b| {
            a.identity_id
                .cmp(&b.identity_id)
                .then_with(|| a.video_id.cmp(&b.video_id))
                .then_with(|| a.timestamp_s.total_cmp(&b.timestamp_s))
        });

        let mut videos: Vec<VideoEntry> = Vec::new();
        let mut index: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
        let mut video_of_record = Vec::with_capacity(records.len());
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (pos, r) in records.iter().enumerate() {
            if let Some(id) = owner.insert(&r.video_id, &r.identity_id) {
                if id != r.identity_id {
                    return Err(Error::Validation(format!(
                        "video {} appears under identities {id} and {}",
                        r.video_id, r.identity_id
                    )));
                }
            }
            let continues = videos
                .last()
                .is_some_and(|v| v.video_id == r.video_id && v.identity_id == r.identity_id);
            if continues {
                let prev = &records[pos - 1];
                if prev.timestamp_s >= r.timestamp_s {
                    return Err(Error::Validation(format!(
                        "video {} has non-increasing timestamps ({} then {})",
                        r.video_id, prev.timestamp_s, r.timestamp_s
                    )));
                }
                videos.last_mut().unwrap().frames.end = pos + 1;
            } else {
                index
                    .entry(r.identity_id.clone())
                    .or_default()
                    .insert(r.video_id.clone(), videos.len());
                videos.push(VideoEntry {
                    identity_id: r.identity_id.clone(),
                    video_id: r.video_id.clone(),
                    frames: pos..pos + 1,
                });
            }
            video_of_record.push(videos.len() - 1);
        }
        Ok(DatasetManifest {
            records,
            videos,
            index,
            video_of_record,
        })
    }

    pub fn records(&self) -> &[FrameRecord] {
        &self.records
    }

    pub fn record(&self, pos: usize) -> &FrameRecord {
        &self.records[pos]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.videos
    }

    pub fn video(&self, video: usize) -> &VideoEntry {
        &self.videos[video]
    }

    pub fn video_of(&self, pos: usize) -> usize {
        self.video_of_record[pos]
    }

    /// Identity → video id → video slot.
    pub fn index(&self) -> &BTreeMap<String, BTreeMap<String, usize>> {
        &self.index
    }

    pub fn identities(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn num_identities(&self) -> usize {
        self.index.len()
    }

    /// Video slots belonging to an identity.
    pub fn videos_of_identity(&self, identity: &str) -> Vec<usize> {
        self.index
            .get(identity)
            .map(|m| m.values().copied().collect())
            .unwrap_or_default()
    }

    /// Time-sorted record positions of one video.
    pub fn frames(&self, identity: &str, video_id: &str) -> Option<Range<usize>> {
        let slot = *self.index.get(identity)?.get(video_id)?;
        Some(self.videos[slot].frames.clone())
    }

    /// Videos with at least two frames; single-frame videos cannot supply
    /// temporal positives.
    pub fn pretraining_videos(&self) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&v| self.videos[v].frames.len() >= 2)
            .collect()
    }

    pub fn position_of_key(&self, key: &str) -> Option<usize> {
        self.records.iter().position(|r| r.key() == key)
    }

    /// Returns a manifest restricted to the given identities.
    pub fn filter_identities(&self, keep: &[String]) -> Result<Self> {
        let records = self
            .records
            .iter()
            .filter(|r| keep.contains(&r.identity_id))
            .cloned()
            .collect();
        Self::from_records(records)
    }

    pub fn save(&self, path: &Path, fmt: ManifestFormat) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        match fmt {
            ManifestFormat::Jsonl => {
                for r in &self.records {
                    let line = serde_json::to_string(r).expect("frame record serializes");
                    writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
                }
            }
            ManifestFormat::Csv => {
                let mut cw = csv::Writer::from_writer(&mut w);
                cw.write_record(csv_header()).map_err(|e| csv_io(path, e))?;
                for r in &self.records {
                    let mut row = vec![
                        r.video_id.clone(),
                        r.identity_id.clone(),
                        r.timestamp_s.to_string(),
                        r.image_ref.clone(),
                    ];
                    row.extend(r.landmarks.to_flat().iter().map(|v| v.to_string()));
                    cw.write_record(&row).map_err(|e| csv_io(path, e))?;
                }
                cw.flush().map_err(|e| Error::io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

/// CSV column order: `video_id, identity_id, timestamp_s, image_ref, x0, y0, …, x67, y67`.
pub fn csv_header() -> Vec<String> {
    let mut cols: Vec<String> = ["video_id", "identity_id", "timestamp_s", "image_ref"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for i in 0..NUM_LANDMARKS {
        cols.push(format!("x{i}"));
        cols.push(format!("y{i}"));
    }
    cols
}

pub fn load_manifest(path: &Path, fmt: ManifestFormat) -> Result<DatasetManifest> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let records = match fmt {
        ManifestFormat::Jsonl => read_jsonl(BufReader::new(file), path)?,
        ManifestFormat::Csv => read_csv(file)?,
    };
    DatasetManifest::from_records(records)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    video_id: String,
    identity_id: String,
    timestamp_s: f64,
    image_ref: String,
    landmarks: Option<Vec<f64>>,
}

fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<FrameRecord>> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let flat = row.landmarks.ok_or_else(|| {
            Error::Validation(format!("line {line_no}: missing landmarks"))
        })?;
        let landmarks = Landmarks68::from_flat(&flat)
            .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
        records.push(FrameRecord {
            video_id: row.video_id,
            identity_id: row.identity_id,
            timestamp_s: row.timestamp_s,
            image_ref: row.image_ref,
            landmarks,
        });
    }
    Ok(records)
}

fn read_csv(file: File) -> Result<Vec<FrameRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let expected = csv_header();
    let header = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let head: Vec<&str> = header.iter().collect();
    if head.len() < 4 || head[..4] != ["video_id", "identity_id", "timestamp_s", "image_ref"] {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected header, want columns {:?}", &expected[..4]),
        });
    }
    if head.len() != expected.len() || head.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(Error::Validation(format!(
            "line 1: header must list {} landmark columns x0..y67, found {}",
            2 * NUM_LANDMARKS,
            head.len().saturating_sub(4)
        )));
    }
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line_no = i + 2;
        let row = row.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if row.len() < 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected at least 4 columns, got {}", row.len()),
            });
        }
        let timestamp_s: f64 = row[2].trim().parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("timestamp_s `{}` is not a number", &row[2]),
        })?;
        let lm_fields: Vec<&str> = row.iter().skip(4).filter(|f| !f.trim().is_empty()).collect();
        if lm_fields.is_empty() {
            return Err(Error::Validation(format!("line {line_no}: missing landmarks")));
        }
        let flat = lm_fields
            .iter()
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("landmark value `{f}` is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let landmarks = Landmarks68::from_flat(&flat)
            .map_err(|e| Error::Validation(format!("line {line_no}: {e}")))?;
        records.push(FrameRecord {
            video_id: row[0].to_string(),
            identity_id: row[1].to_string(),
            timestamp_s,
            image_ref: row[3].to_string(),
            landmarks,
        });
    }
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EvalTask {
    ExprCls,
    VaReg,
    FrKnn,
}

/// Metric bundle for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: EvalTask,
    pub metrics: BTreeMap<String, f64>,
    pub config_fingerprint: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl EvalReport {
    pub fn new(
        task: EvalTask,
        metrics: BTreeMap<String, f64>,
        config_fingerprint: impl Into<String>,
        seed: u64,
    ) -> Result<Self> {
        let report = EvalReport {
            task,
            metrics,
            config_fingerprint: config_fingerprint.into(),
            seed,
            label: None,
        };
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(Error::Validation("report has no metrics".into()));
        }
        if let Some((k, v)) = self.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("metric {k} is not finite ({v})")));
        }
        Ok(())
    }

    /// JSON with lexicographically sorted keys at every level.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(s).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        r.validate()?;
        Ok(r)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn grid_landmarks(offset: f64) -> Landmarks68 {
        let pts: Vec<Point> = (0..NUM_LANDMARKS)
            .map(|i| {
                Point::new(
                    10.0 + (i % 10) as f64 * 9.0 + offset,
                    10.0 + (i / 10) as f64 * 12.0 + (i % 3) as f64 * 2.0,
                )
            })
            .collect();
        Landmarks68::from_slice(&pts).unwrap()
    }

    fn json_line(video: &str, id: &str, t: f64, lm: &Landmarks68) -> String {
        serde_json::json!({
            "video_id": video, "identity_id": id, "timestamp_s": t,
            "image_ref": format!("{video}_{t}.png"), "landmarks": lm.to_flat(),
        })
        .to_string()
    }

    #[test]
    fn region_partition_is_total() {
        let mut seen = [0u8; NUM_LANDMARKS];
        for r in Region::ALL {
            for i in r.indices() {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_eq!(Region::of_index(36), Some(Region::RightEye));
        assert_eq!(Region::of_index(67), Some(Region::Mouth));
    }

    #[test]
    fn minimal_jsonl_manifest() {
        let lm = grid_landmarks(0.0);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", json_line("v1", "id1", 0.0, &lm)).unwrap();
        writeln!(f, "{}", json_line("v1", "id1", 0.5, &lm)).unwrap();
        let m = load_manifest(f.path(), ManifestFormat::Jsonl).unwrap();
        assert_eq!(m.num_identities(), 1);
        assert_eq!(m.videos().len(), 1);
        assert_eq!(m.len(), 2);
        assert_eq!(m.frames("id1", "v1"), Some(0..2));
    }

    #[test]
    fn swapped_file_order_gives_identical_manifest() {
        let lm = grid_landmarks(0.0);
        let mut a = tempfile::NamedTempFile::new().unwrap();
        writeln!(a, "{}", json_line("v1", "id1", 0.0, &lm)).unwrap();
        writeln!(a, "{}", json_line("v1", "id1", 0.5, &lm)).unwrap();
        let mut b = tempfile::NamedTempFile::new().unwrap();
        writeln!(b, "{}", json_line("v1", "id1", 0.5, &lm)).unwrap();
        writeln!(b, "{}", json_line("v1", "id1", 0.0, &lm)).unwrap();
        let ma = load_manifest(a.path(), ManifestFormat::Jsonl).unwrap();
        let mb = load_manifest(b.path(), ManifestFormat::Jsonl).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn short_landmark_row_fails_at_its_line() {
        let lm = grid_landmarks(0.0);
        let mut flat = lm.to_flat();
        flat.truncate(134);
        let bad = serde_json::json!({
            "video_id": "v1", "identity_id": "id1", "timestamp_s": 0.5,
            "image_ref": "x.png", "landmarks": flat,
        });
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", json_line("v1", "id1", 0.0, &lm)).unwrap();
        writeln!(f, "{bad}").unwrap();
        let err = load_manifest(f.path(), ManifestFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("line 2"), "{err}");
        assert!(err.to_string().contains("67 points"), "{err}");
    }

    #[test]
    fn malformed_and_missing_rows() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{{\"video_id\": 3").unwrap();
        let err = load_manifest(f.path(), ManifestFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(
            g,
            r#"{{"video_id":"v","identity_id":"i","timestamp_s":0,"image_ref":"a"}}"#
        )
        .unwrap();
        let err = load_manifest(g.path(), ManifestFormat::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Validation(_)), "{err}");
    }

    #[test]
    fn duplicate_timestamp_is_rejected() {
        let lm = grid_landmarks(0.0);
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "{}", json_line("v1", "id1", 0.5, &lm)).unwrap();
        writeln!(f, "{}", json_line("v1", "id1", 0.5, &lm)).unwrap();
        let err = load_manifest(f.path(), ManifestFormat::Jsonl).unwrap_err();
        assert!(err.to_string().contains("non-increasing"), "{err}");
    }

    #[test]
    fn csv_round_trip_and_column_order() {
        let lm = grid_landmarks(1.5);
        let recs = vec![
            FrameRecord {
                video_id: "b".into(),
                identity_id: "p2".into(),
                timestamp_s: 0.25,
                image_ref: "b0.png".into(),
                landmarks: lm.clone(),
            },
            FrameRecord {
                video_id: "a".into(),
                identity_id: "p1".into(),
                timestamp_s: 0.0,
                image_ref: "a0.png".into(),
                landmarks: lm,
            },
        ];
        let m = DatasetManifest::from_records(recs).unwrap();
        let f = tempfile::Builder::new().suffix(".csv").tempfile().unwrap();
        m.save(f.path(), ManifestFormat::Csv).unwrap();
        let text = std::fs::read_to_string(f.path()).unwrap();
        assert!(text.starts_with("video_id,identity_id,timestamp_s,image_ref,x0,y0,x1,y1,"));
        assert_eq!(load_manifest(f.path(), ManifestFormat::Csv).unwrap(), m);
        assert_eq!(m.record(0).identity_id, "p1");
    }

    #[test]
    fn landmark_warnings() {
        let lm = grid_landmarks(0.0);
        assert!(validate_landmarks(&lm, 112, 112).is_empty());

        let mut pts = *lm.points();
        pts[3] = Point::new(-3.0, 5.0);
        let w = validate_landmarks(&Landmarks68::new(pts).unwrap(), 112, 112);
        assert_eq!(w.len(), 1);
        assert!(matches!(w[0], LandmarkWarning::OutOfBounds { index: 3, .. }));

        let mut pts = *lm.points();
        for p in &mut pts[MOUTH] {
            *p = Point::new(50.0, 60.0);
        }
        let w = validate_landmarks(&Landmarks68::new(pts).unwrap(), 112, 112);
        assert_eq!(w, vec![LandmarkWarning::DegenerateRegion { region: "mouth" }]);
    }

    #[test]
    fn report_json_has_sorted_keys() {
        let mut metrics = BTreeMap::new();
        metrics.insert("f1".to_string(), 0.5);
        metrics.insert("acc".to_string(), 0.6);
        let r = EvalReport::new(EvalTask::ExprCls, metrics, "abc", 7).unwrap();
        let s = r.to_json();
        let acc = s.find("\"acc\"").unwrap();
        let f1 = s.find("\"f1\"").unwrap();
        let task = s.find("\"task\"").unwrap();
        let fp = s.find("\"config_fingerprint\"").unwrap();
        assert!(acc < f1 && fp < task);
        assert_eq!(EvalReport::from_json(&s).unwrap(), r);

        let mut bad = BTreeMap::new();
        bad.insert("x".to_string(), f64::NAN);
        assert!(EvalReport::new(EvalTask::VaReg, bad, "abc", 0).is_err());
        assert!(EvalReport::new(EvalTask::VaReg, BTreeMap::new(), "abc", 0).is_err());
    }
}
