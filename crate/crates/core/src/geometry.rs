//! Planar geometry on landmark point sets: convex hulls, polygon tests and
//! least-squares similarity transforms.

use serde::{Deserialize, Serialize};

use crate::data::{Landmarks68, Point};
use crate::error::{Error, Result};

/// Closed polygon given by its vertices in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Polygon { vertices }
    }

    /// Shoelace signed area; positive for counterclockwise vertex order.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut s = 0.0;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            s += a.x * b.y - b.x * a.y;
        }
        s / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        let n = v.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (v[i], v[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
                if p.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Euclidean distance from `p` to the polygon boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        let v = &self.vertices;
        let n = v.len();
        (0..n)
            .map(|i| segment_distance(p, v[i], v[(i + 1) % n]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn bounding_diagonal(&self) -> f64 {
        crate::data::Rect::bounding(self.vertices.iter().copied())
            .map(|r| r.width().hypot(r.height()))
            .unwrap_or(0.0)
    }

    /// Pixel mask (row-major, `width * height`) of pixels whose centers lie
    /// inside the polygon.
    pub fn raster_mask(&self, width: usize, height: usize) -> Vec<bool> {
        let mut mask = vec![false; width * height];
        let Some(bb) = crate::data::Rect::bounding(self.vertices.iter().copied()) else {
            return mask;
        };
        let y0 = bb.y0.floor().max(0.0) as usize;
        let y1 = (bb.y1.ceil().max(0.0) as usize).min(height);
        let x0 = bb.x0.floor().max(0.0) as usize;
        let x1 = (bb.x1.ceil().max(0.0) as usize).min(width);
        for y in y0..y1 {
            for x in x0..x1 {
                if self.contains(Point::new(x as f64 + 0.5, y as f64 + 0.5)) {
                    mask[y * width + x] = true;
                }
            }
        }
        mask
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (p.x - cx).hypot(p.y - cy)
}

/// Convex hull (Andrew's monotone chain), counterclockwise, collinear points
/// dropped.
pub fn convex_hull(points: &[Point]) -> Result<Polygon> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::Geometry(format!(
            "convex hull needs 3 distinct points, got {}",
            pts.len()
        )));
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    let hull = Polygon::new(lower);
    if hull.vertices.len() < 3 || hull.area() <= 0.0 {
        return Err(Error::Geometry("landmarks are collinear".into()));
    }
    Ok(hull)
}

/// Convex hull of all 68 landmarks.
pub fn landmark_hull(lm: &Landmarks68) -> Result<Polygon> {
    convex_hull(lm.points())
}

/// `p ↦ scale · R(rotation) · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians, counterclockwise in the coordinate frame of the points.
    pub rotation: f64,
    pub tx: f64,
    pub ty: f64,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.rotation.sin_cos();
        Point::new(
            self.scale * (c * p.x - s * p.y) + self.tx,
            self.scale * (s * p.x + c * p.y) + self.ty,
        )
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let inv_s = 1.0 / self.scale;
        let (s, c) = (-self.rotation).sin_cos();
        SimilarityTransform {
            scale: inv_s,
            rotation: -self.rotation,
            tx: -inv_s * (c * self.tx - s * self.ty),
            ty: -inv_s * (s * self.tx + c * self.ty),
        }
    }

    /// Transform rotating by `rotation` and scaling by `scale` about `center`.
    pub fn about(center: Point, scale: f64, rotation: f64) -> SimilarityTransform {
        let (s, c) = rotation.sin_cos();
        SimilarityTransform {
            scale,
            rotation,
            tx: center.x - scale * (c * center.x - s * center.y),
            ty: center.y - scale * (s * center.x + c * center.y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub transform: SimilarityTransform,
    /// Root-mean-square residual over the fitted point pairs.
    pub residual_rms: f64,
}

/// Closed-form least-squares similarity transform mapping `src` onto `dst`.
pub fn fit_similarity(src: &[Point], dst: &[Point]) -> Result<Alignment> {
    if src.len() != dst.len() || src.len() < 2 {
        return Err(Error::Geometry(format!(
            "alignment needs matching point sets of size >= 2 ({} vs {})",
            src.len(),
            dst.len()
        )));
    }
    let n = src.len() as f64;
    let mean = |pts: &[Point]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point::new(sx / n, sy / n)
    };
    let ms = mean(src);
    let md = mean(dst);
    let (mut var, mut a, mut b) = (0.0, 0.0, 0.0);
    for (p, q) in src.iter().zip(dst) {
        let (x, y) = (p.x - ms.x, p.y - ms.y);
        let (u, v) = (q.x - md.x, q.y - md.y);
        var += x * x + y * y;
        a += x * u + y * v;
        b += x * v - y * u;
    }
    if var <= f64::EPSILON * n {
        return Err(Error::Geometry("source points have zero variance".into()));
    }
    a /= var;
    b /= var;
    let scale = a.hypot(b);
    let rotation = b.atan2(a);
    let (s, c) = rotation.sin_cos();
    let transform = SimilarityTransform {
        scale,
        rotation,
        tx: md.x - scale * (c * ms.x - s * ms.y),
        ty: md.y - scale * (s * ms.x + c * ms.y),
    };
    let sq: f64 = src
        .iter()
        .zip(dst)
        .map(|(p, q)| {
            let t = transform.apply(*p);
            (t.x - q.x).powi(2) + (t.y - q.y).powi(2)
        })
        .sum();
    Ok(Alignment {
        transform,
        residual_rms: (sq / n).sqrt(),
    })
}

/// Similarity transform taking `src_lm` onto `dst_lm`, fitted on the nose and
/// eye landmarks (indices 27..48).
pub fn estimate_alignment(src_lm: &Landmarks68, dst_lm: &Landmarks68) -> Result<Alignment> {
    let range = crate::data::ALIGNMENT_SUBSET;
    fit_similarity(src_lm.subset(range.clone()), dst_lm.subset(range))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn circle(n: usize, r: f64) -> Vec<Point> {
        (0..n)
            .map(|i| {
                let a = i as f64 / n as f64 * std::f64::consts::TAU;
                Point::new(50.0 + r * a.cos(), 50.0 + r * a.sin())
            })
            .collect()
    }

    #[test]
    fn hull_of_circle_is_every_point_ccw() {
        let mut pts = circle(12, 20.0);
        pts.push(Point::new(50.0, 50.0));
        pts.push(Point::new(55.0, 48.0));
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.vertices.len(), 12);
        assert!(hull.signed_area() > 0.0);
        let again = convex_hull(&hull.vertices).unwrap();
        assert_eq!(again, hull);
    }

    #[test]
    fn collinear_hull_fails() {
        let pts: Vec<Point> = (0..10).map(|i| Point::new(i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(convex_hull(&pts), Err(Error::Geometry(_))));
    }

    #[test]
    fn polygon_contains_and_distance() {
        let sq = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(0.0, 10.0),
        ]);
        assert!(sq.contains(Point::new(5.0, 5.0)));
        assert!(!sq.contains(Point::new(11.0, 5.0)));
        assert!((sq.boundary_distance(Point::new(3.0, 5.0)) - 3.0).abs() < 1e-12);
        assert_eq!(sq.area(), 100.0);
        let mask = sq.raster_mask(12, 12);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 100);
    }

    #[test]
    fn translation_is_recovered_exactly() {
        let src = circle(21, 15.0);
        let dst: Vec<Point> = src.iter().map(|p| Point::new(p.x + 5.0, p.y - 3.0)).collect();
        let a = fit_similarity(&src, &dst).unwrap();
        assert!((a.transform.scale - 1.0).abs() < 1e-12);
        assert!(a.transform.rotation.abs() < 1e-12);
        assert!((a.transform.tx - 5.0).abs() < 1e-9);
        assert!((a.transform.ty + 3.0).abs() < 1e-9);
        assert!(a.residual_rms < 1e-9);
    }

    #[test]
    fn zero_variance_source_fails() {
        let src = vec![Point::new(1.0, 1.0); 5];
        let dst = circle(5, 3.0);
        assert!(matches!(fit_similarity(&src, &dst), Err(Error::Geometry(_))));
    }

    #[test]
    fn inverse_composes_to_identity() {
        let t = SimilarityTransform {
            scale: 1.3,
            rotation: 0.4,
            tx: 2.0,
            ty: -7.0,
        };
        let p = Point::new(3.0, 4.0);
        let q = t.inverse().apply(t.apply(p));
        assert!((q.x - p.x).abs() < 1e-12 && (q.y - p.y).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn similarity_round_trip(scale in 0.5f64..2.0, rot in -3.0f64..3.0, tx in -20.0f64..20.0, ty in -20.0f64..20.0) {
            let src = circle(21, 15.0);
            let t = SimilarityTransform { scale, rotation: rot, tx, ty };
            let dst: Vec<Point> = src.iter().map(|p| t.apply(*p)).collect();
            let a = fit_similarity(&src, &dst).unwrap();
            prop_assert!((a.transform.scale - scale).abs() < 1e-9);
            prop_assert!((a.transform.rotation - rot).abs() < 1e-9);
            prop_assert!((a.transform.tx - tx).abs() < 1e-9);
            prop_assert!((a.transform.ty - ty).abs() < 1e-9);
        }

        #[test]
        fn hull_contains_its_points(pts in prop::collection::vec((0.0f64..100.0, 0.0f64..100.0), 3..40)) {
            let pts: Vec<Point> = pts.into_iter().map(|(x, y)| Point::new(x, y)).collect();
            if let Ok(h) = convex_hull(&pts) {
                for p in &pts {
                    prop_assert!(h.contains(*p) || h.boundary_distance(*p) < 1e-7);
                }
            }
        }
    }
}
