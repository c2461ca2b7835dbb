//! Delaunay mesh over landmarks plus 8 border anchors (corners and edge
//! midpoints), so triangles tile the full image rectangle.

use super::{MorphError, Point};

#[derive(Debug, Clone)]
pub struct Triangulation {
    pub points: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

pub fn triangle_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y)).abs()
}

impl Triangulation {
    pub fn total_area(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                triangle_area(
                    &self.points[t[0]],
                    &self.points[t[1]],
                    &self.points[t[2]],
                )
            })
            .sum()
    }
}

/// Corners and edge midpoints of the [0,w] x [0,h] rectangle.
pub fn border_anchors(w: u32, h: u32) -> Vec<Point> {
    let (w, h) = (w as f64, h as f64);
    vec![
        Point::new(0.0, 0.0),
        Point::new(w, 0.0),
        Point::new(0.0, h),
        Point::new(w, h),
        Point::new(w / 2.0, 0.0),
        Point::new(0.0, h / 2.0),
        Point::new(w, h / 2.0),
        Point::new(w / 2.0, h),
    ]
}

/// Remove exact/near-duplicate points (tolerance 1e-9), warning when any are
/// dropped. Returns the deduplicated list and, for each input index, its
/// index in the output.
pub fn dedup_points(points: &[Point]) -> (Vec<Point>, Vec<usize>) {
    let mut kept: Vec<Point> = Vec::with_capacity(points.len());
    let mut remap = Vec::with_capacity(points.len());
    let mut dropped = 0usize;
    for p in points {
        let existing = kept
            .iter()
            .position(|q| (q.x - p.x).abs() < 1e-9 && (q.y - p.y).abs() < 1e-9);
        match existing {
            Some(idx) => {
                remap.push(idx);
                dropped += 1;
            }
            None => {
                remap.push(kept.len());
                kept.push(*p);
            }
        }
    }
    if dropped > 0 {
        log::warn!("triangulation input contained {dropped} duplicate point(s); deduplicated");
    }
    (kept, remap)
}

/// Delaunay triangulation of the given points (no anchors added). Input order
/// determines the output deterministically. Colinear input is an error.
pub fn delaunay(points: &[Point]) -> Result<Vec<[usize; 3]>, MorphError> {
    if points.len() < 3 {
        return Err(MorphError::TooFewPoints(points.len()));
    }
    let coords: Vec<delaunator::Point> = points
        .iter()
        .map(|p| delaunator::Point { x: p.x, y: p.y })
        .collect();
    let result = delaunator::triangulate(&coords);
    if result.triangles.is_empty() {
        return Err(MorphError::ColinearPoints);
    }
    Ok(result
        .triangles
        .chunks_exact(3)
        .map(|t| [t[0], t[1], t[2]])
        .collect())
}

/// Delaunay mesh over `landmarks ∪ border anchors` of a (w, h) image.
pub fn triangulate(
    landmarks: &super::LandmarkSet,
    image_size: (u32, u32),
) -> Result<Triangulation, MorphError> {
    let (w, h) = image_size;
    landmarks.validate(w, h)?;
    let mut points = landmarks.points.clone();
    points.extend(border_anchors(w, h));
    let (points, _) = dedup_points(&points);
    let triangles = delaunay(&points)?;
    Ok(Triangulation { points, triangles })
}
