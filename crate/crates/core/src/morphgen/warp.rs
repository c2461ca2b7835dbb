//! Piecewise-affine warp and blend. Both sources are warped onto the averaged
//! landmark geometry triangle by triangle, then mixed pixel-wise with the
//! blend factor. Degenerate triangles are skipped and their pixels filled
//! from neighboring triangles.

use image::RgbImage;

use super::triangulation::{dedup_points, delaunay, triangle_area};
use super::{average_landmarks, border_anchors, LandmarkSet, MorphError, Point};

const DEGENERATE_AREA: f64 = 1e-9;

fn bilinear(img: &RgbImage, x: f64, y: f64) -> [f64; 3] {
    let (w, h) = (img.width() as f64, img.height() as f64);
    // Pixel (i, j) covers [i, i+1] x [j, j+1]; sample in center coordinates.
    let fx = (x - 0.5).clamp(0.0, w - 1.0);
    let fy = (y - 0.5).clamp(0.0, h - 1.0);
    let x0 = fx.floor() as u32;
    let y0 = fy.floor() as u32;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;
    let p00 = img.get_pixel(x0, y0).0;
    let p10 = img.get_pixel(x1, y0).0;
    let p01 = img.get_pixel(x0, y1).0;
    let p11 = img.get_pixel(x1, y1).0;
    let mut out = [0.0; 3];
    for c in 0..3 {
        let top = (1.0 - tx) * p00[c] as f64 + tx * p10[c] as f64;
        let bottom = (1.0 - tx) * p01[c] as f64 + tx * p11[c] as f64;
        out[c] = (1.0 - ty) * top + ty * bottom;
    }
    out
}

/// Warp both images onto the alpha-averaged geometry and blend:
/// `out = (1 - alpha) * warped_a + alpha * warped_b`.
pub fn warp_blend(
    img_a: &RgbImage,
    img_b: &RgbImage,
    lms_a: &LandmarkSet,
    lms_b: &LandmarkSet,
    alpha: f64,
) -> Result<RgbImage, MorphError> {
    if img_a.dimensions() != img_b.dimensions() {
        return Err(MorphError::ImageSizeMismatch {
            a_w: img_a.width(),
            a_h: img_a.height(),
            b_w: img_b.width(),
            b_h: img_b.height(),
        });
    }
    let (w, h) = img_a.dimensions();
    lms_a.validate(w, h)?;
    lms_b.validate(w, h)?;
    let averaged = average_landmarks(lms_a, lms_b, alpha)?;

    // Aligned point lists: landmarks then border anchors, anchors mapping to
    // themselves in all three geometries. Deduplication is driven by the
    // averaged positions and applied to all three lists to keep indices aligned.
    let anchors = border_anchors(w, h);
    let mut avg_pts: Vec<Point> = averaged.points.clone();
    avg_pts.extend(anchors.iter().copied());
    let mut a_pts: Vec<Point> = lms_a.points.clone();
    a_pts.extend(anchors.iter().copied());
    let mut b_pts: Vec<Point> = lms_b.points.clone();
    b_pts.extend(anchors.iter().copied());
    let (avg_dedup, remap) = dedup_points(&avg_pts);
    let mut a_dedup = vec![Point::new(0.0, 0.0); avg_dedup.len()];
    let mut b_dedup = vec![Point::new(0.0, 0.0); avg_dedup.len()];
    for (src, &dst) in remap.iter().enumerate() {
        a_dedup[dst] = a_pts[src];
        b_dedup[dst] = b_pts[src];
    }
    let triangles = delaunay(&avg_dedup)?;

    let (wi, hi) = (w as usize, h as usize);
    let mut canvas: Vec<Option<[f64; 3]>> = vec![None; wi * hi];
    let mut degenerate = 0usize;
    for tri in &triangles {
        let p = [avg_dedup[tri[0]], avg_dedup[tri[1]], avg_dedup[tri[2]]];
        let qa = [a_dedup[tri[0]], a_dedup[tri[1]], a_dedup[tri[2]]];
        let qb = [b_dedup[tri[0]], b_dedup[tri[1]], b_dedup[tri[2]]];
        if triangle_area(&p[0], &p[1], &p[2]) < DEGENERATE_AREA
            || triangle_area(&qa[0], &qa[1], &qa[2]) < DEGENERATE_AREA
            || triangle_area(&qb[0], &qb[1], &qb[2]) < DEGENERATE_AREA
        {
            degenerate += 1;
            continue;
        }
        let e1 = (p[1].x - p[0].x, p[1].y - p[0].y);
        let e2 = (p[2].x - p[0].x, p[2].y - p[0].y);
        let det = e1.0 * e2.1 - e2.0 * e1.1;

        let min_x = p.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let max_x = p.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = p.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let max_y = p.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let x_lo = ((min_x - 0.5).floor().max(0.0)) as usize;
        let x_hi = ((max_x - 0.5).ceil().min((wi - 1) as f64)) as usize;
        let y_lo = ((min_y - 0.5).floor().max(0.0)) as usize;
        let y_hi = ((max_y - 0.5).ceil().min((hi - 1) as f64)) as usize;
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let idx = py * wi + px;
                if canvas[idx].is_some() {
                    continue;
                }
                let cx = px as f64 + 0.5;
                let cy = py as f64 + 0.5;
                let dx = (cx - p[0].x, cy - p[0].y);
                let u = (dx.0 * e2.1 - e2.0 * dx.1) / det;
                let v = (e1.0 * dx.1 - dx.0 * e1.1) / det;
                let l0 = 1.0 - u - v;
                if u < -1e-9 || v < -1e-9 || l0 < -1e-9 {
                    continue;
                }
                let src_a = (
                    l0 * qa[0].x + u * qa[1].x + v * qa[2].x,
                    l0 * qa[0].y + u * qa[1].y + v * qa[2].y,
                );
                let src_b = (
                    l0 * qb[0].x + u * qb[1].x + v * qb[2].x,
                    l0 * qb[0].y + u * qb[1].y + v * qb[2].y,
                );
                let sa = bilinear(img_a, src_a.0, src_a.1);
                let sb = bilinear(img_b, src_b.0, src_b.1);
                canvas[idx] = Some([
                    (1.0 - alpha) * sa[0] + alpha * sb[0],
                    (1.0 - alpha) * sa[1] + alpha * sb[1],
                    (1.0 - alpha) * sa[2] + alpha * sb[2],
                ]);
            }
        }
    }
    if degenerate > 0 {
        log::warn!("warp skipped {degenerate} degenerate triangle(s); filling from neighbors");
    }

    // Neighbor fill for any pixel no triangle claimed (degenerate skips or
    // numeric slivers on shared edges).
    let mut holes: Vec<usize> = canvas
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.is_none().then_some(i))
        .collect();
    if !holes.is_empty() {
        log::warn!("warp filling {} unclaimed pixel(s) from neighbors", holes.len());
    }
    while !holes.is_empty() {
        let mut filled_this_round = Vec::new();
        let snapshot = canvas.clone();
        for &idx in &holes {
            let (px, py) = (idx % wi, idx / wi);
            let mut neighbor = None;
            if py > 0 {
                neighbor = neighbor.or(snapshot[idx - wi]);
            }
            if px > 0 {
                neighbor = neighbor.or(snapshot[idx - 1]);
            }
            if px + 1 < wi {
                neighbor = neighbor.or(snapshot[idx + 1]);
            }
            if py + 1 < hi {
                neighbor = neighbor.or(snapshot[idx + wi]);
            }
            if let Some(v) = neighbor {
                canvas[idx] = Some(v);
                filled_this_round.push(idx);
            }
        }
        if filled_this_round.is_empty() {
            // Entire image unclaimed cannot happen (anchors always form at
            // least two valid triangles), but avoid looping forever.
            break;
        }
        holes.retain(|i| canvas[*i].is_none());
    }

    let mut out = RgbImage::new(w, h);
    for (idx, value) in canvas.iter().enumerate() {
        let v = value.unwrap_or([0.0; 3]);
        let px = image::Rgb([
            v[0].round().clamp(0.0, 255.0) as u8,
            v[1].round().clamp(0.0, 255.0) as u8,
            v[2].round().clamp(0.0, 255.0) as u8,
        ]);
        out.put_pixel((idx % wi) as u32, (idx / wi) as u32, px);
    }
    Ok(out)
}
