//! Polygon and curve primitives for mask synthesis: quadratic Bézier
//! smoothing, scanline rasterization, simplicity and area checks, and the
//! circle-lens overlap estimate used for placement exclusion.

/// Shoelace area of a closed polygon (positive regardless of winding).
pub fn polygon_area(pts: &[[f32; 2]]) -> f32 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for i in 0..pts.len() {
        let [x0, y0] = pts[i];
        let [x1, y1] = pts[(i + 1) % pts.len()];
        acc += (x0 as f64) * (y1 as f64) - (x1 as f64) * (y0 as f64);
    }
    (acc.abs() / 2.0) as f32
}

/// Proper segment intersection test (shared endpoints of adjacent edges
/// do not count).
fn segments_cross(a: [f32; 2], b: [f32; 2], c: [f32; 2], d: [f32; 2]) -> bool {
    let orient = |p: [f32; 2], q: [f32; 2], r: [f32; 2]| -> f64 {
        (q[0] as f64 - p[0] as f64) * (r[1] as f64 - p[1] as f64)
            - (q[1] as f64 - p[1] as f64) * (r[0] as f64 - p[0] as f64)
    };
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// True when no two non-adjacent edges of the closed polygon intersect.
pub fn polygon_is_simple(pts: &[[f32; 2]]) -> bool {
    let n = pts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        for j in (i + 1)..n {
            // Skip adjacent edges (they share a vertex).
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            if segments_cross(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn quad_bezier(p0: [f32; 2], p1: [f32; 2], p2: [f32; 2], t: f32) -> [f32; 2] {
    let u = 1.0 - t;
    [
        u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0],
        u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1],
    ]
}

/// Smooth a closed polygon with piecewise quadratic Bézier curves: each
/// curve runs midpoint-to-midpoint of consecutive edges with the shared
/// vertex as control point. Returns exactly `samples` points.
pub fn bezier_smooth(vertices: &[[f32; 2]], samples: usize) -> Vec<[f32; 2]> {
    let n = vertices.len();
    assert!(n >= 3, "bezier_smooth: need at least 3 vertices");
    assert!(samples >= n, "bezier_smooth: need at least one sample per segment");
    let mid = |i: usize| -> [f32; 2] {
        let a = vertices[i % n];
        let b = vertices[(i + 1) % n];
        [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]
    };
    let mut out = Vec::with_capacity(samples);
    for k in 0..samples {
        let t = k as f32 / samples as f32 * n as f32;
        let seg = (t.floor() as usize).min(n - 1);
        let u = t - seg as f32;
        // Segment `seg` runs from mid(seg-1 .. seg) to mid(seg .. seg+1)
        // around vertex `seg`.
        let p0 = mid((seg + n - 1) % n);
        let p2 = mid(seg);
        out.push(quad_bezier(p0, vertices[seg], p2, u));
    }
    out
}

/// Scanline rasterization of a simple closed polygon onto an `h` x `w`
/// grid: a pixel is set when its centre lies inside (even-odd rule).
/// Returns row-major booleans.
pub fn rasterize_polygon(pts: &[[f32; 2]], h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    if pts.len() < 3 {
        return mask;
    }
    let ys: Vec<f32> = pts.iter().map(|p| p[1]).collect();
    let ymin = ys.iter().cloned().fold(f32::INFINITY, f32::min).floor().max(0.0) as usize;
    let ymax = (ys.iter().cloned().fold(f32::NEG_INFINITY, f32::max).ceil() as isize)
        .min(h as isize - 1)
        .max(0) as usize;
    let mut xs: Vec<f32> = Vec::with_capacity(8);
    for row in ymin..=ymax {
        let yc = row as f32 + 0.5;
        xs.clear();
        for i in 0..pts.len() {
            let [x0, y0] = pts[i];
            let [x1, y1] = pts[(i + 1) % pts.len()];
            // Half-open rule on y to count each crossing once.
            if (y0 <= yc && y1 > yc) || (y1 <= yc && y0 > yc) {
                let t = (yc - y0) / (y1 - y0);
                xs.push(x0 + t * (x1 - x0));
            }
        }
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in xs.chunks_exact(2) {
            let (xa, xb) = (pair[0], pair[1]);
            let ja = (xa - 0.5).ceil().max(0.0) as usize;
            let jb = (xb - 0.5).floor().min(w as f32 - 1.0);
            if jb < 0.0 {
                continue;
            }
            for j in ja..=(jb as usize).min(w - 1) {
                // Pixel centre j + 0.5 lies in [xa, xb).
                if (j as f32 + 0.5) >= xa && (j as f32 + 0.5) < xb {
                    mask[row * w + j] = true;
                }
            }
        }
    }
    mask
}

/// Boundary pixels of a row-major mask: set pixels with at least one
/// 4-neighbour outside the mask (image border counts as outside).
pub fn mask_boundary(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for i in 0..h {
        for j in 0..w {
            if !mask[i * w + j] {
                continue;
            }
            let outside = i == 0
                || j == 0
                || i == h - 1
                || j == w - 1
                || !mask[(i - 1) * w + j]
                || !mask[(i + 1) * w + j]
                || !mask[i * w + j - 1]
                || !mask[i * w + j + 1];
            if outside {
                out[i * w + j] = true;
            }
        }
    }
    out
}

/// Intersection area of two disks (the lens), used to estimate placement
/// overlap before polygons exist.
pub fn disk_overlap_area(c0: [f32; 2], r0: f32, c1: [f32; 2], r1: f32) -> f32 {
    let d = ((c0[0] - c1[0]).powi(2) + (c0[1] - c1[1]).powi(2)).sqrt();
    if d >= r0 + r1 {
        return 0.0;
    }
    let (rs, rl) = if r0 < r1 { (r0, r1) } else { (r1, r0) };
    if d + rs <= rl {
        return std::f32::consts::PI * rs * rs;
    }
    let d = d.max(1e-6);
    let a0 = r0 * r0 * (((d * d + r0 * r0 - r1 * r1) / (2.0 * d * r0)).clamp(-1.0, 1.0)).acos();
    let a1 = r1 * r1 * (((d * d + r1 * r1 - r0 * r0) / (2.0 * d * r1)).clamp(-1.0, 1.0)).acos();
    let k = ((-d + r0 + r1) * (d + r0 - r1) * (d - r0 + r1) * (d + r0 + r1)).max(0.0);
    a0 + a1 - 0.5 * k.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_of_unit_square() {
        let sq = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!((polygon_area(&sq) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn simplicity_detects_bowtie() {
        let simple = [[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]];
        let bowtie = [[0.0, 0.0], [2.0, 2.0], [2.0, 0.0], [0.0, 2.0]];
        assert!(polygon_is_simple(&simple));
        assert!(!polygon_is_simple(&bowtie));
    }

    #[test]
    fn smoothed_triangle_is_simple_and_closed() {
        let tri = [[10.0, 2.0], [18.0, 16.0], [2.0, 16.0]];
        let smooth = bezier_smooth(&tri, 24);
        assert_eq!(smooth.len(), 24);
        assert!(polygon_is_simple(&smooth));
        assert!(polygon_area(&smooth) > 0.0);
    }

    #[test]
    fn raster_of_square_counts_interior_pixels() {
        // Square covering pixel centres 2..8 in both axes.
        let sq = [[2.0, 2.0], [8.0, 2.0], [8.0, 8.0], [2.0, 8.0]];
        let mask = rasterize_polygon(&sq, 10, 10);
        let count = mask.iter().filter(|&&b| b).count();
        assert_eq!(count, 36, "6x6 pixel centres inside");
        assert!(mask[3 * 10 + 3]);
        assert!(!mask[1 * 10 + 1]);
    }

    #[test]
    fn boundary_is_one_pixel_ring() {
        let sq = [[2.0, 2.0], [8.0, 2.0], [8.0, 8.0], [2.0, 8.0]];
        let mask = rasterize_polygon(&sq, 10, 10);
        let b = mask_boundary(&mask, 10, 10);
        let count = b.iter().filter(|&&v| v).count();
        assert_eq!(count, 20, "perimeter of a 6x6 block");
    }

    #[test]
    fn disk_overlap_limits() {
        let full = disk_overlap_area([0.0, 0.0], 2.0, [0.0, 0.0], 5.0);
        assert!((full - std::f32::consts::PI * 4.0).abs() < 1e-3);
        assert_eq!(disk_overlap_area([0.0, 0.0], 1.0, [5.0, 0.0], 1.0), 0.0);
        // Half-overlap sanity: symmetric equal disks at distance r.
        let a = disk_overlap_area([0.0, 0.0], 2.0, [2.0, 0.0], 2.0);
        assert!(a > 0.0 && a < std::f32::consts::PI * 4.0);
    }
}
