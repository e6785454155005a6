//! Small fixed-size vector helpers shared by every module.

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn add(a: &Point3, b: &Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
pub fn l1(a: &Point3) -> f64 {
    a[0].abs() + a[1].abs() + a[2].abs()
}

pub fn is_finite(p: &Point3) -> bool {
    p.iter().all(|c| c.is_finite())
}

/// Arithmetic mean of a non-empty point set.
pub fn centroid(points: &[Point3]) -> Point3 {
    let mut acc = [0.0; 3];
    for p in points {
        acc[0] += p[0];
        acc[1] += p[1];
        acc[2] += p[2];
    }
    let n = points.len() as f64;
    [acc[0] / n, acc[1] / n, acc[2] / n]
}
