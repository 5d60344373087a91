//! Small helpers over 3-vectors.

pub type Vec3 = nalgebra::Vector3<f64>;

pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    (a - b).norm()
}

/// Unit vector along `v`, or `None` when `v` is (numerically) zero.
pub fn unit(v: &Vec3) -> Option<Vec3> {
    let n = v.norm();
    if n > 1e-12 && n.is_finite() {
        Some(v / n)
    } else {
        None
    }
}

pub fn centroid(points: &[Vec3]) -> Vec3 {
    if points.is_empty() {
        return Vec3::zeros();
    }
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

/// Uniform point in the ball of the given radius.
pub fn random_in_ball<R: rand::Rng + ?Sized>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let v = Vec3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if v.norm_squared() <= 1.0 {
            return v * radius;
        }
    }
}

/// Uniform point on the unit sphere.
pub fn random_unit<R: rand::Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = random_in_ball(rng, 1.0);
        if let Some(u) = unit(&v) {
            return u;
        }
    }
}
