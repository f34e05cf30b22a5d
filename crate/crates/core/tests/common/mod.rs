//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use rand::Rng;
use upright::solver::{FrameMap, SolveSystem};
use upright::synth::random_rotation;
use upright::{Mat3, Vec3};

/// Builds the stacked `A` (rows `W(i)F(i)ᵀ`) and `b` (`W(i)f(i)`) explicitly
/// and forms `AᵀA`, `Aᵀb`, `bᵀb`.
pub fn naive_normal_equations(map: &FrameMap) -> (Mat3, Vec3, f64) {
    let valid: Vec<usize> = (0..map.len()).filter(|&i| map.mask()[i]).collect();
    let mut a = DMatrix::<f64>::zeros(3 * valid.len(), 3);
    let mut b = DVector::<f64>::zeros(3 * valid.len());
    for (row, &i) in valid.iter().enumerate() {
        let f = map.frames()[i];
        let w = map.weights()[i];
        for m in 0..3 {
            for k in 0..3 {
                a[(3 * row + m, k)] = w[m] * f[(k, m)];
            }
            b[3 * row + m] = w[m] * map.layout()[i][m];
        }
    }
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    (
        Mat3::from_fn(|r, c| ata[(r, c)]),
        Vec3::new(atb[0], atb[1], atb[2]),
        b.dot(&b),
    )
}

/// Objective on the sphere without reference to the solver.
pub fn objective(h: &Mat3, g: &Vec3, c: f64, u: &Vec3) -> f64 {
    u.dot(&(h * u)) - 2.0 * g.dot(u) + c
}

pub fn fibonacci_sphere(n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            Vec3::new(r * phi.cos(), r * phi.sin(), z)
        })
        .collect()
}

fn tangent_basis(u: &Vec3) -> (Vec3, Vec3) {
    let helper = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (helper - u * u.dot(&helper)).normalize();
    let e2 = u.cross(&e1);
    (e1, e2)
}

/// Riemannian Newton on the unit sphere, falling back to gradient steps when
/// the projected Hessian is indefinite.
pub fn newton_on_sphere(h: &Mat3, g: &Vec3, start: Vec3) -> Vec3 {
    let hs = (h + h.transpose()) * 0.5;
    let mut u = start.normalize();
    for _ in 0..200 {
        let (e1, e2) = tangent_basis(&u);
        let r = hs * u - g;
        let grad = Vector2::new(2.0 * e1.dot(&r), 2.0 * e2.dot(&r));
        let curv = 2.0 * u.dot(&r);
        let hess = Matrix2::new(
            2.0 * e1.dot(&(hs * e1)) - curv,
            2.0 * e1.dot(&(hs * e2)),
            2.0 * e2.dot(&(hs * e1)),
            2.0 * e2.dot(&(hs * e2)) - curv,
        );
        let step = match hess.try_inverse() {
            Some(inv) if hess.symmetric_eigenvalues().min() > 0.0 => -(inv * grad),
            _ => -grad * (0.1 / (hs.norm() + g.norm() + 1e-300)),
        };
        let next = (u + e1 * step.x + e2 * step.y).normalize();
        let done = step.norm() < 1e-15;
        u = next;
        if done {
            break;
        }
    }
    u
}

/// Global minimiser by exhaustive Fibonacci grid search plus local Newton
/// refinement of the best few grid points.
pub fn sphere_search(h: &Mat3, g: &Vec3, c: f64, grid: usize) -> (Vec3, f64) {
    let pts = fibonacci_sphere(grid);
    let mut scored: Vec<(f64, Vec3)> = pts.iter().map(|p| (objective(h, g, c, p), *p)).collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = (Vec3::z(), f64::INFINITY);
    for (_, p) in scored.iter().take(8) {
        let u = newton_on_sphere(h, g, *p);
        let f = objective(h, g, c, &u);
        if f < best.1 {
            best = (u, f);
        }
    }
    best
}

pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    // atan2 form is accurate for tiny angles.
    a.cross(b).norm().atan2(a.dot(b))
}

/// `n` random rotation frames with unit layout vectors and weights in
/// `[0.1, 2]`.
pub fn random_map<R: Rng>(rng: &mut R, n: usize) -> FrameMap {
    let frames: Vec<Mat3> = (0..n).map(|_| random_rotation(rng)).collect();
    let layout: Vec<Vec3> = (0..n).map(|_| random_rotation(rng) * Vec3::z()).collect();
    let weights: Vec<Vec3> = (0..n).map(|_| Vec3::from_fn(|_, _| rng.random_range(0.1..2.0))).collect();
    FrameMap::new(n, 1, frames, layout, weights, vec![true; n]).unwrap()
}

/// PSD `H` from a random 3×k factor plus a small ridge, and a random `g`.
pub fn random_system<R: Rng>(rng: &mut R) -> SolveSystem {
    let a = Mat3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let h = a.transpose() * a + Mat3::identity() * rng.random_range(0.05..0.5);
    let g = Vec3::from_fn(|_, _| rng.random_range(-2.0..2.0));
    SolveSystem::new(h, g)
}

/// Relative magnitude of `det(λ²I − 2Hλ + H² − ggᵀ)`, scaled by `‖Q(λ)‖_F³`.
pub fn qep_residual(h: &Mat3, g: &Vec3, lambda: f64) -> f64 {
    let q = Mat3::identity() * (lambda * lambda) - h * (2.0 * lambda) + h * h - g * g.transpose();
    q.determinant().abs() / q.norm().powi(3).max(1e-300)
}
