//! Smooth random conductivity fields from an exponential covariance, and
//! deterministic inclusion targets.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::mesh::TriangularMesh;

/// Samples are floored at this fraction of their own mean.
pub const POSITIVITY_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    /// Variance scale.
    pub a: f64,
    /// Correlation length.
    pub b: f64,
    /// Nugget added to the diagonal.
    pub c: f64,
}

impl PriorParams {
    /// `a = 0.2`, `b = 0.2 * diameter`, `c = 0.01 * a`.
    pub fn default_for(diameter: f64) -> Self {
        let a = 0.2;
        PriorParams {
            a,
            b: 0.2 * diameter,
            c: 0.01 * a,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SmoothnessPrior {
    pub params: PriorParams,
    pub gamma: DMatrix<f64>,
    pub gamma_inv: DMatrix<f64>,
    /// Upper-triangular `L` with `L^T L = gamma_inv`.
    pub l: DMatrix<f64>,
    pub mesh_id: String,
}

pub fn covariance_entry(p: &PriorParams, xi: Point, xj: Point, same: bool) -> f64 {
    p.a * (-xi.dist(xj) / (2.0 * p.b)).exp() + if same { p.c } else { 0.0 }
}

pub fn build_covariance(mesh: &TriangularMesh, params: PriorParams) -> Result<SmoothnessPrior> {
    let PriorParams { a, b, c } = params;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Dimension(format!("prior needs a, b, c > 0, got ({a}, {b}, {c})")));
    }
    let n = mesh.node_count();
    let gamma = DMatrix::from_fn(n, n, |i, j| covariance_entry(&params, mesh.nodes[i], mesh.nodes[j], i == j));
    let chol = gamma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("covariance is not positive definite".into()))?;
    let mut gamma_inv = chol.inverse();
    gamma_inv = (&gamma_inv + gamma_inv.transpose()) * 0.5;
    let g = gamma_inv
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Factorization("inverse covariance is not positive definite".into()))?;
    Ok(SmoothnessPrior {
        params,
        gamma,
        gamma_inv,
        l: g.l().transpose(),
        mesh_id: mesh.id(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConductivitySample {
    pub values: Vec<f64>,
    pub mesh_id: String,
}

/// `L^{-1} r` with `r` uniform on (0, 1], before the positivity floor.
pub fn raw_sample(prior: &SmoothnessPrior, r: &[f64]) -> Vec<f64> {
    let x = prior
        .l
        .solve_upper_triangular(&DVector::from_column_slice(r))
        .expect("L has a positive diagonal");
    x.iter().copied().collect()
}

/// Clamps values below `POSITIVITY_FLOOR * mean` up to that floor.
pub fn apply_floor(values: &mut [f64]) {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let floor = POSITIVITY_FLOOR * mean.abs().max(f64::MIN_POSITIVE);
    for v in values {
        if !(*v >= floor) {
            *v = floor;
        }
    }
}

pub fn uniform_vector(seed: u64, index: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    (0..n).map(|_| 1.0 - rng.random::<f64>()).collect()
}

/// Sample `index` of the stream identified by `seed`.
pub fn draw_sample(prior: &SmoothnessPrior, seed: u64, index: u64) -> ConductivitySample {
    let r = uniform_vector(seed, index, prior.gamma.nrows());
    let mut values = raw_sample(prior, &r);
    apply_floor(&mut values);
    ConductivitySample {
        values,
        mesh_id: prior.mesh_id.clone(),
    }
}

pub fn draw_samples(prior: &SmoothnessPrior, n: usize, seed: u64) -> Vec<ConductivitySample> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| draw_sample(prior, seed, i))
        .collect()
}

/// Affine rescale of a field so its range becomes the middle 98% of `[lo, hi]`.
pub fn rescale_into(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (a, b) = (lo + 0.01 * (hi - lo), hi - 0.01 * (hi - lo));
    if max - min <= 0.0 {
        return vec![0.5 * (a + b); values.len()];
    }
    values.iter().map(|v| a + (b - a) * (v - min) / (max - min)).collect()
}

/// Piecewise-constant target: nodes inside the rotated ellipse get
/// `inclusion`, all others `background`.
pub fn ellipsoid_target(
    mesh: &TriangularMesh,
    center: Point,
    semi_axes: (f64, f64),
    angle: f64,
    background: f64,
    inclusion: f64,
) -> Result<ConductivitySample> {
    if !(background > 0.0 && inclusion > 0.0) {
        return Err(Error::Dimension("ellipse conductivities must be positive".into()));
    }
    let (ra, rb) = semi_axes;
    let (s, c) = angle.sin_cos();
    let values = mesh
        .nodes
        .iter()
        .map(|p| {
            if ra <= 0.0 || rb <= 0.0 {
                return background;
            }
            let d = p.sub(center);
            let u = (c * d.x + s * d.y) / ra;
            let v = (-s * d.x + c * d.y) / rb;
            if u * u + v * v <= 1.0 { inclusion } else { background }
        })
        .collect();
    Ok(ConductivitySample {
        values,
        mesh_id: mesh.id(),
    })
}

impl ConductivitySample {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# mesh {}\nnode,value\n", self.mesh_id);
        for (i, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{i},{v}");
        }
        out
    }

    pub fn from_csv(text: &str, file: &str) -> Result<Self> {
        let mut mesh_id = String::new();
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if let Some(id) = line.strip_prefix("# mesh ") {
                mesh_id = id.trim().to_string();
                continue;
            }
            if line.starts_with('#') || line.starts_with("node") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let node: Option<usize> = parts.next().and_then(|s| s.trim().parse().ok());
            let value: Option<f64> = parts.next().and_then(|s| s.trim().parse().ok());
            match (node, value) {
                (Some(n), Some(v)) if n == values.len() => values.push(v),
                _ => {
                    return Err(Error::Parse {
                        file: file.to_string(),
                        line: i + 1,
                        message: "expected `node,value` in node order".into(),
                    });
                }
            }
        }
        Ok(ConductivitySample { values, mesh_id })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, &path.display().to_string())
    }
}
