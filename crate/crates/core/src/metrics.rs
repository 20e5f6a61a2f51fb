//! Layout quality measures computed independently of training: mean
//! fine-minus-coarse modeling error, mean condition numbers of the
//! Gauss-Newton Hessian and the resistivity matrix, and distinguishability.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    CemSolver, ContactImpedances, StimulationProtocol, assemble_system, hessian, jacobian_from_solution,
    solve_forward, solve_with,
};
use crate::geometry::{ElectrodeLayout, PolygonDomain};
use crate::linalg::condition_number;
use crate::mesh::{Transfer, TriangularMesh, generate_mesh, reference_mesh};
use crate::sampler::{PriorParams, build_covariance, draw_samples, rescale_into};
use crate::seeds::{STAGE_DISTINGUISH, STAGE_METRICS, derive_seed};

/// Mesh-size parameters and mesher seed for one discretization level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshSpec {
    pub h_max: f64,
    pub h_min: f64,
    pub seed: u64,
}

impl MeshSpec {
    pub fn build(&self, domain: &PolygonDomain, layout: &ElectrodeLayout) -> Result<TriangularMesh> {
        generate_mesh(domain, layout, self.h_max, self.h_min, self.seed)
    }

    /// Same seed, both sizes scaled by `f`.
    pub fn scaled(&self, f: f64) -> MeshSpec {
        MeshSpec {
            h_max: self.h_max * f,
            h_min: self.h_min * f,
            seed: self.seed,
        }
    }
}

/// Conductivity fields on a layout-independent reference mesh, so that
/// every compared layout sees the same fields.
#[derive(Clone, Debug)]
pub struct FieldSet {
    pub mesh: TriangularMesh,
    pub fields: Vec<Vec<f64>>,
}

impl FieldSet {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    fn onto(&self, dst: &TriangularMesh) -> Result<Vec<Vec<f64>>> {
        let t = Transfer::new(&self.mesh, dst)?;
        self.fields.iter().map(|f| t.apply(f)).collect()
    }
}

/// Blob-like samples drawn on a reference mesh of size `h_ref`.
pub fn metric_samples(domain: &PolygonDomain, h_ref: f64, prior: PriorParams, n: usize, seed: u64) -> Result<FieldSet> {
    let mesh = reference_mesh(domain, h_ref, derive_seed(seed, &[STAGE_METRICS, 0]))?;
    let gamma = build_covariance(&mesh, prior)?;
    let fields = draw_samples(&gamma, n, derive_seed(seed, &[STAGE_METRICS, 1]))
        .into_iter()
        .map(|s| s.values)
        .collect();
    Ok(FieldSet { mesh, fields })
}

/// Mean over the samples of `U_fine(sigma) - U_coarse(sigma)` for one layout.
#[allow(clippy::too_many_arguments)]
pub fn mean_modeling_error(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    samples: &FieldSet,
    coarse: MeshSpec,
    fine: MeshSpec,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<Vec<f64>> {
    if fine.h_max > coarse.h_max {
        return Err(Error::Mesh(format!(
            "fine mesh size {} exceeds coarse mesh size {}",
            fine.h_max, coarse.h_max
        )));
    }
    if samples.is_empty() {
        return Err(Error::Dimension("no samples".into()));
    }
    let mc = coarse.build(domain, layout)?;
    let mf = fine.build(domain, layout)?;
    let sc = samples.onto(&mc)?;
    let sf = samples.onto(&mf)?;
    let diffs = sc
        .par_iter()
        .zip(sf.par_iter())
        .map(|(c, f)| {
            let uc = solve_forward(&mc, c, z, protocol)?.voltages;
            let uf = solve_forward(&mf, f, z, protocol)?.voltages;
            Ok(uf.iter().zip(&uc).map(|(a, b)| a - b).collect::<Vec<f64>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mu = vec![0.0; protocol.measurement_count()];
    for d in &diffs {
        for (m, v) in mu.iter_mut().zip(d) {
            *m += v;
        }
    }
    let n = diffs.len() as f64;
    mu.iter_mut().for_each(|m| *m /= n);
    Ok(mu)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMeans {
    pub kappa_h_mean: f64,
    pub kappa_r_mean: f64,
    /// Samples whose condition number hit the infinite sentinel.
    pub excluded_h: usize,
    pub excluded_r: usize,
}

/// `(kappa(H), kappa(R))` for one field on one mesh.
pub fn condition_numbers(
    mesh: &TriangularMesh,
    sigma: &[f64],
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<(f64, f64)> {
    let system = assemble_system(mesh, sigma, z)?;
    let kr = condition_number(&system.resistivity_matrix());
    let sol = solve_with(&CemSolver::new(&system)?, protocol)?;
    let kh = condition_number(&hessian(&jacobian_from_solution(mesh, &sol, protocol)));
    Ok((kh, kr))
}

fn finite_mean(values: impl Iterator<Item = f64>) -> (f64, usize) {
    let (mut sum, mut n, mut bad) = (0.0, 0usize, 0usize);
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        } else {
            bad += 1;
        }
    }
    (if n > 0 { sum / n as f64 } else { f64::INFINITY }, bad)
}

/// Mean condition numbers over the samples on the layout's mesh.
pub fn mean_condition_numbers(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    samples: &FieldSet,
    spec: MeshSpec,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<ConditionMeans> {
    if samples.is_empty() {
        return Err(Error::Dimension("no samples".into()));
    }
    let mesh = spec.build(domain, layout)?;
    let fields = samples.onto(&mesh)?;
    let pairs = fields
        .par_iter()
        .map(|s| condition_numbers(&mesh, s, z, protocol))
        .collect::<Result<Vec<_>>>()?;
    let (kappa_h_mean, excluded_h) = finite_mean(pairs.iter().map(|p| p.0));
    let (kappa_r_mean, excluded_r) = finite_mean(pairs.iter().map(|p| p.1));
    if excluded_h + excluded_r > 0 {
        eprintln!("excluded {excluded_h} Hessian and {excluded_r} resistivity condition numbers at the sentinel");
    }
    Ok(ConditionMeans {
        kappa_h_mean,
        kappa_r_mean,
        excluded_h,
        excluded_r,
    })
}

/// `||U(sigma1 + delta) - U(sigma1)||^2`.
pub fn distinguishability(
    mesh: &TriangularMesh,
    sigma1: &[f64],
    delta: &[f64],
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<f64> {
    if sigma1.len() != delta.len() {
        return Err(Error::Dimension(format!(
            "sigma1 has {} values, delta has {}",
            sigma1.len(),
            delta.len()
        )));
    }
    let sigma2: Vec<f64> = sigma1.iter().zip(delta).map(|(a, b)| a + b).collect();
    let u1 = solve_forward(mesh, sigma1, z, protocol)?.voltages;
    let u2 = solve_forward(mesh, &sigma2, z, protocol)?.voltages;
    Ok(u1.iter().zip(&u2).map(|(a, b)| (b - a).powi(2)).sum())
}

/// Settings shared by every quality evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub coarse: MeshSpec,
    pub fine: MeshSpec,
    pub prior: PriorParams,
    pub n_samples: usize,
    pub z: f64,
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayoutQualityReport {
    pub layout_id: String,
    pub geometry_id: String,
    pub mu: Vec<f64>,
    pub mu_l1: f64,
    pub kappa_h_mean: f64,
    pub kappa_r_mean: f64,
    pub kappa_excluded: usize,
    pub n_samples: usize,
}

pub fn evaluate_layout(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    samples: &FieldSet,
    cfg: &MetricConfig,
) -> Result<LayoutQualityReport> {
    let protocol = StimulationProtocol::new(layout.k(), cfg.amplitude)?;
    let z = ContactImpedances::uniform(layout.k(), cfg.z)?;
    let mu = mean_modeling_error(domain, layout, samples, cfg.coarse, cfg.fine, &z, &protocol)?;
    let kappa = mean_condition_numbers(domain, layout, samples, cfg.coarse, &z, &protocol)?;
    Ok(LayoutQualityReport {
        layout_id: layout.id(),
        geometry_id: domain.id(),
        mu_l1: mu.iter().map(|v| v.abs()).sum(),
        mu,
        kappa_h_mean: kappa.kappa_h_mean,
        kappa_r_mean: kappa.kappa_r_mean,
        kappa_excluded: kappa.excluded_h + kappa.excluded_r,
        n_samples: samples.len(),
    })
}

/// Pairs `(sigma1, delta)` with both fields rescaled into `(1, 2)`.
pub fn distinguish_pairs(domain: &PolygonDomain, h_ref: f64, prior: PriorParams, n: usize, seed: u64) -> Result<(FieldSet, FieldSet)> {
    let mesh = reference_mesh(domain, h_ref, derive_seed(seed, &[STAGE_DISTINGUISH, 0]))?;
    let gamma = build_covariance(&mesh, prior)?;
    let draws = draw_samples(&gamma, 2 * n, derive_seed(seed, &[STAGE_DISTINGUISH, 1]));
    let (mut s1, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, d) in draws.into_iter().enumerate() {
        let f = rescale_into(&d.values, 1.0, 2.0);
        if i % 2 == 0 { s1.push(f) } else { ds.push(f) }
    }
    Ok((
        FieldSet { mesh: mesh.clone(), fields: s1 },
        FieldSet { mesh, fields: ds },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguishLevel {
    pub h_max: f64,
    pub delta_a: Vec<f64>,
    pub delta_b: Vec<f64>,
    /// Fraction of pairs where layout B has the larger value, ties count half.
    pub win_rate_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistinguishReport {
    pub layout_a: String,
    pub layout_b: String,
    pub n_pairs: usize,
    pub levels: Vec<DistinguishLevel>,
}

pub fn win_rate(a: &[f64], b: &[f64]) -> f64 {
    let score: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| if y > x { 1.0 } else if y == x { 0.5 } else { 0.0 })
        .sum();
    score / a.len().max(1) as f64
}

fn deltas_on(
    domain: &PolygonDomain,
    layout: &ElectrodeLayout,
    spec: MeshSpec,
    pairs: &(FieldSet, FieldSet),
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<Vec<f64>> {
    let mesh = spec.build(domain, layout)?;
    let s1 = pairs.0.onto(&mesh)?;
    let ds = pairs.1.onto(&mesh)?;
    s1.par_iter()
        .zip(ds.par_iter())
        .map(|(a, d)| distinguishability(&mesh, a, d, z, protocol))
        .collect()
}

/// Distinguishability of layouts A and B over shared field pairs at each
/// mesh level.
pub fn distinguish_study(
    domain: &PolygonDomain,
    layout_a: &ElectrodeLayout,
    layout_b: &ElectrodeLayout,
    pairs: &(FieldSet, FieldSet),
    levels: &[MeshSpec],
    z: f64,
    amplitude: f64,
) -> Result<DistinguishReport> {
    if layout_a.k() != layout_b.k() {
        return Err(Error::Dimension("layouts have different electrode counts".into()));
    }
    let protocol = StimulationProtocol::new(layout_a.k(), amplitude)?;
    let zc = ContactImpedances::uniform(layout_a.k(), z)?;
    let mut out = Vec::new();
    for &spec in levels {
        let delta_a = deltas_on(domain, layout_a, spec, pairs, &zc, &protocol)?;
        let delta_b = deltas_on(domain, layout_b, spec, pairs, &zc, &protocol)?;
        out.push(DistinguishLevel {
            h_max: spec.h_max,
            win_rate_b: win_rate(&delta_a, &delta_b),
            delta_a,
            delta_b,
        });
    }
    Ok(DistinguishReport {
        layout_a: layout_a.id(),
        layout_b: layout_b.id(),
        n_pairs: pairs.0.len(),
        levels: out,
    })
}

/// Layout A (reference) against layout B (candidate).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub a: LayoutQualityReport,
    pub b: LayoutQualityReport,
    /// `||mu_a||_1 / ||mu_b||_1`.
    pub mu_ratio: f64,
    /// Percent reduction of the mean Hessian condition number from A to B.
    pub kappa_h_reduction_pct: f64,
    pub kappa_r_reduction_pct: f64,
    pub distinguish: Option<DistinguishReport>,
}

pub fn reduction_pct(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else { 100.0 * (a - b) / a }
}

pub fn compare(a: LayoutQualityReport, b: LayoutQualityReport, distinguish: Option<DistinguishReport>) -> ComparisonReport {
    let mu_ratio = if a.mu_l1 == b.mu_l1 { 1.0 } else { a.mu_l1 / b.mu_l1 };
    ComparisonReport {
        mu_ratio,
        kappa_h_reduction_pct: reduction_pct(a.kappa_h_mean, b.kappa_h_mean),
        kappa_r_reduction_pct: reduction_pct(a.kappa_r_mean, b.kappa_r_mean),
        a,
        b,
        distinguish,
    }
}

impl ComparisonReport {
    /// Per-measurement mean modeling errors of both layouts.
    pub fn mu_csv(&self, protocol: &StimulationProtocol) -> String {
        let k = protocol.k;
        let mut out = String::from("index,injection,pair,mu_a,mu_b\n");
        for (r, (x, y)) in self.a.mu.iter().zip(&self.b.mu).enumerate() {
            let _ = writeln!(out, "{},{},{},{x},{y}", r + 1, r / k + 1, r % k + 1);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,a,b,change\n");
        let _ = writeln!(out, "mu_l1,{},{},{}", self.a.mu_l1, self.b.mu_l1, self.mu_ratio);
        let _ = writeln!(
            out,
            "kappa_h_mean,{},{},{}",
            self.a.kappa_h_mean, self.b.kappa_h_mean, self.kappa_h_reduction_pct
        );
        let _ = writeln!(
            out,
            "kappa_r_mean,{},{},{}",
            self.a.kappa_r_mean, self.b.kappa_r_mean, self.kappa_r_reduction_pct
        );
        if let Some(d) = &self.distinguish {
            for l in &d.levels {
                let _ = writeln!(out, "delta_win_rate_h{},,,{}", l.h_max, l.win_rate_b);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_layout;

    fn square_setup() -> (PolygonDomain, ElectrodeLayout, StimulationProtocol, ContactImpedances) {
        let d = PolygonDomain::square(1.0);
        let l = uniform_layout(&d, &[2, 2, 2, 2], 0.1).unwrap();
        (d, l, StimulationProtocol::new(8, 1.0).unwrap(), ContactImpedances::uniform(8, 0.01).unwrap())
    }

    fn spec(h: f64) -> MeshSpec {
        MeshSpec { h_max: h, h_min: h / 2.0, seed: 3 }
    }

    #[test]
    fn identical_meshes_give_zero_error() {
        let (d, l, p, z) = square_setup();
        let s = metric_samples(&d, 0.2, PriorParams::default_for(d.diameter()), 3, 1).unwrap();
        let mu = mean_modeling_error(&d, &l, &s, spec(0.2), spec(0.2), &z, &p).unwrap();
        assert!(mu.iter().all(|&v| v == 0.0));
        assert_eq!(mu.len(), p.measurement_count());
    }

    #[test]
    fn error_is_order_invariant_and_shrinks_with_refinement() {
        let (d, l, p, z) = square_setup();
        let s = metric_samples(&d, 0.1, PriorParams::default_for(d.diameter()), 4, 2).unwrap();
        let mu = mean_modeling_error(&d, &l, &s, spec(0.2), spec(0.1), &z, &p).unwrap();
        let mut rev = s.clone();
        rev.fields.reverse();
        let mu_rev = mean_modeling_error(&d, &l, &rev, spec(0.2), spec(0.1), &z, &p).unwrap();
        for (a, b) in mu.iter().zip(&mu_rev) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-12));
        }
        let l1 = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
        let levels = [0.2, 0.1, 0.05];
        let norms: Vec<f64> = levels
            .windows(2)
            .map(|w| l1(&mean_modeling_error(&d, &l, &s, spec(w[0]), spec(w[1]), &z, &p).unwrap()))
            .collect();
        assert!(norms[1] < norms[0], "{norms:?}");
    }

    #[test]
    fn single_sample_means_equal_values() {
        let (d, l, p, z) = square_setup();
        let s = metric_samples(&d, 0.2, PriorParams::default_for(d.diameter()), 1, 5).unwrap();
        let m = mean_condition_numbers(&d, &l, &s, spec(0.2), &z, &p).unwrap();
        let mesh = spec(0.2).build(&d, &l).unwrap();
        let f = s.onto(&mesh).unwrap();
        let (kh, kr) = condition_numbers(&mesh, &f[0], &z, &p).unwrap();
        assert_eq!((m.kappa_h_mean, m.kappa_r_mean), (kh, kr));
        assert!(kh > 1.0 && kr > 1.0);
    }

    #[test]
    fn distinguishability_basics() {
        let (d, l, p, z) = square_setup();
        let mesh = spec(0.2).build(&d, &l).unwrap();
        let n = mesh.node_count();
        let s1: Vec<f64> = mesh.nodes.iter().map(|q| 1.0 + 0.5 * q.x).collect();
        let ds: Vec<f64> = mesh.nodes.iter().map(|q| 1.0 + q.y * q.y).collect();
        assert_eq!(distinguishability(&mesh, &s1, &vec![0.0; n], &z, &p).unwrap(), 0.0);
        let fwd = distinguishability(&mesh, &s1, &ds, &z, &p).unwrap();
        let s2: Vec<f64> = s1.iter().zip(&ds).map(|(a, b)| a + b).collect();
        let neg: Vec<f64> = ds.iter().map(|v| -v).collect();
        let back = distinguishability(&mesh, &s2, &neg, &z, &p).unwrap();
        assert!(fwd > 0.0);
        assert!((fwd - back).abs() <= 1e-12 * fwd);
    }

    #[test]
    fn self_comparison_is_neutral() {
        let (d, l, _, _) = square_setup();
        let cfg = MetricConfig {
            coarse: spec(0.2),
            fine: spec(0.1),
            prior: PriorParams::default_for(d.diameter()),
            n_samples: 2,
            z: 0.01,
            amplitude: 1.0,
            seed: 4,
        };
        let s = metric_samples(&d, 0.2, cfg.prior, 2, cfg.seed).unwrap();
        let r = evaluate_layout(&d, &l, &s, &cfg).unwrap();
        let pairs = distinguish_pairs(&d, 0.2, cfg.prior, 3, 1).unwrap();
        for f in pairs.0.fields.iter().chain(&pairs.1.fields) {
            assert!(f.iter().all(|&v| v > 1.0 && v < 2.0));
        }
        let dr = distinguish_study(&d, &l, &l, &pairs, &[spec(0.2)], 0.01, 1.0).unwrap();
        let c = compare(r.clone(), r, Some(dr));
        assert_eq!(c.mu_ratio, 1.0);
        assert_eq!(c.kappa_h_reduction_pct, 0.0);
        assert_eq!(c.kappa_r_reduction_pct, 0.0);
        assert_eq!(c.distinguish.unwrap().levels[0].win_rate_b, 0.5);
    }

    #[test]
    fn win_rate_counts() {
        assert_eq!(win_rate(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 3.0, 5.0]), 0.625);
    }
}
