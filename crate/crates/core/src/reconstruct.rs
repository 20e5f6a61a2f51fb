//! Absolute-imaging reconstruction: Gauss-Newton on the noise-weighted
//! least-squares functional with a smoothness prior centered at the best
//! homogeneous fit, positivity enforced by a vanishing barrier.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{ContactImpedances, ForwardSolution, StimulationProtocol, jacobian_from_solution, solve_forward};
use crate::geometry::{ElectrodeLayout, Point, PolygonDomain};
use crate::mesh::{Transfer, TriangularMesh, reference_mesh};
use crate::metrics::MeshSpec;
use crate::sampler::{PriorParams, SmoothnessPrior, build_covariance, draw_sample, ellipsoid_target, rescale_into};
use crate::seeds::{STAGE_NOISE, STAGE_SAMPLES, derive_seed};

/// Noise floor relative to the RMS of the measurement vector.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Independent Gaussian noise with standard deviation `eta * |V_i|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub eta: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(eta: f64, seed: u64) -> Result<Self> {
        if !(eta > 0.0 && eta.is_finite()) {
            return Err(Error::Reconstruction(format!("noise level must be positive, got {eta}")));
        }
        Ok(NoiseModel { eta, seed })
    }

    pub fn std_devs(&self, v: &[f64]) -> Vec<f64> {
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len().max(1) as f64).sqrt();
        let floor = NOISE_FLOOR * rms;
        v.iter().map(|x| (self.eta * x.abs()).max(floor).max(f64::MIN_POSITIVE)).collect()
    }

    /// Diagonal of `L_n` with `L_n^T L_n` the noise precision.
    pub fn precision_weights(&self, v: &[f64]) -> Vec<f64> {
        self.std_devs(v).iter().map(|s| 1.0 / s).collect()
    }
}

pub fn add_noise(v: &[f64], noise: &NoiseModel) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    v.iter()
        .zip(noise.std_devs(v))
        .map(|(x, s)| {
            let e: f64 = rng.sample(StandardNormal);
            x + s * e
        })
        .collect()
}

fn weighted_misfit(v: &[f64], u: &[f64], w: &[f64]) -> f64 {
    v.iter().zip(u).zip(w).map(|((a, b), w)| (w * (a - b)).powi(2)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomogeneousFit {
    pub sigma: f64,
    pub misfit: f64,
}

const HOM_SCAN: usize = 41;
const GOLDEN_TOL: f64 = 1e-12;

/// Constant conductivity minimizing the weighted misfit on `[lo, hi]`:
/// log-spaced scan, then golden-section refinement in log space.
pub fn best_homogeneous(
    v_s: &[f64],
    mesh: &TriangularMesh,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
    weights: &[f64],
    bounds: (f64, f64),
) -> Result<HomogeneousFit> {
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Reconstruction(format!("invalid search interval [{lo}, {hi}]")));
    }
    if v_s.iter().any(|x| !x.is_finite()) {
        return Err(Error::Reconstruction("data contain non-finite values".into()));
    }
    let n = mesh.node_count();
    let f = |log_s: f64| -> Result<f64> {
        let u = solve_forward(mesh, &vec![log_s.exp(); n], z, protocol)?.voltages;
        Ok(weighted_misfit(v_s, &u, weights))
    };
    let (a, b) = (lo.ln(), hi.ln());
    let grid: Vec<f64> = (0..HOM_SCAN).map(|i| a + (b - a) * i as f64 / (HOM_SCAN - 1) as f64).collect();
    let vals = grid.iter().map(|&g| f(g)).collect::<Result<Vec<_>>>()?;
    let best = (0..HOM_SCAN).min_by(|&i, &j| vals[i].total_cmp(&vals[j])).unwrap_or(0);
    if best == 0 || best == HOM_SCAN - 1 {
        return Err(Error::Reconstruction(format!(
            "homogeneous minimum not bracketed in [{lo}, {hi}]: misfit {} at lower end, {} at upper end",
            vals[0],
            vals[HOM_SCAN - 1]
        )));
    }
    let (mut x0, mut x3) = (grid[best - 1], grid[best + 1]);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = x3 - ratio * (x3 - x0);
    let mut x2 = x0 + ratio * (x3 - x0);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    while x3 - x0 > GOLDEN_TOL {
        if f1 <= f2 {
            x3 = x2;
            x2 = x1;
            f2 = f1;
            x1 = x3 - ratio * (x3 - x0);
            f1 = f(x1)?;
        } else {
            x0 = x1;
            x1 = x2;
            f1 = f2;
            x2 = x0 + ratio * (x3 - x0);
            f2 = f(x2)?;
        }
    }
    let (x, fx) = if f1 <= f2 { (x1, f1) } else { (x2, f2) };
    Ok(HomogeneousFit { sigma: x.exp(), misfit: fx })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructOptions {
    /// Gauss-Newton iterations per barrier cycle.
    pub max_iterations: usize,
    pub rel_tol: f64,
    pub barrier_cycles: usize,
    /// Initial barrier weight relative to the initial cost.
    pub barrier_initial: f64,
    pub barrier_decay: f64,
    pub max_backtracks: usize,
    pub sigma_bounds: (f64, f64),
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        ReconstructOptions {
            max_iterations: 50,
            rel_tol: 1e-6,
            barrier_cycles: 3,
            barrier_initial: 1e-2,
            barrier_decay: 10.0,
            max_backtracks: 40,
            sigma_bounds: (0.1, 10.0),
        }
    }
}

/// Measured data and the id of the mesh they were simulated on.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasuredData {
    pub values: Vec<f64>,
    pub simulation_mesh_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionResult {
    pub sigma_hat: Vec<f64>,
    pub sigma_hom: f64,
    pub iterations: usize,
    /// Cost after each accepted step, with the current barrier weight.
    pub cost_history: Vec<f64>,
    /// Accepted step lengths.
    pub step_history: Vec<f64>,
    pub final_cost: f64,
    pub stalled: bool,
}

/// `-ln(s/s0) + s/s0 - 1`: nonnegative, zero at `s0`, infinite at 0.
fn barrier(s: f64, s0: f64) -> f64 {
    let q = s / s0;
    -q.ln() + q - 1.0
}

struct CostTerms<'a> {
    v: &'a [f64],
    w: &'a [f64],
    gamma_inv: &'a DMatrix<f64>,
    s0: f64,
    mesh: &'a TriangularMesh,
    z: &'a ContactImpedances,
    protocol: &'a StimulationProtocol,
}

impl CostTerms<'_> {
    fn eval(&self, sigma: &[f64], mu: f64) -> Result<(f64, ForwardSolution)> {
        let sol = solve_forward(self.mesh, sigma, self.z, self.protocol)?;
        let data = weighted_misfit(self.v, &sol.voltages, self.w);
        let d = DVector::from_iterator(sigma.len(), sigma.iter().map(|s| s - self.s0));
        let reg = d.dot(&(self.gamma_inv * &d));
        let n = sigma.len() as f64;
        let bar = if mu > 0.0 {
            mu / n * sigma.iter().map(|&s| barrier(s, self.s0)).sum::<f64>()
        } else {
            0.0
        };
        Ok((data + reg + bar, sol))
    }
}

/// Minimizes `||L_n (V_s - U(sigma))||^2 + ||L_sigma (sigma - sigma_hom)||^2`
/// over positive nodal fields.
pub fn reconstruct(
    data: &MeasuredData,
    mesh: &TriangularMesh,
    prior: &SmoothnessPrior,
    noise: &NoiseModel,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
    opts: &ReconstructOptions,
) -> Result<ReconstructionResult> {
    let mesh_id = mesh.id();
    if data.simulation_mesh_id == mesh_id {
        return Err(Error::Reconstruction(
            "inversion mesh equals the simulation mesh; use a different discretization".into(),
        ));
    }
    if prior.mesh_id != mesh_id {
        return Err(Error::Reconstruction("prior was built on a different mesh".into()));
    }
    let v = &data.values;
    let w = noise.precision_weights(v);
    let hom = best_homogeneous(v, mesh, z, protocol, &w, opts.sigma_bounds)?;
    let n = mesh.node_count();
    let terms = CostTerms {
        v,
        w: &w,
        gamma_inv: &prior.gamma_inv,
        s0: hom.sigma,
        mesh,
        z,
        protocol,
    };
    let mut sigma = vec![hom.sigma; n];
    let (cost0, mut sol) = terms.eval(&sigma, 0.0)?;
    let mu0 = opts.barrier_initial * cost0;
    let mut cost_history = Vec::new();
    let mut step_history = Vec::new();
    let mut iterations = 0;
    let mut stalled = false;
    let mut cost = cost0;
    'cycles: for c in 0..opts.barrier_cycles.max(1) {
        let mu = mu0 / opts.barrier_decay.powi(c as i32);
        // barrier is nonnegative, so lowering its weight never raises the cost
        cost = terms.eval(&sigma, mu)?.0;
        if c == 0 {
            cost_history.push(cost);
        }
        for _ in 0..opts.max_iterations {
            let jac = jacobian_from_solution(mesh, &sol, protocol);
            let wj = DMatrix::from_fn(jac.nrows(), n, |r, col| w[r] * jac[(r, col)]);
            let wr = DVector::from_iterator(v.len(), v.iter().zip(&sol.voltages).zip(&w).map(|((a, b), w)| w * (a - b)));
            let d = DVector::from_iterator(n, sigma.iter().map(|s| s - hom.sigma));
            let mut grad = wj.tr_mul(&wr) * -2.0 + &prior.gamma_inv * &d * 2.0;
            let mut hess = wj.tr_mul(&wj) * 2.0 + &prior.gamma_inv * 2.0;
            for i in 0..n {
                if mu > 0.0 {
                    grad[i] += mu / n as f64 * (1.0 / hom.sigma - 1.0 / sigma[i]);
                    hess[(i, i)] += mu / n as f64 / (sigma[i] * sigma[i]);
                }
                for j in i + 1..n {
                    let s = 0.5 * (hess[(i, j)] + hess[(j, i)]);
                    hess[(i, j)] = s;
                    hess[(j, i)] = s;
                }
            }
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::Factorization("Gauss-Newton matrix is not positive definite".into()))?
                .solve(&(-&grad));
            let slope = grad.dot(&step);
            if !(slope < 0.0) {
                break;
            }
            let mut t: f64 = 1.0;
            for i in 0..n {
                if step[i] < 0.0 {
                    t = t.min(0.9 * sigma[i] / -step[i]);
                }
            }
            let mut accepted = None;
            for _ in 0..opts.max_backtracks {
                let trial: Vec<f64> = sigma.iter().zip(step.iter()).map(|(s, d)| s + t * d).collect();
                if trial.iter().all(|&s| s > 0.0) {
                    let (c_new, s_new) = terms.eval(&trial, mu)?;
                    if !c_new.is_finite() {
                        return Err(Error::Reconstruction(format!("cost became non-finite at iteration {iterations}")));
                    }
                    if c_new <= cost + 1e-4 * t * slope {
                        accepted = Some((trial, c_new, s_new));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((trial, c_new, s_new)) = accepted else {
                stalled = true;
                break 'cycles;
            };
            iterations += 1;
            let rel = (cost - c_new) / cost.abs().max(f64::MIN_POSITIVE);
            sigma = trial;
            sol = s_new;
            cost = c_new;
            cost_history.push(cost);
            step_history.push(t);
            if rel < opts.rel_tol {
                break;
            }
        }
    }
    if let Some(bad) = sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::Reconstruction(format!("non-positive conductivity at node {bad}")));
    }
    Ok(ReconstructionResult {
        sigma_hat: sigma,
        sigma_hom: hom.sigma,
        iterations,
        cost_history,
        step_history,
        final_cost: cost,
        stalled,
    })
}

/// Root-mean-square error of the coarse estimate against the fine truth
/// interpolated to the coarse nodes, in percent of the mean truth.
pub fn rmse(
    sigma_hat: &[f64],
    sigma_true_fine: &[f64],
    fine_mesh: &TriangularMesh,
    coarse_mesh: &TriangularMesh,
) -> Result<f64> {
    let truth = Transfer::new(fine_mesh, coarse_mesh)?.apply(sigma_true_fine)?;
    rmse_nodal(sigma_hat, &truth)
}

pub fn rmse_nodal(sigma_hat: &[f64], truth: &[f64]) -> Result<f64> {
    if sigma_hat.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "estimate has {} values, truth has {}",
            sigma_hat.len(),
            truth.len()
        )));
    }
    let t = truth.len() as f64;
    let mse = truth.iter().zip(sigma_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t;
    let mean = truth.iter().sum::<f64>() / t;
    Ok(100.0 * mse.sqrt() / mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSpec {
    pub center: Point,
    pub semi_axes: (f64, f64),
    pub angle: f64,
    pub background: f64,
    pub inclusion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub fine: MeshSpec,
    pub coarse: MeshSpec,
    pub prior: PriorParams,
    pub z: f64,
    pub amplitude: f64,
    pub noise_levels: Vec<f64>,
    pub ellipse: EllipseSpec,
    pub seed: u64,
    pub options: ReconstructOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub layout: String,
    pub target: String,
    pub eta: f64,
    pub rmse_pct: f64,
    pub sigma_hom: f64,
    pub iterations: usize,
    pub stalled: bool,
    pub min_sigma: f64,
    pub cost_non_increasing: bool,
    #[serde(skip)]
    pub sigma_hat: Vec<f64>,
}

/// Per-layout meshes and truths of a study.
#[derive(Clone, Debug)]
pub struct StudyLayout {
    pub name: String,
    pub fine: TriangularMesh,
    pub coarse: TriangularMesh,
    /// Truth per target on the fine mesh.
    pub truths: Vec<(String, Vec<f64>)>,
}

#[derive(Clone, Debug)]
pub struct StudyOutcome {
    pub cells: Vec<StudyCell>,
    pub layouts: Vec<StudyLayout>,
}

impl StudyOutcome {
    pub fn cell(&self, layout: &str, target: &str, eta: f64) -> Option<&StudyCell> {
        self.cells
            .iter()
            .find(|c| c.layout == layout && c.target == target && c.eta == eta)
    }

    /// RMSE table: one row per layout, one column per (target, noise level).
    pub fn table_csv(&self) -> String {
        let mut cols: Vec<(String, f64)> = Vec::new();
        for c in &self.cells {
            if !cols.iter().any(|(t, e)| *t == c.target && *e == c.eta) {
                cols.push((c.target.clone(), c.eta));
            }
        }
        let mut out = String::from("layout");
        for (t, e) in &cols {
            let _ = write!(out, ",{t}_eta{e}");
        }
        out.push('\n');
        for l in &self.layouts {
            out.push_str(&l.name);
            for (t, e) in &cols {
                let v = self.cell(&l.name, t, *e).map_or(f64::NAN, |c| c.rmse_pct);
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn blob_target(domain: &PolygonDomain, spec: MeshSpec, prior: PriorParams, seed: u64) -> Result<(TriangularMesh, Vec<f64>)> {
    let mesh = reference_mesh(domain, spec.h_max, spec.seed)?;
    let gamma = build_covariance(&mesh, prior)?;
    let s = draw_sample(&gamma, derive_seed(seed, &[STAGE_SAMPLES, 99]), 0);
    Ok((mesh, rescale_into(&s.values, 1.0, 2.0)))
}

/// Reconstructs a blob and an ellipse target for every layout and noise
/// level. Data come from the fine mesh of each layout, inversion runs on the
/// coarse mesh.
pub fn reconstruction_study(
    domain: &PolygonDomain,
    layouts: &[(String, ElectrodeLayout)],
    cfg: &StudyConfig,
) -> Result<StudyOutcome> {
    let (blob_mesh, blob) = blob_target(domain, cfg.fine, cfg.prior, cfg.seed)?;
    let mut prepared = Vec::new();
    for (name, layout) in layouts {
        let fine = cfg.fine.build(domain, layout)?;
        let coarse = cfg.coarse.build(domain, layout)?;
        let e = &cfg.ellipse;
        let ellipse = ellipsoid_target(&fine, e.center, e.semi_axes, e.angle, e.background, e.inclusion)?.values;
        let blob_here = Transfer::new(&blob_mesh, &fine)?.apply(&blob)?;
        prepared.push(StudyLayout {
            name: name.clone(),
            fine,
            coarse,
            truths: vec![("blob".into(), blob_here), ("ellipse".into(), ellipse)],
        });
    }
    let mut jobs = Vec::new();
    for (li, l) in prepared.iter().enumerate() {
        for ti in 0..l.truths.len() {
            for (ni, &eta) in cfg.noise_levels.iter().enumerate() {
                jobs.push((li, ti, ni, eta));
            }
        }
    }
    let priors = prepared
        .iter()
        .map(|l| build_covariance(&l.coarse, cfg.prior))
        .collect::<Result<Vec<_>>>()?;
    let cells = jobs
        .par_iter()
        .map(|&(li, ti, ni, eta)| {
            let l = &prepared[li];
            let k = layouts[li].1.k();
            let protocol = StimulationProtocol::new(k, cfg.amplitude)?;
            let z = ContactImpedances::uniform(k, cfg.z)?;
            let (target, truth) = &l.truths[ti];
            let clean = solve_forward(&l.fine, truth, &z, &protocol)?.voltages;
            let noise = NoiseModel::new(eta, derive_seed(cfg.seed, &[STAGE_NOISE, ti as u64, ni as u64]))?;
            let data = MeasuredData {
                values: add_noise(&clean, &noise),
                simulation_mesh_id: l.fine.id(),
            };
            let res = reconstruct(&data, &l.coarse, &priors[li], &noise, &z, &protocol, &cfg.options)?;
            Ok(StudyCell {
                layout: l.name.clone(),
                target: target.clone(),
                eta,
                rmse_pct: rmse(&res.sigma_hat, truth, &l.fine, &l.coarse)?,
                sigma_hom: res.sigma_hom,
                iterations: res.iterations,
                stalled: res.stalled,
                min_sigma: res.sigma_hat.iter().cloned().fold(f64::INFINITY, f64::min),
                cost_non_increasing: res.cost_history.windows(2).all(|w| w[1] <= w[0]),
                sigma_hat: res.sigma_hat,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyOutcome { cells, layouts: prepared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::uniform_layout;
    use crate::mesh::generate_mesh;

    fn setup(h: f64) -> (PolygonDomain, TriangularMesh, StimulationProtocol, ContactImpedances) {
        let d = PolygonDomain::square(1.0);
        let l = uniform_layout(&d, &[2, 2, 2, 2], 0.1).unwrap();
        let m = generate_mesh(&d, &l, h, h / 2.0, 1).unwrap();
        (d, m, StimulationProtocol::new(8, 1.0).unwrap(), ContactImpedances::uniform(8, 0.01).unwrap())
    }

    #[test]
    fn noise_statistics_and_determinism() {
        let v: Vec<f64> = (0..10_000).map(|i| 0.5 + (i % 17) as f64 * 0.1).collect();
        let noise = NoiseModel::new(0.05, 7).unwrap();
        let a = add_noise(&v, &noise);
        assert_eq!(a, add_noise(&v, &noise));
        assert_ne!(a, add_noise(&v, &NoiseModel::new(0.05, 8).unwrap()));
        let rel: Vec<f64> = a.iter().zip(&v).map(|(x, y)| (x - y) / y.abs()).collect();
        let mean = rel.iter().sum::<f64>() / rel.len() as f64;
        let sd = (rel.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (rel.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() <= 0.05 * 0.05, "{sd}");
        // as eta vanishes only the absolute floor remains
        let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let tiny = add_noise(&v, &NoiseModel::new(1e-15, 1).unwrap());
        for (x, y) in tiny.iter().zip(&v) {
            assert!((x - y).abs() <= 6.0 * NOISE_FLOOR * rms);
        }
        assert!(NoiseModel::new(0.0, 1).is_err());
    }

    #[test]
    fn homogeneous_fit_recovers_constant() {
        let (_, m, p, z) = setup(0.25);
        let c = 1.7;
        let v = solve_forward(&m, &vec![c; m.node_count()], &z, &p).unwrap().voltages;
        let w = NoiseModel::new(0.01, 0).unwrap().precision_weights(&v);
        let fit = best_homogeneous(&v, &m, &z, &p, &w, (0.1, 10.0)).unwrap();
        assert!((fit.sigma - c).abs() <= 1e-6 * c, "{}", fit.sigma);
        assert!(best_homogeneous(&v, &m, &z, &p, &w, (3.0, 10.0)).is_err());
    }

    #[test]
    fn homogeneous_fit_matches_grid_scan() {
        let (_, m, p, z) = setup(0.25);
        let sigma: Vec<f64> = m.nodes.iter().map(|q| 1.0 + q.x + 0.5 * q.y).collect();
        let v = add_noise(
            &solve_forward(&m, &sigma, &z, &p).unwrap().voltages,
            &NoiseModel::new(0.05, 3).unwrap(),
        );
        let w = NoiseModel::new(0.05, 3).unwrap().precision_weights(&v);
        let fit = best_homogeneous(&v, &m, &z, &p, &w, (0.1, 10.0)).unwrap();
        let n = m.node_count();
        let cell = (10.0 - 0.1) / 999.0;
        let best = (0..1000)
            .map(|i| {
                let s = 0.1 + cell * i as f64;
                let u = solve_forward(&m, &vec![s; n], &z, &p).unwrap().voltages;
                (s, weighted_misfit(&v, &u, &w))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!((fit.sigma - best.0).abs() <= cell, "{} vs {}", fit.sigma, best.0);
        assert!(fit.misfit <= best.1);
    }

    #[test]
    fn rmse_formulas() {
        let (_, m, _, _) = setup(0.25);
        let n = m.node_count();
        let truth: Vec<f64> = m.nodes.iter().map(|q| 1.0 + q.x).collect();
        assert_eq!(rmse(&truth, &truth, &m, &m).unwrap(), 0.0);
        let c = vec![2.0; n];
        let off: Vec<f64> = c.iter().map(|v| v + 0.1).collect();
        assert!((rmse_nodal(&off, &c).unwrap() - 5.0).abs() <= 1e-12);
        let est: Vec<f64> = truth.iter().enumerate().map(|(i, v)| v + 0.01 * (i % 5) as f64).collect();
        let mut sq = 0.0;
        for i in 0..n {
            sq += (truth[i] - est[i]) * (truth[i] - est[i]);
        }
        let want = 100.0 * (sq / n as f64).sqrt() / (truth.iter().sum::<f64>() / n as f64);
        assert!((rmse_nodal(&est, &truth).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn reconstruction_from_homogeneous_data_stays_put() {
        let d = PolygonDomain::square(1.0);
        let l = uniform_layout(&d, &[2, 2, 2, 2], 0.1).unwrap();
        let fine = generate_mesh(&d, &l, 0.15, 0.075, 2).unwrap();
        let coarse = generate_mesh(&d, &l, 0.25, 0.125, 1).unwrap();
        let p = StimulationProtocol::new(8, 1.0).unwrap();
        let z = ContactImpedances::uniform(8, 0.01).unwrap();
        let prior = build_covariance(&coarse, PriorParams::default_for(d.diameter())).unwrap();
        // homogeneous data simulated on the inversion mesh itself, tagged as foreign
        let v = solve_forward(&coarse, &vec![1.3; coarse.node_count()], &z, &p).unwrap().voltages;
        let noise = NoiseModel::new(0.01, 0).unwrap();
        let data = MeasuredData { values: v, simulation_mesh_id: fine.id() };
        let res = reconstruct(&data, &coarse, &prior, &noise, &z, &p, &ReconstructOptions::default()).unwrap();
        assert!((res.sigma_hom - 1.3).abs() <= 1e-6);
        assert!(res.sigma_hat.iter().all(|s| (s - res.sigma_hom).abs() <= 0.01 * res.sigma_hom));
        let crime = MeasuredData { values: data.values.clone(), simulation_mesh_id: coarse.id() };
        assert!(reconstruct(&crime, &coarse, &prior, &noise, &z, &p, &ReconstructOptions::default()).is_err());
    }

    #[test]
    fn reconstruction_improves_on_homogeneous_guess() {
        let d = PolygonDomain::square(1.0);
        let l = uniform_layout(&d, &[3, 3, 3, 3], 0.075).unwrap();
        let fine = generate_mesh(&d, &l, 0.04, 0.02, 2).unwrap();
        let coarse = generate_mesh(&d, &l, 0.075, 0.0375, 1).unwrap();
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 0.01).unwrap();
        let truth: Vec<f64> = fine
            .nodes
            .iter()
            .map(|q| 1.0 + 0.8 * (-((q.x - 0.3).powi(2) + (q.y - 0.6).powi(2)) / 0.05).exp())
            .collect();
        let clean = solve_forward(&fine, &truth, &z, &p).unwrap().voltages;
        let noise = NoiseModel::new(0.01, 4).unwrap();
        let data = MeasuredData { values: add_noise(&clean, &noise), simulation_mesh_id: fine.id() };
        let prior = build_covariance(&coarse, PriorParams::default_for(d.diameter())).unwrap();
        let res = reconstruct(&data, &coarse, &prior, &noise, &z, &p, &ReconstructOptions::default()).unwrap();
        assert!(res.cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert!(res.sigma_hat.iter().all(|&s| s > 0.0));
        let hom = vec![res.sigma_hom; coarse.node_count()];
        let e_hat = rmse(&res.sigma_hat, &truth, &fine, &coarse).unwrap();
        let e_hom = rmse(&hom, &truth, &fine, &coarse).unwrap();
        assert!(e_hat < e_hom, "{e_hat} vs {e_hom}");
    }
}
