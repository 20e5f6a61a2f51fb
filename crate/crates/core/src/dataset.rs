//! Training data: random layouts, random conductivities, and for every pair
//! the objective vector (Hessian condition number, one-step Gauss-Newton
//! misfit).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    ContactImpedances, StimulationProtocol, hessian, jacobian_from_solution, solve_forward,
};
use crate::geometry::{ElectrodeLayout, PolygonDomain, place_random_electrodes};
use crate::linalg::condition_number;
use crate::mesh::{Transfer, TriangularMesh, generate_mesh};
use crate::sampler::{PriorParams, SmoothnessPrior, build_covariance, draw_samples};
use crate::seeds::{STAGE_LAYOUT, STAGE_MESH, STAGE_SAMPLES, derive_seed};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub kappa: f64,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussNewtonStep {
    pub sigma0: f64,
    pub sigma_hat: Vec<f64>,
    pub beta: f64,
}

/// Arithmetic mean; exact for constant fields.
pub fn field_mean(values: &[f64]) -> f64 {
    let first = values[0];
    if values.iter().all(|&v| v == first) {
        return first;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// `(J^T J + Gamma^{-1})^{-1} J^T r`, evaluated in the equivalent
/// measurement-space form `Gamma J^T (J Gamma J^T + I)^{-1} r`.
pub fn regularized_step(j: &DMatrix<f64>, gamma: &DMatrix<f64>, r: &[f64]) -> Result<Vec<f64>> {
    let jg = j * gamma;
    let mut s = &jg * j.transpose();
    let m = s.nrows();
    for i in 0..m {
        s[(i, i)] += 1.0;
        for c in i + 1..m {
            s[(i, c)] = s[(c, i)];
        }
    }
    let y = s
        .cholesky()
        .ok_or_else(|| Error::Factorization("J Gamma J^T + I is not positive definite".into()))?
        .solve(&DVector::from_column_slice(r));
    Ok((jg.transpose() * y).iter().copied().collect())
}

/// One Gauss-Newton step from the constant field at the mean of
/// `sigma_true`, given the data `v_true = U(sigma_true)`.
pub fn gauss_newton_from_data(
    mesh: &TriangularMesh,
    sigma_true: &[f64],
    v_true: &[f64],
    prior: &SmoothnessPrior,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<GaussNewtonStep> {
    let sigma0 = field_mean(sigma_true);
    let homogeneous = vec![sigma0; mesh.node_count()];
    let sol0 = solve_forward(mesh, &homogeneous, z, protocol)?;
    let r: Vec<f64> = v_true.iter().zip(&sol0.voltages).map(|(a, b)| a - b).collect();
    let sigma_hat: Vec<f64> = if r.iter().all(|&x| x == 0.0) {
        homogeneous
    } else {
        let j0 = jacobian_from_solution(mesh, &sol0, protocol);
        let delta = regularized_step(&j0, &prior.gamma, &r)?;
        delta.iter().map(|d| sigma0 + d).collect()
    };
    let beta = sigma_true
        .iter()
        .zip(&sigma_hat)
        .map(|(t, h)| (t - h).powi(2))
        .sum();
    Ok(GaussNewtonStep {
        sigma0,
        sigma_hat,
        beta,
    })
}

pub fn one_step_gauss_newton(
    mesh: &TriangularMesh,
    sigma_true: &[f64],
    prior: &SmoothnessPrior,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<GaussNewtonStep> {
    let v = solve_forward(mesh, sigma_true, z, protocol)?.voltages;
    gauss_newton_from_data(mesh, sigma_true, &v, prior, z, protocol)
}

/// Condition number of `H(sigma_true)` and the one-step misfit.
pub fn compute_objective(
    mesh: &TriangularMesh,
    sigma_true: &[f64],
    prior: &SmoothnessPrior,
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<ObjectiveVector> {
    let sol = solve_forward(mesh, sigma_true, z, protocol)?;
    let kappa = condition_number(&hessian(&jacobian_from_solution(mesh, &sol, protocol)));
    let step = gauss_newton_from_data(mesh, sigma_true, &sol.voltages, prior, z, protocol)?;
    Ok(ObjectiveVector {
        kappa,
        beta: step.beta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub domain: PolygonDomain,
    pub per_side: Vec<usize>,
    pub width: f64,
    pub min_gap: f64,
    pub n_layouts: usize,
    pub n_samples: usize,
    pub h_max: f64,
    pub h_min: f64,
    pub prior: PriorParams,
    pub z: f64,
    pub amplitude: f64,
    pub seed: u64,
    pub max_resamples: usize,
}

impl DatasetConfig {
    pub fn k(&self) -> usize {
        self.per_side.iter().sum()
    }

    pub fn protocol(&self) -> Result<StimulationProtocol> {
        StimulationProtocol::new(self.k(), self.amplitude)
    }

    pub fn impedances(&self) -> Result<ContactImpedances> {
        ContactImpedances::uniform(self.k(), self.z)
    }

    fn layout_attempt(&self, i: usize, attempt: usize) -> Result<(ElectrodeLayout, TriangularMesh)> {
        let ls = derive_seed(self.seed, &[STAGE_LAYOUT, i as u64, attempt as u64]);
        let ms = derive_seed(self.seed, &[STAGE_MESH, i as u64, attempt as u64]);
        let layout = place_random_electrodes(&self.domain, &self.per_side, self.width, self.min_gap, ls)?;
        let mesh = generate_mesh(&self.domain, &layout, self.h_max, self.h_min, ms)?;
        Ok((layout, mesh))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub geometry_id: String,
    pub protocol: String,
    pub sample_mesh_id: String,
    /// Attempt index that produced each layout block.
    pub layout_attempts: Vec<usize>,
    pub mesh_ids: Vec<String>,
    pub sentinel_columns: usize,
    pub notes: Vec<String>,
}

/// Stacked layouts and objective vectors, in blocks of `n_samples` columns
/// sharing one layout.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSet {
    /// 2k x (n_layouts * n_samples).
    pub e_bar: DMatrix<f64>,
    /// 2 x (n_layouts * n_samples), rows kappa and beta.
    pub theta_bar: DMatrix<f64>,
    pub manifest: DatasetManifest,
}

struct LayoutBlock {
    layout: ElectrodeLayout,
    mesh_id: String,
    attempt: usize,
    objectives: Vec<ObjectiveVector>,
    notes: Vec<String>,
}

fn evaluate_block(
    cfg: &DatasetConfig,
    i: usize,
    sample_mesh: &TriangularMesh,
    samples: &[Vec<f64>],
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<LayoutBlock> {
    let mut notes = Vec::new();
    let mut last_err = None;
    for attempt in 0..=cfg.max_resamples {
        let run = || -> Result<(ElectrodeLayout, String, Vec<ObjectiveVector>)> {
            let (layout, mesh) = cfg.layout_attempt(i, attempt)?;
            let prior = build_covariance(&mesh, cfg.prior)?;
            let transfer = if mesh.id() == sample_mesh.id() {
                None
            } else {
                Some(Transfer::new(sample_mesh, &mesh)?)
            };
            let objectives = samples
                .par_iter()
                .map(|s| {
                    let sigma = match &transfer {
                        None => s.clone(),
                        Some(t) => t.apply(s)?,
                    };
                    compute_objective(&mesh, &sigma, &prior, z, protocol)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((layout, mesh.id(), objectives))
        };
        match run() {
            Ok((layout, mesh_id, objectives)) => {
                return Ok(LayoutBlock {
                    layout,
                    mesh_id,
                    attempt,
                    objectives,
                    notes,
                });
            }
            Err(e) => {
                let msg = format!("layout {i} attempt {attempt} failed: {e}");
                eprintln!("{msg}");
                notes.push(msg);
                last_err = Some(e);
            }
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Mesh(format!("layout {i} failed"))))
}

/// Generates random layouts and evaluates every conductivity sample on each.
/// Samples are drawn once on the first layout's mesh and interpolated onto
/// the meshes of all layouts; the covariance is rebuilt on every mesh.
pub fn build_training_set(cfg: &DatasetConfig) -> Result<TrainingSet> {
    if cfg.n_layouts == 0 || cfg.n_samples == 0 {
        return Err(Error::config("dataset", "n_layouts and n_samples must be at least 1"));
    }
    let protocol = cfg.protocol()?;
    let z = cfg.impedances()?;
    // carrier mesh for the samples: first layout attempt that meshes
    let mut carrier = None;
    let mut notes = Vec::new();
    for attempt in 0..=cfg.max_resamples {
        match cfg.layout_attempt(0, attempt) {
            Ok((_, mesh)) => {
                carrier = Some(mesh);
                break;
            }
            Err(e) => notes.push(format!("layout 0 attempt {attempt} failed to mesh: {e}")),
        }
    }
    let sample_mesh = carrier.ok_or_else(|| Error::Mesh(notes.join("; ")))?;
    let prior0 = build_covariance(&sample_mesh, cfg.prior)?;
    let samples: Vec<Vec<f64>> = draw_samples(&prior0, cfg.n_samples, derive_seed(cfg.seed, &[STAGE_SAMPLES]))
        .into_iter()
        .map(|s| s.values)
        .collect();
    drop(prior0);

    let blocks = (0..cfg.n_layouts)
        .into_par_iter()
        .map(|i| evaluate_block(cfg, i, &sample_mesh, &samples, &z, &protocol))
        .collect::<Result<Vec<_>>>()?;

    let k = cfg.k();
    let cols = cfg.n_layouts * cfg.n_samples;
    let mut e_bar = DMatrix::zeros(2 * k, cols);
    let mut theta_bar = DMatrix::zeros(2, cols);
    let mut sentinel = 0;
    for (b, block) in blocks.iter().enumerate() {
        for (s, obj) in block.objectives.iter().enumerate() {
            let c = b * cfg.n_samples + s;
            e_bar.column_mut(c).copy_from_slice(block.layout.midpoints());
            theta_bar[(0, c)] = obj.kappa;
            theta_bar[(1, c)] = obj.beta;
            if !obj.kappa.is_finite() {
                sentinel += 1;
            }
        }
        notes.extend(block.notes.iter().cloned());
    }
    if sentinel > 0 {
        notes.push(format!("{sentinel} columns carry the infinite condition-number sentinel"));
    }
    Ok(TrainingSet {
        e_bar,
        theta_bar,
        manifest: DatasetManifest {
            config: cfg.clone(),
            geometry_id: cfg.domain.id(),
            protocol: protocol.id(),
            sample_mesh_id: sample_mesh.id(),
            layout_attempts: blocks.iter().map(|b| b.attempt).collect(),
            mesh_ids: blocks.iter().map(|b| b.mesh_id.clone()).collect(),
            sentinel_columns: sentinel,
            notes,
        },
    })
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

pub fn matrix_from_csv(text: &str, file: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                file: file.to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line: i + 1,
                    message: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, |r| r.len());
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub const E_BAR_FILE: &str = "E_bar.csv";
pub const THETA_BAR_FILE: &str = "Theta_bar.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

impl TrainingSet {
    pub fn columns(&self) -> usize {
        self.e_bar.ncols()
    }

    pub fn k(&self) -> usize {
        self.e_bar.nrows() / 2
    }

    /// (kappa, beta) inputs and layout outputs of the columns whose kappa is
    /// finite, plus the number of excluded columns.
    pub fn usable_columns(&self) -> (Vec<[f64; 2]>, Vec<Vec<f64>>, usize) {
        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        let mut excluded = 0;
        for c in 0..self.columns() {
            let (kappa, beta) = (self.theta_bar[(0, c)], self.theta_bar[(1, c)]);
            if kappa.is_finite() && beta.is_finite() {
                inputs.push([kappa, beta]);
                outputs.push(self.e_bar.column(c).iter().copied().collect());
            } else {
                excluded += 1;
            }
        }
        (inputs, outputs, excluded)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(E_BAR_FILE), matrix_to_csv(&self.e_bar))?;
        std::fs::write(dir.join(THETA_BAR_FILE), matrix_to_csv(&self.theta_bar))?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<(String, String)> {
            let p = dir.join(name);
            Ok((std::fs::read_to_string(&p)?, p.display().to_string()))
        };
        let (e, ef) = read(E_BAR_FILE)?;
        let (t, tf) = read(THETA_BAR_FILE)?;
        let (m, _) = read(MANIFEST_FILE)?;
        let set = TrainingSet {
            e_bar: matrix_from_csv(&e, &ef)?,
            theta_bar: matrix_from_csv(&t, &tf)?,
            manifest: serde_json::from_str(&m)?,
        };
        if set.theta_bar.nrows() != 2 || set.theta_bar.ncols() != set.e_bar.ncols() {
            return Err(Error::Dimension(format!(
                "Theta_bar is {}x{} but E_bar has {} columns",
                set.theta_bar.nrows(),
                set.theta_bar.ncols(),
                set.e_bar.ncols()
            )));
        }
        Ok(set)
    }
}
