//! Complete electrode model on linear triangles: assembly, forward solves,
//! adjoint sensitivities and the Gauss-Newton Hessian.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{EnvelopeCholesky, SymmetricSparse, rcm_ordering};
use crate::mesh::TriangularMesh;

/// Adjacent-pair measurements with every electrode driven against electrode 0.
///
/// Injection `j` (for `j = 0..k-1`) sends `+amplitude` into electrode `j + 1`
/// and `-amplitude` into electrode 0. For each injection, measurement `i`
/// is `U_i - U_{(i+1) mod k}`, so row `j * k + i` of the data vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StimulationProtocol {
    pub k: usize,
    pub amplitude: f64,
}

impl StimulationProtocol {
    pub fn new(k: usize, amplitude: f64) -> Result<Self> {
        if k < 2 {
            return Err(Error::Dimension(format!("need at least 2 electrodes, got {k}")));
        }
        if !(amplitude.is_finite() && amplitude > 0.0) {
            return Err(Error::Dimension(format!("injection amplitude must be positive, got {amplitude}")));
        }
        Ok(StimulationProtocol { k, amplitude })
    }

    pub fn injection_count(&self) -> usize {
        self.k - 1
    }

    pub fn measurement_count(&self) -> usize {
        self.k * (self.k - 1)
    }

    /// k x (k-1) matrix of electrode currents, one column per injection.
    pub fn currents(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.k, self.k - 1);
        for j in 0..self.k - 1 {
            m[(j + 1, j)] = self.amplitude;
            m[(0, j)] = -self.amplitude;
        }
        m
    }

    /// Applies the measurement operator to k x (k-1) electrode potentials.
    pub fn measure(&self, electrode_potentials: &DMatrix<f64>) -> Vec<f64> {
        let k = self.k;
        let mut v = Vec::with_capacity(self.measurement_count());
        for j in 0..k - 1 {
            for i in 0..k {
                v.push(electrode_potentials[(i, j)] - electrode_potentials[((i + 1) % k, j)]);
            }
        }
        v
    }

    pub fn id(&self) -> String {
        format!("adjacent-vs-e0/k{}/amp{}", self.k, self.amplitude)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContactImpedances(Vec<f64>);

impl ContactImpedances {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some((l, v)) = z.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::Dimension(format!("contact impedance {l} must be positive, got {v}")));
        }
        Ok(ContactImpedances(z))
    }

    pub fn uniform(k: usize, z: f64) -> Result<Self> {
        Self::new(vec![z; k])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Area and basis-function gradients of one triangle.
#[derive(Clone, Copy, Debug)]
pub struct ElementGeometry {
    pub area: f64,
    pub grad: [[f64; 2]; 3],
}

pub fn element_geometry(mesh: &TriangularMesh, t: usize) -> ElementGeometry {
    let [a, b, c] = mesh.triangles[t].map(|i| mesh.nodes[i]);
    let twice = b.sub(a).cross(c.sub(a));
    let p = [a, b, c];
    let mut grad = [[0.0; 2]; 3];
    for i in 0..3 {
        let (q, r) = (p[(i + 1) % 3], p[(i + 2) % 3]);
        grad[i] = [(q.y - r.y) / twice, (r.x - q.x) / twice];
    }
    ElementGeometry {
        area: 0.5 * twice,
        grad,
    }
}

pub(crate) fn check_sigma(mesh: &TriangularMesh, sigma: &[f64]) -> Result<()> {
    if sigma.len() != mesh.node_count() {
        return Err(Error::Dimension(format!(
            "conductivity has {} values for {} nodes",
            sigma.len(),
            mesh.node_count()
        )));
    }
    if let Some((node, &value)) = sigma.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::NonPositiveConductivity { node, value });
    }
    Ok(())
}

/// Assembled CEM system for one (mesh, conductivity, contact impedance).
///
/// `full` is the (n + k) square system over nodal potentials and electrode
/// potentials. `grounded` restricts electrode potentials to the zero-sum
/// subspace `U = N beta`, with column `m` of `N` equal to `e_0 - e_{m+1}`;
/// it is symmetric positive definite and is the matrix R(sigma) whose inverse
/// maps currents to potentials.
#[derive(Clone, Debug)]
pub struct CemSystem {
    pub n_nodes: usize,
    pub k: usize,
    pub full: SymmetricSparse,
    pub grounded: SymmetricSparse,
}

impl CemSystem {
    pub fn resistivity_matrix(&self) -> DMatrix<f64> {
        self.grounded.to_dense()
    }
}

pub fn assemble_system(mesh: &TriangularMesh, sigma: &[f64], z: &ContactImpedances) -> Result<CemSystem> {
    check_sigma(mesh, sigma)?;
    let n = mesh.node_count();
    let k = mesh.electrode_count();
    if z.len() != k {
        return Err(Error::Dimension(format!("{} contact impedances for {k} electrodes", z.len())));
    }
    let mut full = SymmetricSparse::new(n + k);
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let g = element_geometry(mesh, t);
        let s = (sigma[tri[0]] + sigma[tri[1]] + sigma[tri[2]]) / 3.0;
        for i in 0..3 {
            for j in 0..3 {
                let v = s * g.area * (g.grad[i][0] * g.grad[j][0] + g.grad[i][1] * g.grad[j][1]);
                full.add(tri[i], tri[j], v);
            }
        }
    }
    for (l, edges) in mesh.electrode_edges.iter().enumerate() {
        let zl = z.values()[l];
        for &[a, b] in edges {
            let len = mesh.nodes[a].dist(mesh.nodes[b]);
            full.add(a, a, len / (3.0 * zl));
            full.add(b, b, len / (3.0 * zl));
            full.add_sym(a, b, len / (6.0 * zl));
            full.add_sym(a, n + l, -len / (2.0 * zl));
            full.add_sym(b, n + l, -len / (2.0 * zl));
            full.add(n + l, n + l, len / zl);
        }
    }
    if k < 2 {
        return Err(Error::Dimension(format!("need at least 2 electrodes, mesh has {k}")));
    }
    let mut grounded = SymmetricSparse::new(n + k - 1);
    for i in 0..n {
        for &(c, v) in full.row(i) {
            if c < n {
                grounded.add(i, c, v);
            }
        }
        let c0 = full.get(i, n);
        for m in 0..k - 1 {
            let v = c0 - full.get(i, n + m + 1);
            if v != 0.0 {
                grounded.add_sym(i, n + m, v);
            }
        }
    }
    let d0 = full.get(n, n);
    for m in 0..k - 1 {
        for m2 in 0..k - 1 {
            let mut v = d0;
            if m == m2 {
                v += full.get(n + m + 1, n + m + 1);
            }
            grounded.add(n + m, n + m2, v);
        }
    }
    Ok(CemSystem {
        n_nodes: n,
        k,
        full,
        grounded,
    })
}

/// Factorized CEM system, reusable for any number of current patterns.
pub struct CemSolver {
    n: usize,
    k: usize,
    matrix: SymmetricSparse,
    factor: EnvelopeCholesky,
}

const REFINEMENT_STEPS: usize = 2;

impl CemSolver {
    pub fn new(system: &CemSystem) -> Result<Self> {
        let perm = rcm_ordering(&system.grounded, system.n_nodes);
        let factor = EnvelopeCholesky::factor(&system.grounded, perm)?;
        Ok(CemSolver {
            n: system.n_nodes,
            k: system.k,
            matrix: system.grounded.clone(),
            factor,
        })
    }

    /// Nodal and electrode potentials for electrode currents `currents`
    /// (which must sum to zero). Electrode potentials sum to zero.
    pub fn solve_pattern(&self, currents: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (n, k) = (self.n, self.k);
        if currents.len() != k {
            return Err(Error::Dimension(format!("{} currents for {k} electrodes", currents.len())));
        }
        let total: f64 = currents.iter().sum();
        let scale: f64 = currents.iter().map(|c| c.abs()).sum();
        if total.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Dimension(format!("currents must sum to zero, got {total}")));
        }
        let mut rhs = vec![0.0; n + k - 1];
        for m in 0..k - 1 {
            rhs[n + m] = currents[0] - currents[m + 1];
        }
        let mut x = self.factor.solve(&rhs);
        // refinement with an extended-precision residual recovers the accuracy
        // lost to the large 1/z electrode terms
        for _ in 0..REFINEMENT_STEPS {
            let r = self.matrix.residual_compensated(&x, &rhs);
            let dx = self.factor.solve(&r);
            x.iter_mut().zip(&dx).for_each(|(xi, d)| *xi += d);
        }
        let beta = &x[n..];
        let mut u = vec![0.0; k];
        u[0] = beta.iter().sum();
        for m in 0..k - 1 {
            u[m + 1] = -beta[m];
        }
        Ok((x[..n].to_vec(), u))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardSolution {
    pub voltages: Vec<f64>,
    /// k x (k-1), one column per injection.
    pub electrode_potentials: DMatrix<f64>,
    /// nodes x (k-1), one column per injection.
    pub interior_potentials: DMatrix<f64>,
}

pub fn solve_with(solver: &CemSolver, protocol: &StimulationProtocol) -> Result<ForwardSolution> {
    let k = protocol.k;
    if solver.k != k {
        return Err(Error::Dimension(format!("protocol for {k} electrodes, mesh has {}", solver.k)));
    }
    let currents = protocol.currents();
    let mut electrode = DMatrix::zeros(k, k - 1);
    let mut interior = DMatrix::zeros(solver.n, k - 1);
    for j in 0..k - 1 {
        let col: Vec<f64> = currents.column(j).iter().copied().collect();
        let (u, e) = solver.solve_pattern(&col)?;
        interior.column_mut(j).copy_from_slice(&u);
        electrode.column_mut(j).copy_from_slice(&e);
    }
    Ok(ForwardSolution {
        voltages: protocol.measure(&electrode),
        electrode_potentials: electrode,
        interior_potentials: interior,
    })
}

pub fn solve_forward(
    mesh: &TriangularMesh,
    sigma: &[f64],
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<ForwardSolution> {
    let system = assemble_system(mesh, sigma, z)?;
    solve_with(&CemSolver::new(&system)?, protocol)
}

/// Sensitivity of the measurements to nodal conductivities, from an
/// existing forward solution. Uses the fact that the adjoint field of the
/// pair (i, i+1) is the difference of the injection fields of electrodes i
/// and i+1, scaled by 1/amplitude.
pub fn jacobian_from_solution(
    mesh: &TriangularMesh,
    solution: &ForwardSolution,
    protocol: &StimulationProtocol,
) -> DMatrix<f64> {
    let k = protocol.k;
    let n = mesh.node_count();
    let mut jac = DMatrix::zeros(protocol.measurement_count(), n);
    let u = &solution.interior_potentials;
    // field gradients for electrodes 0..k, electrode 0 carries the zero field
    let mut grads = vec![[0.0f64; 2]; k];
    let mut gram = vec![0.0f64; k * k];
    let mut contrib = vec![0.0f64; protocol.measurement_count()];
    for (t, tri) in mesh.triangles.iter().enumerate() {
        let g = element_geometry(mesh, t);
        for a in 1..k {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for v in 0..3 {
                let val = u[(tri[v], a - 1)];
                gx += val * g.grad[v][0];
                gy += val * g.grad[v][1];
            }
            grads[a] = [gx, gy];
        }
        for a in 0..k {
            for b in 0..k {
                gram[a * k + b] = grads[a][0] * grads[b][0] + grads[a][1] * grads[b][1];
            }
        }
        let w = -g.area / 3.0 / protocol.amplitude;
        for j in 0..k - 1 {
            for i in 0..k {
                let ip = (i + 1) % k;
                contrib[j * k + i] = w * (gram[i * k + j + 1] - gram[ip * k + j + 1]);
            }
        }
        for &p in tri {
            let mut col = jac.column_mut(p);
            for (c, v) in col.iter_mut().zip(&contrib) {
                *c += v;
            }
        }
    }
    jac
}

pub fn jacobian(
    mesh: &TriangularMesh,
    sigma: &[f64],
    z: &ContactImpedances,
    protocol: &StimulationProtocol,
) -> Result<DMatrix<f64>> {
    let sol = solve_forward(mesh, sigma, z, protocol)?;
    Ok(jacobian_from_solution(mesh, &sol, protocol))
}

/// Gauss-Newton Hessian `J^T J`, exactly symmetric.
pub fn hessian(j: &DMatrix<f64>) -> DMatrix<f64> {
    let mut h = j.transpose() * j;
    let n = h.nrows();
    for c in 0..n {
        for r in c + 1..n {
            h[(c, r)] = h[(r, c)];
        }
    }
    h
}

/// Voltage vector as CSV in measurement order.
pub fn voltages_to_csv(v: &[f64], protocol: &StimulationProtocol) -> String {
    let mut out = String::from("index,injection,pair,voltage\n");
    for (r, val) in v.iter().enumerate() {
        let _ = writeln!(out, "{},{},{},{}", r, r / protocol.k, r % protocol.k, val);
    }
    out
}

pub fn voltages_from_csv(text: &str, file: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.rsplit(',')
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    file: file.to_string(),
                    line: i + 1,
                    message: "expected a numeric voltage in the last column".into(),
                })
        })
        .collect()
}

pub fn write_voltages(path: &Path, v: &[f64], protocol: &StimulationProtocol) -> Result<()> {
    std::fs::write(path, voltages_to_csv(v, protocol))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point, PolygonDomain, uniform_layout};
    use crate::linalg::condition_number;
    use crate::mesh::generate_mesh;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square(h: f64) -> TriangularMesh {
        let d = PolygonDomain::square(1.0);
        let l = uniform_layout(&d, &[3, 3, 3, 3], 0.075).unwrap();
        generate_mesh(&d, &l, h, h / 2.0, 0).unwrap()
    }

    fn smooth_sigma(mesh: &TriangularMesh) -> Vec<f64> {
        mesh.nodes
            .iter()
            .map(|p| 1.0 + 0.5 * (3.0 * p.x).sin() * (2.0 * p.y).cos())
            .collect()
    }

    /// Unit square split along its diagonal, one electrode on the bottom edge
    /// and one on the top edge.
    fn two_triangle_mesh() -> TriangularMesh {
        TriangularMesh {
            nodes: vec![
                Point::new(0.0, 0.0),
                Point::new(1.0, 0.0),
                Point::new(1.0, 1.0),
                Point::new(0.0, 1.0),
            ],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
            electrode_edges: vec![vec![[0, 1]], vec![[2, 3]]],
            h_max: 1.5,
            h_min: 1.0,
        }
    }

    #[test]
    fn two_triangle_assembly_matches_hand_computation() {
        let mesh = two_triangle_mesh();
        let sigma = [1.0, 2.0, 3.0, 4.0];
        let z = ContactImpedances::new(vec![0.5, 0.25]).unwrap();
        let sys = assemble_system(&mesh, &sigma, &z).unwrap();
        // hand assembly: triangle 0 = (0,0),(1,0),(1,1), mean sigma 2
        // gradients (-1,0),(1,-1),(0,1), area 1/2
        // triangle 1 = (0,0),(1,1),(0,1), mean sigma 8/3
        // gradients (0,-1),(1,0),(-1,1), area 1/2
        let mut b = [[0.0f64; 4]; 4];
        let tris: [([usize; 3], f64, [[f64; 2]; 3]); 2] = [
            ([0, 1, 2], 2.0, [[-1.0, 0.0], [1.0, -1.0], [0.0, 1.0]]),
            ([0, 2, 3], 8.0 / 3.0, [[0.0, -1.0], [1.0, 0.0], [-1.0, 1.0]]),
        ];
        for (t, s, g) in tris {
            for i in 0..3 {
                for j in 0..3 {
                    b[t[i]][t[j]] += s * 0.5 * (g[i][0] * g[j][0] + g[i][1] * g[j][1]);
                }
            }
        }
        let mut full = [[0.0f64; 6]; 6];
        for i in 0..4 {
            for j in 0..4 {
                full[i][j] = b[i][j];
            }
        }
        // electrode 0 on edge 0-1 (length 1, z 0.5), electrode 1 on edge 2-3 (length 1, z 0.25)
        for (l, (a, c), zl) in [(0usize, (0usize, 1usize), 0.5), (1, (2, 3), 0.25)] {
            full[a][a] += 1.0 / (3.0 * zl);
            full[c][c] += 1.0 / (3.0 * zl);
            full[a][c] += 1.0 / (6.0 * zl);
            full[c][a] += 1.0 / (6.0 * zl);
            for p in [a, c] {
                full[p][4 + l] -= 1.0 / (2.0 * zl);
                full[4 + l][p] -= 1.0 / (2.0 * zl);
            }
            full[4 + l][4 + l] += 1.0 / zl;
        }
        for i in 0..6 {
            for j in 0..6 {
                assert!(
                    (sys.full.get(i, j) - full[i][j]).abs() <= 1e-14,
                    "({i},{j}) {} vs {}",
                    sys.full.get(i, j),
                    full[i][j]
                );
            }
        }
        // grounded with N = [1, -1]^T
        let n = [1.0, -1.0];
        for i in 0..4 {
            let want = full[i][4] * n[0] + full[i][5] * n[1];
            assert!((sys.grounded.get(i, 4) - want).abs() <= 1e-14);
        }
        let want = n[0] * n[0] * full[4][4] + n[1] * n[1] * full[5][5];
        assert!((sys.grounded.get(4, 4) - want).abs() <= 1e-14);
    }

    #[test]
    fn system_is_symmetric_and_positive_definite() {
        let mesh = square(0.15);
        let sigma = vec![1.0; mesh.node_count()];
        let z = ContactImpedances::uniform(12, 1e-5).unwrap();
        let sys = assemble_system(&mesh, &sigma, &z).unwrap();
        let a = sys.resistivity_matrix();
        assert!((&a - a.transpose()).amax() <= 1e-12 * a.amax());
        assert!(a.cholesky().is_some());
    }

    #[test]
    fn doubling_sigma_and_halving_z_doubles_system() {
        let mesh = square(0.15);
        let sigma = smooth_sigma(&mesh);
        let z = ContactImpedances::uniform(12, 0.01).unwrap();
        let s2: Vec<f64> = sigma.iter().map(|s| 2.0 * s).collect();
        let z2 = ContactImpedances::uniform(12, 0.005).unwrap();
        let a = assemble_system(&mesh, &sigma, &z).unwrap().full.to_dense();
        let b = assemble_system(&mesh, &s2, &z2).unwrap().full.to_dense();
        assert_eq!(b, a * 2.0);
    }

    #[test]
    fn rejects_nonpositive_sigma() {
        let mesh = two_triangle_mesh();
        let z = ContactImpedances::uniform(2, 1.0).unwrap();
        assert!(matches!(
            assemble_system(&mesh, &[1.0, 0.0, 1.0, 1.0], &z),
            Err(Error::NonPositiveConductivity { node: 1, .. })
        ));
    }

    #[test]
    fn joint_scaling_law() {
        let mesh = square(0.1);
        let sigma = smooth_sigma(&mesh);
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 1e-2).unwrap();
        let v = solve_forward(&mesh, &sigma, &z, &p).unwrap().voltages;
        let c = 3.0;
        let sc: Vec<f64> = sigma.iter().map(|s| c * s).collect();
        let zc = ContactImpedances::uniform(12, 1e-2 / c).unwrap();
        let vc = solve_forward(&mesh, &sc, &zc, &p).unwrap().voltages;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, b) in v.iter().zip(&vc) {
            assert!((a / c - b).abs() <= 1e-10 * norm);
        }
    }

    #[test]
    fn measurement_operator_reproduces_voltages() {
        let mesh = square(0.15);
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 1e-5).unwrap();
        let sol = solve_forward(&mesh, &smooth_sigma(&mesh), &z, &p).unwrap();
        assert_eq!(p.measure(&sol.electrode_potentials), sol.voltages);
        assert_eq!(sol.voltages.len(), 132);
        for j in 0..11 {
            let s: f64 = sol.electrode_potentials.column(j).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn reciprocity_on_random_pairs() {
        let mesh = square(0.1);
        let sigma = smooth_sigma(&mesh);
        let z = ContactImpedances::uniform(12, 1e-3).unwrap();
        let solver = CemSolver::new(&assemble_system(&mesh, &sigma, &z).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let drive = |a: usize, b: usize| {
            let mut c = vec![0.0; 12];
            c[a] = 1.0;
            c[b] = -1.0;
            solver.solve_pattern(&c).unwrap().1
        };
        for _ in 0..20 {
            let idx: Vec<usize> = rand::seq::index::sample(&mut rng, 12, 4).into_vec();
            let (a, b, c, d) = (idx[0], idx[1], idx[2], idx[3]);
            let u1 = drive(a, b);
            let u2 = drive(c, d);
            let m1 = u1[c] - u1[d];
            let m2 = u2[a] - u2[b];
            assert!((m1 - m2).abs() <= 1e-8 * m1.abs().max(m2.abs()), "{m1} vs {m2}");
        }
    }

    #[test]
    fn rotated_mesh_gives_rotated_measurements() {
        let mesh = square(0.1);
        let sigma = smooth_sigma(&mesh);
        let z = ContactImpedances::uniform(12, 1e-3).unwrap();
        let mut rot = mesh.clone();
        for p in &mut rot.nodes {
            *p = Point::new(1.0 - p.y, p.x);
        }
        let s1 = CemSolver::new(&assemble_system(&mesh, &sigma, &z).unwrap()).unwrap();
        let s2 = CemSolver::new(&assemble_system(&rot, &sigma, &z).unwrap()).unwrap();
        let mut c = vec![0.0; 12];
        c[2] = 1.0;
        c[7] = -1.0;
        let u1 = s1.solve_pattern(&c).unwrap().1;
        let u2 = s2.solve_pattern(&c).unwrap().1;
        for i in 0..12 {
            assert!((u1[i] - u2[i]).abs() <= 1e-8 * u1[i].abs().max(1e-3));
        }
    }

    #[test]
    fn homogeneous_square_is_nearly_rotation_symmetric() {
        // the mesh itself is not symmetric, so agreement is only up to discretization
        let mesh = square(0.05);
        let sigma = vec![1.0; mesh.node_count()];
        let z = ContactImpedances::uniform(12, 1e-3).unwrap();
        let solver = CemSolver::new(&assemble_system(&mesh, &sigma, &z).unwrap()).unwrap();
        let transfer = |a: usize, b: usize, c: usize, d: usize| {
            let mut cur = vec![0.0; 12];
            cur[a] = 1.0;
            cur[b] = -1.0;
            let u = solver.solve_pattern(&cur).unwrap().1;
            u[c] - u[d]
        };
        let t0 = transfer(0, 1, 2, 3);
        let t1 = transfer(3, 4, 5, 6);
        assert!((t0 - t1).abs() < 2e-2 * t0.abs(), "{t0} vs {t1}");
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mesh = square(0.15);
        let sigma = smooth_sigma(&mesh);
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 1e-3).unwrap();
        let j = jacobian(&mesh, &sigma, &z, &p).unwrap();
        assert_eq!(j.shape(), (132, mesh.node_count()));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let r = rng.random_range(0..132);
            let c = rng.random_range(0..mesh.node_count());
            let h = 1e-6 * sigma[c];
            let mut sp = sigma.clone();
            sp[c] += h;
            let mut sm = sigma.clone();
            sm[c] -= h;
            let vp = solve_forward(&mesh, &sp, &z, &p).unwrap().voltages[r];
            let vm = solve_forward(&mesh, &sm, &z, &p).unwrap().voltages[r];
            let fd = (vp - vm) / (2.0 * h);
            let scale = j.row(r).amax();
            assert!((fd - j[(r, c)]).abs() <= 1e-4 * j[(r, c)].abs().max(1e-3 * scale), "{fd} vs {}", j[(r, c)]);
        }
    }

    #[test]
    fn hessian_of_small_matrix() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h = hessian(&j);
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[35.0, 44.0, 44.0, 56.0]));
    }

    #[test]
    fn hessian_is_symmetric_psd() {
        let mesh = square(0.15);
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 1e-5).unwrap();
        let h = hessian(&jacobian(&mesh, &smooth_sigma(&mesh), &z, &p).unwrap());
        assert!((&h - h.transpose()).amax() <= 1e-12 * h.amax());
        let ev = h.clone().symmetric_eigenvalues();
        assert!(ev.min() >= -1e-10 * ev.max());
        assert!(condition_number(&h) >= 1.0);
    }

    #[test]
    fn refinement_converges_monotonically() {
        let p = StimulationProtocol::new(12, 1.0).unwrap();
        let z = ContactImpedances::uniform(12, 1e-3).unwrap();
        let reference = square(0.02);
        let vref = solve_forward(&reference, &smooth_sigma(&reference), &z, &p).unwrap().voltages;
        let mut errs = Vec::new();
        for h in [0.15, 0.075, 0.0375] {
            let m = square(h);
            let v = solve_forward(&m, &smooth_sigma(&m), &z, &p).unwrap().voltages;
            errs.push(v.iter().zip(&vref).map(|(a, b)| (a - b).abs()).sum::<f64>());
        }
        assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
    }

    #[test]
    fn voltage_csv_round_trip() {
        let p = StimulationProtocol::new(3, 1.0).unwrap();
        let v = vec![0.1, -0.2, 0.3, 1e-17, 5.0, -6.25];
        let text = voltages_to_csv(&v, &p);
        assert_eq!(voltages_from_csv(&text, "mem").unwrap(), v);
    }
}
