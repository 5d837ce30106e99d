//! Global assembly of the per-step operators on a P2 space.
//!
//! The velocity `z` of a step minimizes
//! `int dW(grad y) : grad z + 2c |sym(grad y^T grad z)|^2 - loads(z)`,
//! i.e. solves `K z = b` with
//! `K_ij = int c Phi_i : Phi_j`, `Phi_i = grad phi_i^T grad y + grad y^T grad phi_i`,
//! `b_i = -int dW(grad y) : grad phi_i + int f . phi_i + int_{Gamma_N} g . phi_i`.
//!
//! Element blocks are computed in parallel and scattered in element order,
//! so results do not depend on the thread count.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fem::{p2_triangle_values, triangle_quadrature, DeformationField, FemError, FeSpace};
use crate::material::{self, MaterialParams};
use crate::mesh::{tag_dirichlet, Mesh, MeshError};
use crate::sparse::{CsrMatrix, SparsityPattern};

const LOCAL: usize = 30;
const CHUNK: usize = 512;

pub type LocalMatrix = [[f64; LOCAL]; LOCAL];
pub type LocalVector = [f64; LOCAL];

#[derive(Debug, Error, PartialEq)]
pub enum AssemblyError {
    #[error("deformation gradient at tetrahedron {tet}, quadrature point {point} has det {det:e}")]
    NonInvertibleGradient { tet: usize, point: usize, det: f64 },
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("boundary tag `{0}` carries both a traction and a Dirichlet condition")]
    OverlappingConditions(String),
    #[error("dof {dof} out of range for a system of size {n}")]
    DofOutOfRange { dof: usize, n: usize },
}

/// Position of a Dirichlet part of the boundary, constant in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedPlacement {
    /// Keep the initial deformation on the tagged faces.
    Initial,
    /// `y = matrix x + translation` on the tagged faces.
    Affine { matrix: [[f64; 3]; 3], translation: [f64; 3] },
}

/// External loads and boundary conditions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadSpec {
    /// Body force per unit reference volume.
    #[serde(default)]
    pub body_force: [f64; 3],
    /// Surface traction per unit reference area, by boundary tag.
    #[serde(default)]
    pub traction: BTreeMap<String, [f64; 3]>,
    #[serde(default)]
    pub dirichlet: BTreeMap<String, FixedPlacement>,
}

impl LoadSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn validate(&self, mesh: &Mesh) -> Result<(), AssemblyError> {
        let known = mesh.tags();
        for tag in self.traction.keys().chain(self.dirichlet.keys()) {
            if !known.contains(tag.as_str()) {
                return Err(MeshError::UnknownTag(tag.clone()).into());
            }
        }
        if let Some(tag) = self.traction.keys().find(|t| self.dirichlet.contains_key(*t)) {
            return Err(AssemblyError::OverlappingConditions(tag.clone()));
        }
        Ok(())
    }

    pub fn has_external_loads(&self) -> bool {
        self.body_force.iter().any(|&f| f != 0.0) || self.traction.values().flatten().any(|&g| g != 0.0)
    }

    /// Constrained dofs of all Dirichlet tags.
    pub fn constrained_dofs(&self, mesh: &Mesh) -> Result<BTreeSet<usize>, AssemblyError> {
        let tags: Vec<&str> = self.dirichlet.keys().map(String::as_str).collect();
        Ok(crate::mesh::node_dofs(&tag_dirichlet(mesh, &tags)?))
    }

    /// Overwrites the Dirichlet nodes of `field` with their prescribed placement.
    pub fn impose_dirichlet(&self, mesh: &Mesh, field: &mut DeformationField) -> Result<(), AssemblyError> {
        for (tag, placement) in &self.dirichlet {
            if let FixedPlacement::Affine { matrix, translation } = placement {
                let a = Matrix3::from_fn(|i, j| matrix[i][j]);
                let t = Vector3::from(*translation);
                for node in tag_dirichlet(mesh, &[tag])? {
                    field.set_node(node, &(a * mesh.p2_node_position(node) + t));
                }
            }
        }
        Ok(())
    }
}

/// Sparsity pattern of vector P2 operators plus the element-to-value scatter map.
#[derive(Debug, Clone)]
pub struct Assembler {
    pub pattern: Arc<SparsityPattern>,
    scatter: Vec<u32>,
}

impl Assembler {
    pub fn new(space: &FeSpace) -> Self {
        let nodes = space.dofmap.node_count;
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); nodes];
        for tn in &space.tet_nodes {
            for &a in tn {
                adjacency[a].extend_from_slice(tn);
            }
        }
        let mut rows = Vec::with_capacity(3 * nodes);
        for adj in &mut adjacency {
            adj.sort_unstable();
            adj.dedup();
            let cols: Vec<usize> = adj.iter().flat_map(|&m| (0..3).map(move |c| 3 * m + c)).collect();
            for _ in 0..3 {
                rows.push(cols.clone());
            }
        }
        let pattern = SparsityPattern::from_rows(rows);
        let mut scatter = Vec::with_capacity(space.n_tets() * LOCAL * LOCAL);
        for tn in &space.tet_nodes {
            let dofs = local_dofs(tn);
            for &gi in &dofs {
                for &gj in &dofs {
                    let pos = pattern.position(gi, gj).expect("element entry in pattern");
                    scatter.push(u32::try_from(pos).expect("pattern fits u32 indices"));
                }
            }
        }
        Self { pattern: Arc::new(pattern), scatter }
    }

    pub fn n_dofs(&self) -> usize {
        self.pattern.n
    }

    /// Assembles `sum_e kernel(e)` into a matrix on the shared pattern.
    pub fn assemble_matrix<K>(&self, space: &FeSpace, symmetric: bool, kernel: K) -> Result<CsrMatrix, AssemblyError>
    where
        K: Fn(usize, &mut LocalMatrix) -> Result<(), AssemblyError> + Sync,
    {
        let mut out = CsrMatrix::zeros(self.pattern.clone(), symmetric);
        let n_tets = space.n_tets();
        let mut blocks = vec![[[0.0; LOCAL]; LOCAL]; CHUNK.min(n_tets)];
        for start in (0..n_tets).step_by(CHUNK) {
            let end = (start + CHUNK).min(n_tets);
            blocks[..end - start]
                .par_iter_mut()
                .enumerate()
                .try_for_each(|(k, block)| {
                    *block = [[0.0; LOCAL]; LOCAL];
                    kernel(start + k, block)
                })?;
            for (k, block) in blocks[..end - start].iter().enumerate() {
                let map = &self.scatter[(start + k) * LOCAL * LOCAL..(start + k + 1) * LOCAL * LOCAL];
                for (row, targets) in block.iter().zip(map.chunks_exact(LOCAL)) {
                    for (v, &pos) in row.iter().zip(targets) {
                        out.values[pos as usize] += v;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Assembles `sum_e kernel(e)` into a global vector.
    pub fn assemble_vector<K>(&self, space: &FeSpace, kernel: K) -> Result<Vec<f64>, AssemblyError>
    where
        K: Fn(usize, &mut LocalVector) -> Result<(), AssemblyError> + Sync,
    {
        let mut out = vec![0.0; self.n_dofs()];
        let n_tets = space.n_tets();
        let mut blocks = vec![[0.0; LOCAL]; CHUNK.min(n_tets)];
        for start in (0..n_tets).step_by(CHUNK) {
            let end = (start + CHUNK).min(n_tets);
            blocks[..end - start].par_iter_mut().enumerate().try_for_each(|(k, block)| {
                *block = [0.0; LOCAL];
                kernel(start + k, block)
            })?;
            for (k, block) in blocks[..end - start].iter().enumerate() {
                for (dof, v) in local_dofs(&space.tet_nodes[start + k]).iter().zip(block) {
                    out[*dof] += v;
                }
            }
        }
        Ok(out)
    }
}

pub fn local_dofs(nodes: &[usize; 10]) -> [usize; LOCAL] {
    std::array::from_fn(|k| 3 * nodes[k / 3] + k % 3)
}

/// Deformation gradient at a quadrature point, rejecting `det <= 0`.
pub fn admissible_gradient(
    space: &FeSpace,
    y: &DeformationField,
    tet: usize,
    q: usize,
) -> Result<Matrix3<f64>, AssemblyError> {
    let f = space.gradient_at(y, tet, q);
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(AssemblyError::NonInvertibleGradient { tet, point: q, det });
    }
    Ok(f)
}

/// Linearized dissipation matrix `K` at the configuration `y`.
pub fn assemble_stiffness(
    assembler: &Assembler,
    space: &FeSpace,
    y: &DeformationField,
    p: &MaterialParams,
) -> Result<CsrMatrix, AssemblyError> {
    space.check_field(y)?;
    assembler.assemble_matrix(space, true, |tet, block| {
        let values = space.local_values(y, tet);
        for q in 0..space.n_quad() {
            let g = space.grads(tet, q);
            let f = crate::fem::gradient_from_nodes(&values, g);
            let w = 2.0 * p.c * space.jxw(tet, q);
            // rows of F, and their products with the shape gradients
            let rows = [f.row(0).transpose(), f.row(1).transpose(), f.row(2).transpose()];
            let yy = Matrix3::from_fn(|a, b| rows[a].dot(&rows[b]));
            let yg: [[f64; 10]; 3] = std::array::from_fn(|a| std::array::from_fn(|i| rows[a].dot(&g[i])));
            for i in 0..10 {
                for j in 0..10 {
                    let gg = g[i].dot(&g[j]);
                    for a in 0..3 {
                        for b in 0..3 {
                            block[3 * i + a][3 * j + b] += w * (yy[(a, b)] * gg + yg[a][j] * yg[b][i]);
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

/// Right-hand side: negative internal force plus external loads.
pub fn assemble_rhs(
    assembler: &Assembler,
    space: &FeSpace,
    y: &DeformationField,
    p: &MaterialParams,
    loads: &LoadSpec,
) -> Result<Vec<f64>, AssemblyError> {
    space.check_field(y)?;
    let f_body = loads.body_force;
    let mut b = assembler.assemble_vector(space, |tet, block| {
        for q in 0..space.n_quad() {
            let f = admissible_gradient(space, y, tet, q)?;
            let stress = material::stress_pk1(&f, p).map_err(|_| AssemblyError::NonInvertibleGradient {
                tet,
                point: q,
                det: f.determinant(),
            })?;
            let g = space.grads(tet, q);
            let n = space.shape_values(q);
            let w = space.jxw(tet, q);
            for i in 0..10 {
                let sg = stress * g[i];
                for a in 0..3 {
                    block[3 * i + a] += w * (f_body[a] * n[i] - sg[a]);
                }
            }
        }
        Ok(())
    })?;
    add_traction_load(space, loads, &mut b);
    Ok(b)
}

fn add_traction_load(space: &FeSpace, loads: &LoadSpec, b: &mut [f64]) {
    let mesh = &space.mesh;
    let (points, weights) = triangle_quadrature();
    for (tag, traction) in &loads.traction {
        for face in mesh.faces_with_tag(tag) {
            let [a, bb, c] = face.vertices.map(|v| mesh.nodes[v]);
            let area = 0.5 * (bb - a).cross(&(c - a)).norm();
            let nodes = mesh.face_p2_nodes(&face.vertices);
            for (l, w) in points.iter().zip(&weights) {
                let n = p2_triangle_values(l);
                for (k, node) in nodes.iter().enumerate() {
                    for comp in 0..3 {
                        b[3 * node + comp] += 2.0 * area * w * n[k] * traction[comp];
                    }
                }
            }
        }
    }
}

/// Vector P2 mass matrix with unit density.
pub fn assemble_mass(assembler: &Assembler, space: &FeSpace) -> Result<CsrMatrix, AssemblyError> {
    assembler.assemble_matrix(space, true, |tet, block| {
        for q in 0..space.n_quad() {
            let n = space.shape_values(q);
            let w = space.jxw(tet, q);
            for i in 0..10 {
                for j in 0..10 {
                    let m = w * n[i] * n[j];
                    for a in 0..3 {
                        block[3 * i + a][3 * j + a] += m;
                    }
                }
            }
        }
        Ok(())
    })
}

/// Total stored energy `int W(grad y)`; infinite when any quadrature point
/// has `det <= 0`.
pub fn elastic_energy(space: &FeSpace, y: &DeformationField, p: &MaterialParams) -> f64 {
    (0..space.n_tets())
        .map(|t| (0..space.n_quad()).map(|q| space.jxw(t, q) * material::energy(&space.gradient_at(y, t, q), p)).sum::<f64>())
        .sum()
}

/// Load vector `l_i = int f . phi_i + int_{Gamma_N} g . phi_i`, so that the
/// work functional of the external loads is `l . y`.
pub fn load_vector(space: &FeSpace, loads: &LoadSpec) -> Vec<f64> {
    let mut weights = vec![0.0; space.n_dofs()];
    if loads.body_force.iter().any(|&f| f != 0.0) {
        for t in 0..space.n_tets() {
            for q in 0..space.n_quad() {
                let n = space.shape_values(q);
                let w = space.jxw(t, q);
                for (i, node) in space.tet_nodes[t].iter().enumerate() {
                    for a in 0..3 {
                        weights[3 * node + a] += w * n[i] * loads.body_force[a];
                    }
                }
            }
        }
    }
    add_traction_load(space, loads, &mut weights);
    weights
}

/// Work functional of the external loads, `int f . y + int_{Gamma_N} g . y`.
pub fn load_functional(space: &FeSpace, loads: &LoadSpec, y: &DeformationField) -> f64 {
    crate::sparse::dot(&load_vector(space, loads), &y.dofs)
}

/// `(int D_c^2(grad y1, grad y0), int D_c(grad y1, grad y0))`.
pub fn dissipation_integrals(
    space: &FeSpace,
    y1: &DeformationField,
    y0: &DeformationField,
    p: &MaterialParams,
) -> (f64, f64) {
    let mut quad = 0.0;
    let mut first = 0.0;
    for t in 0..space.n_tets() {
        let v1 = space.local_values(y1, t);
        let v0 = space.local_values(y0, t);
        for q in 0..space.n_quad() {
            let g = space.grads(t, q);
            let f1 = crate::fem::gradient_from_nodes(&v1, g);
            let f0 = crate::fem::gradient_from_nodes(&v0, g);
            let w = space.jxw(t, q);
            quad += w * material::dissipation_distance_sq(&f1, &f0, p);
            first += w * material::dissipation_distance(&f1, &f0, p);
        }
    }
    (quad, first)
}

/// Smallest `det grad y` over all quadrature points, with its location.
pub fn min_jacobian(space: &FeSpace, y: &DeformationField) -> (f64, usize, usize) {
    let mut best = (f64::INFINITY, 0, 0);
    for t in 0..space.n_tets() {
        for q in 0..space.n_quad() {
            let d = space.gradient_at(y, t, q).determinant();
            if !(d >= best.0) {
                best = (d, t, q);
            }
        }
    }
    best
}

/// Symmetric elimination of constrained dofs, with cached index maps so the
/// reduction can be repeated cheaply on matrices sharing one pattern.
#[derive(Debug, Clone)]
pub struct DirichletReduction {
    pub n_full: usize,
    pub free: Vec<usize>,
    pub reduced_pattern: Arc<SparsityPattern>,
    source: Arc<SparsityPattern>,
    gather: Vec<usize>,
}

impl DirichletReduction {
    pub fn new(pattern: Arc<SparsityPattern>, constrained: &BTreeSet<usize>) -> Result<Self, AssemblyError> {
        let n = pattern.n;
        if let Some(&dof) = constrained.iter().find(|&&d| d >= n) {
            return Err(AssemblyError::DofOutOfRange { dof, n });
        }
        let free: Vec<usize> = (0..n).filter(|d| !constrained.contains(d)).collect();
        let mut new_index = vec![usize::MAX; n];
        for (k, &d) in free.iter().enumerate() {
            new_index[d] = k;
        }
        let mut rows = Vec::with_capacity(free.len());
        let mut gather = Vec::new();
        for &d in &free {
            let mut row = Vec::new();
            for (k, &col) in pattern.row(d).iter().enumerate() {
                if new_index[col] != usize::MAX {
                    row.push(new_index[col]);
                    gather.push(pattern.row_ptr[d] + k);
                }
            }
            rows.push(row);
        }
        // rows are already sorted because `new_index` is monotone
        let reduced_pattern = Arc::new(SparsityPattern::from_rows(rows));
        Ok(Self { n_full: n, free, reduced_pattern, source: pattern, gather })
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    pub fn reduce_matrix(&self, m: &CsrMatrix) -> CsrMatrix {
        assert!(Arc::ptr_eq(&m.pattern, &self.source) || *m.pattern == *self.source);
        CsrMatrix {
            pattern: self.reduced_pattern.clone(),
            values: self.gather.iter().map(|&k| m.values[k]).collect(),
            symmetric: m.symmetric,
        }
    }

    pub fn reduce_vector(&self, v: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&d| v[d]).collect()
    }

    /// Extends a reduced solution by zeros on the constrained dofs.
    pub fn extend(&self, reduced: &[f64]) -> Vec<f64> {
        let mut full = vec![0.0; self.n_full];
        for (&d, v) in self.free.iter().zip(reduced) {
            full[d] = *v;
        }
        full
    }
}

/// Reduced system after eliminating constrained rows and columns.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    pub reduction: DirichletReduction,
}

impl ReducedSystem {
    pub fn extend(&self, reduced: &[f64]) -> Vec<f64> {
        self.reduction.extend(reduced)
    }
}

pub fn apply_dirichlet(k: &CsrMatrix, b: &[f64], constrained: &BTreeSet<usize>) -> Result<ReducedSystem, AssemblyError> {
    let reduction = DirichletReduction::new(k.pattern.clone(), constrained)?;
    Ok(ReducedSystem { matrix: reduction.reduce_matrix(k), rhs: reduction.reduce_vector(b), reduction })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{rotation, skew};
    use crate::mesh::{build_box_mesh, BoxSpec};
    use crate::sparse::{dot, norm};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const P: MaterialParams = MaterialParams { mu: 1.0, lambda: 1.5, c: 3.0 };

    fn space(spec: BoxSpec) -> (FeSpace, Assembler) {
        let space = FeSpace::new(build_box_mesh(&spec).unwrap()).unwrap();
        let asm = Assembler::new(&space);
        (space, asm)
    }

    fn perturbed(space: &FeSpace, rng: &mut ChaCha8Rng, amp: f64) -> DeformationField {
        let mut y = DeformationField::identity(&space.mesh);
        for v in &mut y.dofs {
            *v += rng.gen_range(-amp..amp);
        }
        y
    }

    fn rigid_velocity(space: &FeSpace, y: &DeformationField, a: &Vector3<f64>, skew_m: &Matrix3<f64>) -> Vec<f64> {
        (0..space.dofmap.node_count).flat_map(|n| (a + skew_m * y.node(n)).as_slice().to_vec()).collect()
    }

    #[test]
    fn pattern_is_symmetric_and_covers_elements() {
        let (_space, asm) = space(BoxSpec::cube(2));
        assert_eq!(asm.n_dofs(), 3 * 125);
        assert!(asm.pattern.is_structurally_symmetric());
    }

    #[test]
    fn translations_and_rotations_are_in_kernel() {
        let (space, asm) = space(BoxSpec::cube(2));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = perturbed(&space, &mut rng, 0.05);
        let k = assemble_stiffness(&asm, &space, &y, &P).unwrap();
        assert!(k.is_symmetric(1e-12));
        let t = rigid_velocity(&space, &y, &Vector3::new(1.0, -2.0, 0.5), &Matrix3::zeros());
        assert!(norm(&k.matvec(&t)) <= 1e-12 * k.frobenius_norm() * norm(&t));
        let a = skew(&Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let r = rigid_velocity(&space, &y, &Vector3::zeros(), &a);
        assert!(norm(&k.matvec(&r)) <= 1e-10 * k.frobenius_norm() * norm(&r));
    }

    #[test]
    fn quadratic_form_of_uniaxial_rate() {
        let spec = BoxSpec::new([-1.0, -1.0, -0.5], [1.0, 1.0, 0.5], [2, 2, 1]).unwrap();
        let (space, asm) = space(spec);
        let y = DeformationField::identity(&space.mesh);
        let k = assemble_stiffness(&asm, &space, &y, &P).unwrap();
        let z = DeformationField::interpolate(&space.mesh, |x| Vector3::new(x.x, 0.0, 0.0));
        let value = k.quadratic_form(&z.dofs);
        assert!((value - 4.0 * P.c * spec.volume()).abs() < 1e-10 * value);
    }

    #[test]
    fn stiffness_is_positive_semidefinite() {
        let (space, asm) = space(BoxSpec::cube(2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = perturbed(&space, &mut rng, 0.05);
        let k = assemble_stiffness(&asm, &space, &y, &P).unwrap();
        for _ in 0..100 {
            let z: Vec<f64> = (0..k.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            assert!(k.quadratic_form(&z) >= -1e-10 * k.frobenius_norm() * dot(&z, &z));
        }
    }

    #[test]
    fn rhs_vanishes_at_reference_and_is_balanced() {
        let (space, asm) = space(BoxSpec::cube(2));
        let y = DeformationField::identity(&space.mesh);
        let b = assemble_rhs(&asm, &space, &y, &P, &LoadSpec::none()).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-13));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = perturbed(&space, &mut rng, 0.05);
        let b = assemble_rhs(&asm, &space, &y, &P, &LoadSpec::none()).unwrap();
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for comp in 0..3 {
            let s: f64 = b.iter().skip(comp).step_by(3).sum();
            assert!(s.abs() < 1e-10 * scale.max(1.0), "{s}");
        }
        // moment balance follows from the symmetric second Piola-Kirchhoff stress
        let a = skew(&Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let r = rigid_velocity(&space, &y, &Vector3::zeros(), &a);
        assert!(dot(&b, &r).abs() < 1e-10 * norm(&b) * norm(&r));
    }

    #[test]
    fn body_force_load_vector() {
        let spec = BoxSpec::new([-1.0, -1.0, -0.5], [1.0, 1.0, 0.5], [2, 2, 1]).unwrap();
        let (space, asm) = space(spec);
        let y = DeformationField::identity(&space.mesh);
        let loads = LoadSpec { body_force: [0.0, 0.0, -2.0e3], ..LoadSpec::none() };
        let b = assemble_rhs(&asm, &space, &y, &P, &loads).unwrap();
        let sz: f64 = b.iter().skip(2).step_by(3).sum();
        assert!((sz + 2.0e3 * spec.volume()).abs() < 1e-9 * 2.0e3);
        assert!(b.iter().skip(0).step_by(3).all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn traction_load_totals_face_area() {
        let spec = BoxSpec::new([0.0; 3], [2.0, 1.0, 3.0], [2, 1, 2]).unwrap();
        let (space, asm) = space(spec);
        let y = DeformationField::identity(&space.mesh);
        let mut loads = LoadSpec::none();
        loads.traction.insert("x+".into(), [0.0, 5.0, 0.0]);
        let b = assemble_rhs(&asm, &space, &y, &P, &loads).unwrap();
        let sy: f64 = b.iter().skip(1).step_by(3).sum();
        assert!((sy - 5.0 * 3.0).abs() < 1e-12);
    }

    #[test]
    fn rhs_is_negative_energy_gradient() {
        let (space, asm) = space(BoxSpec::cube(1));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = perturbed(&space, &mut rng, 0.05);
        let b = assemble_rhs(&asm, &space, &y, &P, &LoadSpec::none()).unwrap();
        let h = 1e-6;
        for dof in (0..space.n_dofs()).step_by(7) {
            let mut e = vec![0.0; space.n_dofs()];
            e[dof] = h;
            let fd = (elastic_energy(&space, &y.advanced(1.0, &e), &P) - elastic_energy(&space, &y.advanced(-1.0, &e), &P)) / (2.0 * h);
            assert!((fd + b[dof]).abs() <= 1e-5 * b[dof].abs().max(1e-3), "dof {dof}: {fd} vs {}", -b[dof]);
        }
    }

    #[test]
    fn rhs_reports_inverted_element() {
        let (space, asm) = space(BoxSpec::cube(1));
        let y = DeformationField::affine(&space.mesh, &Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0)), &Vector3::zeros());
        match assemble_rhs(&asm, &space, &y, &P, &LoadSpec::none()) {
            Err(AssemblyError::NonInvertibleGradient { tet: 0, point: 0, det }) => assert!(det < 0.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mass_matrix_integrates_constants() {
        let spec = BoxSpec::new([-1.0, -1.0, -0.5], [1.0, 1.0, 0.5], [2, 3, 1]).unwrap();
        let (space, asm) = space(spec);
        let m = assemble_mass(&asm, &space).unwrap();
        for comp in 0..3 {
            let ones: Vec<f64> = (0..m.dim()).map(|d| if d % 3 == comp { 1.0 } else { 0.0 }).collect();
            assert!((m.quadratic_form(&ones) - spec.volume()).abs() < 1e-12 * spec.volume());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ritz = f64::INFINITY;
        for _ in 0..20 {
            let z: Vec<f64> = (0..m.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            ritz = ritz.min(m.quadratic_form(&z) / dot(&z, &z));
        }
        assert!(ritz > 0.0);
    }

    #[test]
    fn dirichlet_elimination() {
        let (space, asm) = space(BoxSpec::cube(1));
        let y = DeformationField::identity(&space.mesh);
        let k = assemble_stiffness(&asm, &space, &y, &P).unwrap();
        let b: Vec<f64> = (0..k.dim()).map(|i| i as f64).collect();
        let none = apply_dirichlet(&k, &b, &BTreeSet::new()).unwrap();
        assert_eq!(none.matrix.values, k.values);
        assert_eq!(none.rhs, b);
        let all: BTreeSet<usize> = (0..k.dim()).collect();
        let empty = apply_dirichlet(&k, &b, &all).unwrap();
        assert_eq!(empty.matrix.dim(), 0);
        assert_eq!(empty.extend(&[]), vec![0.0; k.dim()]);
        let some: BTreeSet<usize> = (0..k.dim()).step_by(4).collect();
        let red = apply_dirichlet(&k, &b, &some).unwrap();
        assert!(red.matrix.is_symmetric(1e-14));
        for (ri, &i) in red.reduction.free.iter().enumerate() {
            for (rj, &j) in red.reduction.free.iter().enumerate() {
                assert_eq!(red.matrix.get(ri, rj), k.get(i, j));
            }
        }
        let ext = red.extend(&vec![1.0; red.matrix.dim()]);
        assert!(some.iter().all(|&d| ext[d] == 0.0));
        assert!(apply_dirichlet(&k, &b, &BTreeSet::from([k.dim()])).is_err());
    }

    #[test]
    fn rotated_configuration_keeps_energy() {
        let (space, _) = space(BoxSpec::cube(1));
        let q = rotation(&Vector3::new(1.0, 2.0, 3.0), 0.7);
        let y0 = DeformationField::affine(&space.mesh, &Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), &Vector3::zeros());
        let y1 = DeformationField::affine(&space.mesh, &(q * Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0))), &Vector3::new(1.0, 0.0, 0.0));
        let e0 = elastic_energy(&space, &y0, &P);
        assert!((elastic_energy(&space, &y1, &P) - e0).abs() < 1e-12 * e0);
        assert!((e0 - 8.0 * material::energy(&Matrix3::from_diagonal(&Vector3::new(1.2, 1.0, 1.0)), &P)).abs() < 1e-12 * e0);
    }

    #[test]
    fn load_specs_are_validated() {
        let (space, _) = space(BoxSpec::cube(1));
        let mut loads = LoadSpec::none();
        loads.dirichlet.insert("z+".into(), FixedPlacement::Initial);
        assert!(loads.validate(&space.mesh).is_ok());
        loads.traction.insert("z+".into(), [0.0; 3]);
        assert_eq!(loads.validate(&space.mesh), Err(AssemblyError::OverlappingConditions("z+".into())));
        let mut bad = LoadSpec::none();
        bad.traction.insert("top".into(), [0.0; 3]);
        assert!(bad.validate(&space.mesh).is_err());
    }
}
