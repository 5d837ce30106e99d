//! Quadratic Lagrange (P2) elements on tetrahedra.
//!
//! Local node order: the four vertices, then the midpoints of the edges
//! listed in [`TET_EDGES`](crate::mesh::TET_EDGES). With barycentric
//! coordinates `L`, the shape functions are `L_i (2 L_i - 1)` at vertices and
//! `4 L_a L_b` at edge midpoints.
//!
//! Vector degrees of freedom are numbered `3 * node + component`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::mesh::{Mesh, TET_EDGES};

#[derive(Debug, Error, PartialEq)]
pub enum FemError {
    #[error("tetrahedron {tet} is degenerate (volume {volume:e})")]
    DegenerateTet { tet: usize, volume: f64 },
    #[error("no quadrature rule of degree {0}; supported degrees are 1, 2, 4, 5")]
    UnsupportedDegree(usize),
    #[error("field has {got} dofs, expected {expected}")]
    DofCount { got: usize, expected: usize },
}

/// Quadrature on the reference tetrahedron `{x, y, z >= 0, x + y + z <= 1}`.
/// Points are barycentric `[1 - x - y - z, x, y, z]`; weights sum to 1/6.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub degree: usize,
    pub points: Vec<[f64; 4]>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Integrates `f(x, y, z)` over the reference tetrahedron.
    pub fn integrate_reference(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.points.iter().zip(&self.weights).map(|(p, w)| w * f(p[1], p[2], p[3])).sum()
    }
}

fn orbit_3_1(a: f64) -> Vec<[f64; 4]> {
    let b = 1.0 - 3.0 * a;
    vec![[b, a, a, a], [a, b, a, a], [a, a, b, a], [a, a, a, b]]
}

fn orbit_2_2(a: f64) -> Vec<[f64; 4]> {
    let b = 0.5 - a;
    vec![[a, a, b, b], [a, b, a, b], [a, b, b, a], [b, a, a, b], [b, a, b, a], [b, b, a, a]]
}

/// Symmetric positive-weight rules. Degrees 4 and 5 share a 14-point rule,
/// since no positive-weight degree-4 rule with fewer points is symmetric.
pub fn make_quadrature(degree: usize) -> Result<QuadratureRule, FemError> {
    let (points, weights): (Vec<[f64; 4]>, Vec<f64>) = match degree {
        1 => (vec![[0.25; 4]], vec![1.0 / 6.0]),
        2 => {
            let a = (5.0 - 5f64.sqrt()) / 20.0;
            (orbit_3_1(a), vec![1.0 / 24.0; 4])
        }
        4 | 5 => {
            let mut points = orbit_3_1(0.092_735_250_310_891_226_402_323_9);
            points.extend(orbit_3_1(0.310_885_919_263_300_609_797_345_7));
            points.extend(orbit_2_2(0.045_503_704_125_649_649_491_880_53));
            let mut weights = vec![0.012_248_840_519_393_658_257_285_03; 4];
            weights.extend([0.018_781_320_953_002_641_799_864_28; 4]);
            weights.extend([0.007_091_003_462_846_911_073_011_571; 6]);
            (points, weights)
        }
        other => return Err(FemError::UnsupportedDegree(other)),
    };
    Ok(QuadratureRule { degree, points, weights })
}

/// Three-point rule on the reference triangle (area 1/2), exact for quadratics.
/// Points are barycentric.
pub fn triangle_quadrature() -> ([[f64; 3]; 3], [f64; 3]) {
    let a = 1.0 / 6.0;
    let b = 2.0 / 3.0;
    ([[b, a, a], [a, b, a], [a, a, b]], [1.0 / 6.0; 3])
}

pub fn p2_shape_values(l: &[f64; 4]) -> [f64; 10] {
    let mut n = [0.0; 10];
    for i in 0..4 {
        n[i] = l[i] * (2.0 * l[i] - 1.0);
    }
    for (e, [a, b]) in TET_EDGES.iter().enumerate() {
        n[4 + e] = 4.0 * l[*a] * l[*b];
    }
    n
}

/// Derivatives of the shape functions with respect to the four barycentric
/// coordinates, treated as independent variables.
pub fn p2_shape_bary_derivatives(l: &[f64; 4]) -> [[f64; 4]; 10] {
    let mut d = [[0.0; 4]; 10];
    for i in 0..4 {
        d[i][i] = 4.0 * l[i] - 1.0;
    }
    for (e, [a, b]) in TET_EDGES.iter().enumerate() {
        d[4 + e][*a] = 4.0 * l[*b];
        d[4 + e][*b] = 4.0 * l[*a];
    }
    d
}

/// Values of the six P2 shape functions on a triangle (vertices, then
/// midpoints of edges (0,1), (0,2), (1,2)).
pub fn p2_triangle_values(l: &[f64; 3]) -> [f64; 6] {
    [
        l[0] * (2.0 * l[0] - 1.0),
        l[1] * (2.0 * l[1] - 1.0),
        l[2] * (2.0 * l[2] - 1.0),
        4.0 * l[0] * l[1],
        4.0 * l[0] * l[2],
        4.0 * l[1] * l[2],
    ]
}

/// Affine element map data: gradients of the barycentric coordinates in
/// physical space and the element volume.
#[derive(Debug, Clone, Copy)]
pub struct TetGeometry {
    pub grad_lambda: [Vector3<f64>; 4],
    pub volume: f64,
}

impl TetGeometry {
    pub fn new(mesh: &Mesh, tet: usize) -> Result<Self, FemError> {
        let [x0, x1, x2, x3] = mesh.tets[tet].map(|v| mesh.nodes[v]);
        let jac = Matrix3::from_columns(&[x1 - x0, x2 - x0, x3 - x0]);
        let det = jac.determinant();
        let volume = det / 6.0;
        let scale = (x1 - x0).norm().max((x2 - x0).norm()).max((x3 - x0).norm());
        if !(det > 1e-14 * scale.powi(3)) {
            return Err(FemError::DegenerateTet { tet, volume });
        }
        let inv = jac.try_inverse().ok_or(FemError::DegenerateTet { tet, volume })?;
        let g1: Vector3<f64> = inv.row(0).transpose();
        let g2: Vector3<f64> = inv.row(1).transpose();
        let g3: Vector3<f64> = inv.row(2).transpose();
        Ok(Self { grad_lambda: [-(g1 + g2 + g3), g1, g2, g3], volume })
    }

    pub fn shape_gradients(&self, l: &[f64; 4]) -> [Vector3<f64>; 10] {
        let d = p2_shape_bary_derivatives(l);
        d.map(|row| {
            row.iter().zip(&self.grad_lambda).fold(Vector3::zeros(), |acc, (c, g)| acc + *c * g)
        })
    }
}

/// Physical gradients of the ten P2 shape functions of `tet` at a
/// barycentric point.
pub fn shape_gradients(mesh: &Mesh, tet: usize, l: &[f64; 4]) -> Result<[Vector3<f64>; 10], FemError> {
    Ok(TetGeometry::new(mesh, tet)?.shape_gradients(l))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DofMap {
    pub node_count: usize,
}

impl DofMap {
    pub const COMPONENTS: usize = 3;

    pub fn dof(&self, node: usize, component: usize) -> usize {
        debug_assert!(node < self.node_count && component < 3);
        3 * node + component
    }

    pub fn node_component(&self, dof: usize) -> (usize, usize) {
        (dof / 3, dof % 3)
    }

    pub fn len(&self) -> usize {
        3 * self.node_count
    }

    pub fn is_empty(&self) -> bool {
        self.node_count == 0
    }
}

/// Nodal positions `y_h(node)` of a P2 deformation, flattened by [`DofMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub dofs: Vec<f64>,
}

impl DeformationField {
    pub fn from_dofs(dofs: Vec<f64>) -> Self {
        Self { dofs }
    }

    /// Nodal interpolation of a map `x -> y(x)`.
    pub fn interpolate(mesh: &Mesh, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        let n = mesh.p2_node_count();
        let mut dofs = Vec::with_capacity(3 * n);
        for node in 0..n {
            dofs.extend_from_slice(f(&mesh.p2_node_position(node)).as_slice());
        }
        Self { dofs }
    }

    pub fn identity(mesh: &Mesh) -> Self {
        Self::interpolate(mesh, |x| *x)
    }

    pub fn affine(mesh: &Mesh, matrix: &Matrix3<f64>, translation: &Vector3<f64>) -> Self {
        Self::interpolate(mesh, |x| matrix * x + translation)
    }

    pub fn node_count(&self) -> usize {
        self.dofs.len() / 3
    }

    pub fn node(&self, node: usize) -> Vector3<f64> {
        Vector3::new(self.dofs[3 * node], self.dofs[3 * node + 1], self.dofs[3 * node + 2])
    }

    pub fn set_node(&mut self, node: usize, value: &Vector3<f64>) {
        self.dofs[3 * node..3 * node + 3].copy_from_slice(value.as_slice());
    }

    pub fn is_finite(&self) -> bool {
        self.dofs.iter().all(|v| v.is_finite())
    }

    /// `self + scale * direction`, componentwise on the dof vectors.
    pub fn advanced(&self, scale: f64, direction: &[f64]) -> Self {
        assert_eq!(self.dofs.len(), direction.len());
        Self { dofs: self.dofs.iter().zip(direction).map(|(y, z)| y + scale * z).collect() }
    }
}

/// `F = sum_j y_j (x) grad phi_j` for the local nodal values and gradients.
pub fn gradient_from_nodes(values: &[Vector3<f64>; 10], grads: &[Vector3<f64>; 10]) -> Matrix3<f64> {
    let mut f = Matrix3::zeros();
    for (y, g) in values.iter().zip(grads) {
        f += y * g.transpose();
    }
    f
}

/// Deformation gradient of a P2 field at a barycentric point of `tet`.
pub fn deformation_gradient(
    mesh: &Mesh,
    field: &DeformationField,
    tet: usize,
    l: &[f64; 4],
) -> Result<Matrix3<f64>, FemError> {
    check_field(mesh, field)?;
    let grads = shape_gradients(mesh, tet, l)?;
    let values = mesh.tet_p2_nodes(tet).map(|n| field.node(n));
    Ok(gradient_from_nodes(&values, &grads))
}

fn check_field(mesh: &Mesh, field: &DeformationField) -> Result<(), FemError> {
    let expected = 3 * mesh.p2_node_count();
    if field.dofs.len() != expected {
        return Err(FemError::DofCount { got: field.dofs.len(), expected });
    }
    Ok(())
}

/// A mesh together with its P2 dof map and element data cached at the
/// quadrature points of one rule.
#[derive(Debug, Clone)]
pub struct FeSpace {
    pub mesh: Mesh,
    pub dofmap: DofMap,
    pub rule: QuadratureRule,
    pub tet_nodes: Vec<[usize; 10]>,
    shape_values: Vec<[f64; 10]>,
    grads: Vec<[Vector3<f64>; 10]>,
    jxw: Vec<f64>,
}

impl FeSpace {
    /// Degree of the rule used for assembly: degree-4 integrands (the
    /// linearized dissipation form, the mass matrix) are integrated exactly.
    pub const ASSEMBLY_DEGREE: usize = 5;

    pub fn new(mesh: Mesh) -> Result<Self, FemError> {
        Self::with_degree(mesh, Self::ASSEMBLY_DEGREE)
    }

    pub fn with_degree(mesh: Mesh, degree: usize) -> Result<Self, FemError> {
        let rule = make_quadrature(degree)?;
        let nq = rule.len();
        let mut grads = Vec::with_capacity(mesh.tets.len() * nq);
        let mut jxw = Vec::with_capacity(mesh.tets.len() * nq);
        for t in 0..mesh.tets.len() {
            let geo = TetGeometry::new(&mesh, t)?;
            for (p, w) in rule.points.iter().zip(&rule.weights) {
                grads.push(geo.shape_gradients(p));
                jxw.push(w * 6.0 * geo.volume);
            }
        }
        let shape_values = rule.points.iter().map(p2_shape_values).collect();
        let tet_nodes = (0..mesh.tets.len()).map(|t| mesh.tet_p2_nodes(t)).collect();
        let dofmap = DofMap { node_count: mesh.p2_node_count() };
        Ok(Self { mesh, dofmap, rule, tet_nodes, shape_values, grads, jxw })
    }

    pub fn n_dofs(&self) -> usize {
        self.dofmap.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tet_nodes.len()
    }

    pub fn n_quad(&self) -> usize {
        self.rule.len()
    }

    pub fn grads(&self, tet: usize, q: usize) -> &[Vector3<f64>; 10] {
        &self.grads[tet * self.rule.len() + q]
    }

    pub fn shape_values(&self, q: usize) -> &[f64; 10] {
        &self.shape_values[q]
    }

    /// Quadrature weight times the Jacobian determinant.
    pub fn jxw(&self, tet: usize, q: usize) -> f64 {
        self.jxw[tet * self.rule.len() + q]
    }

    pub fn local_values(&self, field: &DeformationField, tet: usize) -> [Vector3<f64>; 10] {
        self.tet_nodes[tet].map(|n| field.node(n))
    }

    pub fn gradient_at(&self, field: &DeformationField, tet: usize, q: usize) -> Matrix3<f64> {
        gradient_from_nodes(&self.local_values(field, tet), self.grads(tet, q))
    }

    pub fn check_field(&self, field: &DeformationField) -> Result<(), FemError> {
        check_field(&self.mesh, field)
    }
}
