//! Structured tetrahedral meshes of axis-aligned boxes.
//!
//! Every hexahedral cell is split into six tetrahedra sharing the main
//! diagonal from the cell's lower corner to its upper corner (Kuhn
//! subdivision). Because every cell uses the same diagonal orientation, the
//! split is conforming across cell interfaces without any parity tricks.
//!
//! Besides the vertices, the mesh stores its unique edge list so that the
//! quadratic (P2) space can attach one node to every edge midpoint. P2 node
//! numbering: vertex nodes first (`0..nodes.len()`), then one node per edge
//! in edge-list order, the edge list being sorted lexicographically by its
//! endpoint indices.

use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Box face names used as boundary tags.
pub const FACE_TAGS: [&str; 6] = ["x-", "x+", "y-", "y+", "z-", "z+"];

/// Local vertex pairs of the six tetrahedron edges, in local P2 order.
pub const TET_EDGES: [[usize; 2]; 6] = [[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]];

/// Local vertex triples of the four tetrahedron faces (face `k` omits vertex `k`).
pub const TET_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("box divisions must be at least 1, got {0:?}")]
    InvalidDivisions([usize; 3]),
    #[error("degenerate box: upper {upper:?} must exceed lower {lower:?} in every component")]
    DegenerateBox { lower: [f64; 3], upper: [f64; 3] },
    #[error("unknown boundary tag `{0}`")]
    UnknownTag(String),
    #[error("tetrahedron {tet} has non-positive signed volume {volume:e}")]
    NonPositiveVolume { tet: usize, volume: f64 },
    #[error("face {face:?} is shared by {count} tetrahedra")]
    NonConformingFace { face: [usize; 3], count: usize },
    #[error("boundary face {face:?} does not match exactly one tetrahedron face")]
    DanglingBoundaryFace { face: [usize; 3] },
    #[error("edge list is inconsistent with the tetrahedra: {0}")]
    EdgeList(String),
}

/// Axis-aligned box with the number of cells along each axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub divisions: [usize; 3],
}

impl BoxSpec {
    pub fn new(lower: [f64; 3], upper: [f64; 3], divisions: [usize; 3]) -> Result<Self, MeshError> {
        let spec = Self { lower, upper, divisions };
        spec.validate()?;
        Ok(spec)
    }

    /// The cube `(-1, 1)^3` split into `n` cells per axis.
    pub fn cube(n: usize) -> Self {
        Self { lower: [-1.0; 3], upper: [1.0; 3], divisions: [n; 3] }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        if self.divisions.iter().any(|&d| d == 0) {
            return Err(MeshError::InvalidDivisions(self.divisions));
        }
        let finite = self.lower.iter().chain(&self.upper).all(|v| v.is_finite());
        if !finite || (0..3).any(|a| self.upper[a] <= self.lower[a]) {
            return Err(MeshError::DegenerateBox { lower: self.lower, upper: self.upper });
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| self.upper[a] - self.lower[a]).product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFace {
    pub vertices: [usize; 3],
    pub tag: String,
}

/// Conforming tetrahedral mesh in three dimensions.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub nodes: Vec<Vector3<f64>>,
    pub tets: Vec<[usize; 4]>,
    /// Unique edges, each stored as `[lo, hi]` with `lo < hi`, sorted.
    pub edges: Vec<[usize; 2]>,
    pub boundary_faces: Vec<BoundaryFace>,
    /// Global edge index of each local edge of each tetrahedron (see [`TET_EDGES`]).
    pub tet_edges: Vec<[usize; 6]>,
    edge_lookup: HashMap<[usize; 2], usize>,
}

/// Builds the Kuhn-subdivided mesh of a box.
pub fn build_box_mesh(spec: &BoxSpec) -> Result<Mesh, MeshError> {
    spec.validate()?;
    let [n1, n2, n3] = spec.divisions;
    let index = |i: usize, j: usize, k: usize| i + (n1 + 1) * (j + (n2 + 1) * k);

    let mut nodes = Vec::with_capacity((n1 + 1) * (n2 + 1) * (n3 + 1));
    for k in 0..=n3 {
        for j in 0..=n2 {
            for i in 0..=n1 {
                let t = [i as f64 / n1 as f64, j as f64 / n2 as f64, k as f64 / n3 as f64];
                nodes.push(Vector3::from_fn(|a, _| {
                    spec.lower[a] + t[a] * (spec.upper[a] - spec.lower[a])
                }));
            }
        }
    }

    // Each tetrahedron is a monotone lattice path 000 -> 111 through the cell.
    const PERMUTATIONS: [[usize; 3]; 6] =
        [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut tets = Vec::with_capacity(6 * n1 * n2 * n3);
    for k in 0..n3 {
        for j in 0..n2 {
            for i in 0..n1 {
                for perm in PERMUTATIONS {
                    let mut corner = [i, j, k];
                    let mut tet = [index(i, j, k), 0, 0, 0];
                    for (slot, &axis) in perm.iter().enumerate() {
                        corner[axis] += 1;
                        tet[slot + 1] = index(corner[0], corner[1], corner[2]);
                    }
                    if signed_volume(&nodes, &tet) < 0.0 {
                        tet.swap(2, 3);
                    }
                    tets.push(tet);
                }
            }
        }
    }

    // Boundary faces are those owned by a single tetrahedron.
    let mut face_count: HashMap<[usize; 3], usize> = HashMap::new();
    for tet in &tets {
        for local in TET_FACES {
            *face_count.entry(sorted3(local.map(|v| tet[v]))).or_default() += 1;
        }
    }
    let grid = |v: usize| [v % (n1 + 1), (v / (n1 + 1)) % (n2 + 1), v / ((n1 + 1) * (n2 + 1))];
    let limits = [n1, n2, n3];
    let mut boundary_faces = Vec::new();
    for tet in &tets {
        for local in TET_FACES {
            let face = local.map(|v| tet[v]);
            if face_count[&sorted3(face)] != 1 {
                continue;
            }
            let coords = face.map(grid);
            let tag = (0..3)
                .find_map(|axis| {
                    if coords.iter().all(|c| c[axis] == 0) {
                        Some(FACE_TAGS[2 * axis])
                    } else if coords.iter().all(|c| c[axis] == limits[axis]) {
                        Some(FACE_TAGS[2 * axis + 1])
                    } else {
                        None
                    }
                })
                .expect("face owned by one tetrahedron lies on the box boundary");
            boundary_faces.push(BoundaryFace { vertices: face, tag: tag.to_string() });
        }
    }

    Ok(Mesh::from_parts(nodes, tets, boundary_faces))
}

fn sorted3(mut f: [usize; 3]) -> [usize; 3] {
    f.sort_unstable();
    f
}

fn signed_volume(nodes: &[Vector3<f64>], tet: &[usize; 4]) -> f64 {
    let [a, b, c, d] = tet.map(|v| nodes[v]);
    (b - a).cross(&(c - a)).dot(&(d - a)) / 6.0
}

impl Mesh {
    /// Assembles a mesh from vertices, tetrahedra and tagged boundary faces,
    /// deriving the edge list.
    pub fn from_parts(
        nodes: Vec<Vector3<f64>>,
        tets: Vec<[usize; 4]>,
        boundary_faces: Vec<BoundaryFace>,
    ) -> Self {
        let edge_set: BTreeSet<[usize; 2]> = tets
            .iter()
            .flat_map(|t| TET_EDGES.map(|[a, b]| edge_key(t[a], t[b])))
            .collect();
        let edges: Vec<[usize; 2]> = edge_set.into_iter().collect();
        let edge_lookup: HashMap<[usize; 2], usize> =
            edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
        let tet_edges = tets
            .iter()
            .map(|t| TET_EDGES.map(|[a, b]| edge_lookup[&edge_key(t[a], t[b])]))
            .collect();
        Self { nodes, tets, edges, boundary_faces, tet_edges, edge_lookup }
    }

    pub fn vertex_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of P2 nodes: vertices plus edge midpoints.
    pub fn p2_node_count(&self) -> usize {
        self.nodes.len() + self.edges.len()
    }

    pub fn edge_index(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_lookup.get(&edge_key(a, b)).copied()
    }

    /// The ten P2 node indices of a tetrahedron: four vertices then the six
    /// edge midpoints in [`TET_EDGES`] order.
    pub fn tet_p2_nodes(&self, tet: usize) -> [usize; 10] {
        let v = self.tets[tet];
        let e = self.tet_edges[tet];
        let nv = self.nodes.len();
        [v[0], v[1], v[2], v[3], nv + e[0], nv + e[1], nv + e[2], nv + e[3], nv + e[4], nv + e[5]]
    }

    /// The six P2 nodes of a boundary triangle: three vertices then the
    /// midpoints of edges (0,1), (0,2), (1,2).
    pub fn face_p2_nodes(&self, face: &[usize; 3]) -> [usize; 6] {
        let nv = self.nodes.len();
        let mid = |a: usize, b: usize| nv + self.edge_index(face[a], face[b]).expect("face edge");
        [face[0], face[1], face[2], mid(0, 1), mid(0, 2), mid(1, 2)]
    }

    /// Reference position of a P2 node.
    pub fn p2_node_position(&self, node: usize) -> Vector3<f64> {
        match node.checked_sub(self.nodes.len()) {
            None => self.nodes[node],
            Some(e) => {
                let [a, b] = self.edges[e];
                0.5 * (self.nodes[a] + self.nodes[b])
            }
        }
    }

    pub fn tet_volume(&self, tet: usize) -> f64 {
        signed_volume(&self.nodes, &self.tets[tet])
    }

    pub fn volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.boundary_faces.iter().map(|f| f.tag.as_str()).collect()
    }

    pub fn faces_with_tag<'a>(&'a self, tag: &'a str) -> impl Iterator<Item = &'a BoundaryFace> + 'a {
        self.boundary_faces.iter().filter(move |f| f.tag == tag)
    }

    /// Checks the structural invariants: positive volumes, conformity,
    /// boundary faces owned by one tetrahedron, unique edges.
    pub fn validate(&self) -> Result<(), MeshError> {
        for t in 0..self.tets.len() {
            let volume = self.tet_volume(t);
            if !(volume > 0.0) {
                return Err(MeshError::NonPositiveVolume { tet: t, volume });
            }
        }
        let mut face_count: HashMap<[usize; 3], usize> = HashMap::new();
        for tet in &self.tets {
            for local in TET_FACES {
                *face_count.entry(sorted3(local.map(|v| tet[v]))).or_default() += 1;
            }
        }
        if let Some((face, &count)) = face_count.iter().find(|(_, &c)| c > 2) {
            return Err(MeshError::NonConformingFace { face: *face, count });
        }
        let mut seen = BTreeSet::new();
        for bf in &self.boundary_faces {
            let key = sorted3(bf.vertices);
            if face_count.get(&key) != Some(&1) || !seen.insert(key) {
                return Err(MeshError::DanglingBoundaryFace { face: bf.vertices });
            }
        }
        let exterior = face_count.values().filter(|&&c| c == 1).count();
        if exterior != self.boundary_faces.len() {
            return Err(MeshError::EdgeList(format!(
                "{exterior} exterior faces but {} tagged boundary faces",
                self.boundary_faces.len()
            )));
        }
        let unique: BTreeSet<_> = self.edges.iter().collect();
        if unique.len() != self.edges.len() {
            return Err(MeshError::EdgeList("duplicate edge".into()));
        }
        if self.edges.iter().any(|e| e[0] >= e[1]) {
            return Err(MeshError::EdgeList("edge endpoints not ordered".into()));
        }
        for tet in &self.tets {
            for [a, b] in TET_EDGES {
                if self.edge_index(tet[a], tet[b]).is_none() {
                    return Err(MeshError::EdgeList(format!("missing edge {:?}", [tet[a], tet[b]])));
                }
            }
        }
        Ok(())
    }
}

fn edge_key(a: usize, b: usize) -> [usize; 2] {
    if a < b { [a, b] } else { [b, a] }
}

/// P2 node indices (vertices and edge midpoints) lying on faces with one of
/// the listed tags.
pub fn tag_dirichlet<S: AsRef<str>>(mesh: &Mesh, tags: &[S]) -> Result<BTreeSet<usize>, MeshError> {
    let known = mesh.tags();
    for tag in tags {
        if !known.contains(tag.as_ref()) {
            return Err(MeshError::UnknownTag(tag.as_ref().to_string()));
        }
    }
    let mut nodes = BTreeSet::new();
    for tag in tags {
        for face in mesh.faces_with_tag(tag.as_ref()) {
            nodes.extend(mesh.face_p2_nodes(&face.vertices));
        }
    }
    Ok(nodes)
}

/// Expands node indices to their three vector degrees of freedom.
pub fn node_dofs(nodes: &BTreeSet<usize>) -> BTreeSet<usize> {
    nodes.iter().flat_map(|&n| (0..3).map(move |c| 3 * n + c)).collect()
}
