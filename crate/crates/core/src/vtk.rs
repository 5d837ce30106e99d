//! Legacy ASCII VTK snapshots of the deformed configuration.
//!
//! Every P2 node becomes a point at its deformed position and every
//! tetrahedron a `VTK_QUADRATIC_TETRA` cell, so no subdivision is needed.

use std::io::{self, Write};

use crate::fem::DeformationField;
use crate::mesh::Mesh;

/// VTK cell type of the 10-node tetrahedron.
pub const VTK_QUADRATIC_TETRA: u8 = 24;

/// Local node for each VTK slot. VTK lists the edge midpoints in the order
/// (0,1), (1,2), (0,2), (0,3), (1,3), (2,3).
pub const VTK_NODE_ORDER: [usize; 10] = [0, 1, 2, 3, 4, 7, 5, 6, 8, 9];

/// Writes one snapshot. `velocity`, when given, is attached as point data
/// next to the displacement `y(x) - x`.
pub fn write_snapshot<W: Write>(
    mut out: W,
    mesh: &Mesh,
    y: &DeformationField,
    velocity: Option<&[f64]>,
    step: usize,
    time: f64,
) -> io::Result<()> {
    let n_points = mesh.p2_node_count();
    if y.node_count() != n_points || velocity.is_some_and(|v| v.len() != 3 * n_points) {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "field does not match the mesh"));
    }
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "kvsim step {step} time {time}; cells: VTK_QUADRATIC_TETRA (type {VTK_QUADRATIC_TETRA})")?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {n_points} double")?;
    for n in 0..n_points {
        let p = y.node(n);
        writeln!(out, "{} {} {}", p[0], p[1], p[2])?;
    }
    let n_cells = mesh.tets.len();
    writeln!(out, "CELLS {n_cells} {}", 11 * n_cells)?;
    for t in 0..n_cells {
        let nodes = mesh.tet_p2_nodes(t);
        write!(out, "10")?;
        for slot in VTK_NODE_ORDER {
            write!(out, " {}", nodes[slot])?;
        }
        writeln!(out)?;
    }
    writeln!(out, "CELL_TYPES {n_cells}")?;
    for _ in 0..n_cells {
        writeln!(out, "{VTK_QUADRATIC_TETRA}")?;
    }
    writeln!(out, "POINT_DATA {n_points}")?;
    writeln!(out, "VECTORS displacement double")?;
    for n in 0..n_points {
        let d = y.node(n) - mesh.p2_node_position(n);
        writeln!(out, "{} {} {}", d[0], d[1], d[2])?;
    }
    if let Some(v) = velocity {
        writeln!(out, "VECTORS velocity double")?;
        for c in v.chunks_exact(3) {
            writeln!(out, "{} {} {}", c[0], c[1], c[2])?;
        }
    }
    Ok(())
}
