//! Blocky surface meshes: every exposed face of a class's voxels becomes one
//! quad. Voxel `(z, y, x)` spans `[x, x+1] x [y, y+1] x [z, z+1]` and faces are
//! wound counter-clockwise seen from outside.

use std::collections::HashMap;
use std::fmt::Write;

use segfield::volume::{GridDims, LabelVolume};

/// `(dz, dy, dx)` neighbor direction and the face corners as `(x, y, z)` offsets.
const FACES: [((i64, i64, i64), [[usize; 3]; 4]); 6] = [
    ((0, 0, -1), [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]]),
    ((0, 0, 1), [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]]),
    ((0, -1, 0), [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]]),
    ((0, 1, 0), [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]]),
    ((-1, 0, 0), [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]]),
    ((1, 0, 0), [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]),
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuadMesh {
    pub vertices: Vec<[usize; 3]>,
    /// Zero-based vertex indices.
    pub faces: Vec<[usize; 4]>,
}

fn exposed(dims: GridDims, data: &[u8], z: usize, y: usize, x: usize, d: (i64, i64, i64), cls: u8) -> bool {
    let (nz, ny, nx) = (z as i64 + d.0, y as i64 + d.1, x as i64 + d.2);
    !dims.contains(nz, ny, nx) || data[dims.index(nz as usize, ny as usize, nx as usize)] != cls
}

pub fn class_surface(labels: &LabelVolume, cls: u8) -> QuadMesh {
    let dims = labels.dims();
    let data = labels.data();
    let mut mesh = QuadMesh::default();
    let mut index: HashMap<[usize; 3], usize> = HashMap::new();
    for (i, &v) in data.iter().enumerate() {
        if v != cls {
            continue;
        }
        let (z, y, x) = dims.coords(i);
        for (dir, corners) in FACES {
            if !exposed(dims, data, z, y, x, dir, cls) {
                continue;
            }
            let mut quad = [0; 4];
            for (slot, c) in quad.iter_mut().zip(corners) {
                let p = [x + c[0], y + c[1], z + c[2]];
                *slot = *index.entry(p).or_insert_with(|| {
                    mesh.vertices.push(p);
                    mesh.vertices.len() - 1
                });
            }
            mesh.faces.push(quad);
        }
    }
    mesh
}

pub fn to_obj(mesh: &QuadMesh, name: &str) -> String {
    let mut out = format!("# voxel-face surface\no {name}\n");
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for f in &mesh.faces {
        writeln!(out, "f {} {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1, f[3] + 1).unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn volume(n: usize, voxels: &[(usize, usize, usize)]) -> LabelVolume {
        let mut v = LabelVolume::zeros(GridDims::cube(n).unwrap(), 2);
        for &(z, y, x) in voxels {
            v.set(z, y, x, 1);
        }
        v
    }

    fn directed_edges(mesh: &QuadMesh) -> HashMap<(usize, usize), usize> {
        let mut edges = HashMap::new();
        for f in &mesh.faces {
            for k in 0..4 {
                *edges.entry((f[k], f[(k + 1) % 4])).or_insert(0) += 1;
            }
        }
        edges
    }

    fn normal(mesh: &QuadMesh, f: &[usize; 4]) -> [i64; 3] {
        let p = |i: usize| mesh.vertices[f[i]].map(|c| c as i64);
        let (a, b, c) = (p(0), p(1), p(2));
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]]
    }

    #[test]
    fn single_voxel_is_a_cube() {
        let mesh = class_surface(&volume(3, &[(1, 1, 1)]), 1);
        assert_eq!((mesh.vertices.len(), mesh.faces.len()), (8, 6));
        // outward normals point away from the voxel center
        for f in &mesh.faces {
            let n = normal(&mesh, f);
            let centroid: Vec<f64> = (0..3)
                .map(|a| f.iter().map(|&i| mesh.vertices[i][a] as f64).sum::<f64>() / 4.0 - 1.5)
                .collect();
            let dot: f64 = (0..3).map(|a| n[a] as f64 * centroid[a]).sum();
            assert!(dot > 0.0);
        }
    }

    #[test]
    fn shared_faces_are_dropped() {
        let mesh = class_surface(&volume(4, &[(1, 1, 1), (1, 1, 2)]), 1);
        assert_eq!((mesh.vertices.len(), mesh.faces.len()), (12, 10));
        assert!(class_surface(&volume(4, &[]), 1).faces.is_empty());
    }

    #[test]
    fn block_surface_is_closed_and_consistently_wound() {
        let mut voxels = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 0..3 {
                    voxels.push((z, y, x));
                }
            }
        }
        let mesh = class_surface(&volume(5, &voxels), 1);
        assert_eq!(mesh.faces.len(), 6 * 9);
        let edges = directed_edges(&mesh);
        for (&(a, b), &count) in &edges {
            assert_eq!(count, 1);
            assert_eq!(edges.get(&(b, a)), Some(&1), "edge {a}-{b} has no twin");
        }
        let euler = mesh.vertices.len() as i64 - edges.len() as i64 / 2 + mesh.faces.len() as i64;
        assert_eq!(euler, 2);
    }

    #[test]
    fn obj_text_is_one_based() {
        let mesh = class_surface(&volume(2, &[(0, 0, 0)]), 1);
        let text = to_obj(&mesh, "c1");
        assert_eq!(text.lines().filter(|l| l.starts_with("v ")).count(), 8);
        assert!(text.lines().any(|l| l == "f 1 2 3 4"));
        assert!(!text.contains(" 0 0 0 0"));
    }
}
