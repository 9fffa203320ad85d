//! Criss-cross triangulation of the unit square.
//!
//! The square is split into `2^level × 2^level` cells of side `h = 2^-level`;
//! every cell is split by its two diagonals into four right-angled triangles
//! meeting at the cell center. Vertex, triangle and edge numbering is fully
//! deterministic:
//!
//! * grid vertices first, row-major (`iy * (n + 1) + ix`), then cell centers
//!   (`(n + 1)^2 + iy * n + ix`);
//! * triangles cell by cell (row-major), in the order south, east, north, west;
//! * edges in order of first appearance while walking the triangles.

use std::collections::HashMap;
use std::io::{self, Write};

use crate::error::MeshError;

/// Largest supported refinement level. Beyond this the triangle count no
/// longer fits the `u32` indices used by the binary dump formats.
pub const MAX_LEVEL: u32 = 14;

pub type Point = [f64; 2];

/// Position of a triangle inside its cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrant {
    South = 0,
    East = 1,
    North = 2,
    West = 3,
}

#[derive(Debug, Clone)]
pub struct Mesh {
    level: u32,
    cells_per_side: usize,
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    edges: Vec<[usize; 2]>,
    edge_midpoints: Vec<Point>,
    vertex_on_boundary: Vec<bool>,
    edge_on_boundary: Vec<bool>,
    /// `triangle_edges[t][k]` is the edge opposite local vertex `k`.
    triangle_edges: Vec<[usize; 3]>,
    edge_triangles: Vec<(usize, Option<usize>)>,
    triangle_area: f64,
}

impl Mesh {
    /// Builds the level-`level` criss-cross mesh (`h = 2^-level`).
    pub fn build_crisscross(level: u32) -> Result<Self, MeshError> {
        if level == 0 || level > MAX_LEVEL {
            return Err(MeshError::LevelOutOfRange { level, max: MAX_LEVEL });
        }
        let n = 1usize << level;
        let h = 1.0 / n as f64;
        let grid = n + 1;
        let grid_count = grid * grid;
        let vertex_count = grid_count + n * n;

        let mut vertices = Vec::with_capacity(vertex_count);
        let mut vertex_on_boundary = Vec::with_capacity(vertex_count);
        for iy in 0..grid {
            for ix in 0..grid {
                vertices.push([ix as f64 * h, iy as f64 * h]);
                vertex_on_boundary.push(ix == 0 || iy == 0 || ix == n || iy == n);
            }
        }
        for iy in 0..n {
            for ix in 0..n {
                vertices.push([(ix as f64 + 0.5) * h, (iy as f64 + 0.5) * h]);
                vertex_on_boundary.push(false);
            }
        }

        let mut triangles = Vec::with_capacity(4 * n * n);
        for iy in 0..n {
            for ix in 0..n {
                let sw = iy * grid + ix;
                let se = sw + 1;
                let nw = sw + grid;
                let ne = nw + 1;
                let c = grid_count + iy * n + ix;
                triangles.push([sw, se, c]);
                triangles.push([se, ne, c]);
                triangles.push([ne, nw, c]);
                triangles.push([nw, sw, c]);
            }
        }

        let mut edge_index: HashMap<(usize, usize), usize> = HashMap::with_capacity(3 * triangles.len() / 2 + n);
        let mut edges = Vec::new();
        let mut edge_triangles: Vec<(usize, Option<usize>)> = Vec::new();
        let mut triangle_edges = Vec::with_capacity(triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            let mut local = [0usize; 3];
            for (k, slot) in local.iter_mut().enumerate() {
                let a = tri[(k + 1) % 3];
                let b = tri[(k + 2) % 3];
                let key = (a.min(b), a.max(b));
                let e = *edge_index.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_triangles.push((t, None));
                    edges.len() - 1
                });
                if edge_triangles[e].0 != t {
                    edge_triangles[e].1 = Some(t);
                }
                *slot = e;
            }
            triangle_edges.push(local);
        }

        let edge_midpoints = edges
            .iter()
            .map(|&[a, b]| {
                let (pa, pb) = (vertices[a], vertices[b]);
                [0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]
            })
            .collect();
        let edge_on_boundary = edge_triangles.iter().map(|(_, other)| other.is_none()).collect();

        Ok(Self {
            level,
            cells_per_side: n,
            vertices,
            triangles,
            edges,
            edge_midpoints,
            vertex_on_boundary,
            edge_on_boundary,
            triangle_edges,
            edge_triangles,
            triangle_area: 0.25 * h * h,
        })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn cells_per_side(&self) -> usize {
        self.cells_per_side
    }

    pub fn h(&self) -> f64 {
        1.0 / self.cells_per_side as f64
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn vertex_on_boundary(&self) -> &[bool] {
        &self.vertex_on_boundary
    }

    pub fn edge_on_boundary(&self) -> &[bool] {
        &self.edge_on_boundary
    }

    pub fn triangle_edges(&self) -> &[[usize; 3]] {
        &self.triangle_edges
    }

    /// The one or two triangles adjacent to each edge.
    pub fn edge_triangles(&self) -> &[(usize, Option<usize>)] {
        &self.edge_triangles
    }

    /// Area of every triangle (all equal, `h^2 / 4`).
    pub fn triangle_area(&self) -> f64 {
        self.triangle_area
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Midpoint of every edge, in edge order.
    pub fn edge_barycenters(&self) -> &[Point] {
        &self.edge_midpoints
    }

    pub fn triangle_vertices(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn barycenter(&self, t: usize) -> Point {
        let [a, b, c] = self.triangle_vertices(t);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Twice the signed area of triangle `t`.
    pub fn signed_area2(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangle_vertices(t);
        (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
    }

    /// Finds a triangle containing `p`. Points on shared edges resolve to one
    /// of the adjacent triangles; points outside the square are clamped.
    pub fn locate(&self, p: Point) -> usize {
        let n = self.cells_per_side;
        let scaled = [p[0] * n as f64, p[1] * n as f64];
        let ix = (scaled[0].floor().max(0.0) as usize).min(n - 1);
        let iy = (scaled[1].floor().max(0.0) as usize).min(n - 1);
        let dx = scaled[0] - ix as f64 - 0.5;
        let dy = scaled[1] - iy as f64 - 0.5;
        let quadrant = if dy <= -dx.abs() {
            Quadrant::South
        } else if dx >= dy.abs() {
            Quadrant::East
        } else if dy >= dx.abs() {
            Quadrant::North
        } else {
            Quadrant::West
        };
        4 * (iy * n + ix) + quadrant as usize
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: Point) -> [f64; 3] {
        let [a, b, c] = self.triangle_vertices(t);
        let det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
        let l1 = ((p[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[1] - a[1])) / det;
        let l2 = ((b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1])) / det;
        [1.0 - l1 - l2, l1, l2]
    }

    /// Plain-text dump: `OFF`, counts, vertex list, triangle list.
    pub fn write_off<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "OFF")?;
        writeln!(out, "{} {} {}", self.vertex_count(), self.triangle_count(), self.edge_count())?;
        for v in &self.vertices {
            writeln!(out, "{:.17e} {:.17e} 0", v[0], v[1])?;
        }
        for t in &self.triangles {
            writeln!(out, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_one_counts() {
        let mesh = Mesh::build_crisscross(1).unwrap();
        assert_eq!(mesh.vertex_count(), 13);
        assert_eq!(mesh.triangle_count(), 16);
        let area: f64 = (0..mesh.triangle_count()).map(|t| 0.5 * mesh.signed_area2(t)).sum();
        assert!((area - 1.0).abs() < 1e-15);
        assert_eq!(mesh.edge_on_boundary().iter().filter(|&&b| b).count(), 8);
    }

    #[test]
    fn level_two_half_edge_count() {
        let mesh = Mesh::build_crisscross(2).unwrap();
        assert_eq!(mesh.triangle_count(), 64);
        assert_eq!(mesh.vertex_count(), 41);
        let boundary = mesh.edge_on_boundary().iter().filter(|&&b| b).count();
        assert_eq!(boundary, 16);
        assert_eq!(mesh.edge_count(), (3 * 64 + boundary) / 2);
        assert_eq!(mesh.edge_count(), 104);
    }

    #[test]
    fn rejects_bad_levels() {
        assert!(Mesh::build_crisscross(0).is_err());
        assert!(Mesh::build_crisscross(MAX_LEVEL + 1).is_err());
        assert!(Mesh::build_crisscross(40).is_err());
    }

    #[test]
    fn topology_invariants() {
        for level in 1..=5 {
            let mesh = Mesh::build_crisscross(level).unwrap();
            let n = mesh.cells_per_side();
            assert_eq!(mesh.vertex_count(), (n + 1) * (n + 1) + n * n);
            assert_eq!(mesh.triangle_count(), 4 * n * n);
            let v = mesh.vertex_count() as i64;
            let e = mesh.edge_count() as i64;
            let f = mesh.triangle_count() as i64;
            assert_eq!(v - e + f, 1);
            let h = mesh.h();
            for t in 0..mesh.triangle_count() {
                let a = 0.5 * mesh.signed_area2(t);
                assert!(a > 0.0);
                assert!((a - h * h / 4.0).abs() < 1e-15);
            }
            let mut shared = vec![0usize; mesh.edge_count()];
            for te in mesh.triangle_edges() {
                for &e in te {
                    shared[e] += 1;
                }
            }
            for (e, &count) in shared.iter().enumerate() {
                let expected = if mesh.edge_on_boundary()[e] { 1 } else { 2 };
                assert_eq!(count, expected);
            }
        }
    }

    #[test]
    fn barycenters_are_midpoints() {
        let mesh = Mesh::build_crisscross(1).unwrap();
        let origin = 0;
        let right = 1;
        let e = mesh
            .edges()
            .iter()
            .position(|&ed| ed == [origin, right])
            .expect("bottom edge exists");
        assert_eq!(mesh.edge_barycenters()[e], [0.25, 0.0]);
        let mesh = Mesh::build_crisscross(3).unwrap();
        for p in mesh.edge_barycenters() {
            assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = Mesh::build_crisscross(3).unwrap();
        let b = Mesh::build_crisscross(3).unwrap();
        assert_eq!(a.triangles(), b.triangles());
        assert_eq!(a.edges(), b.edges());
        assert_eq!(a.vertices(), b.vertices());
    }

    #[test]
    fn locate_finds_containing_triangle() {
        let mesh = Mesh::build_crisscross(3).unwrap();
        for &p in &[[0.01, 0.3], [0.5, 0.5], [0.99, 0.99], [0.123, 0.876], [1.0, 1.0], [0.0, 0.0]] {
            let t = mesh.locate(p);
            let l = mesh.barycentric(t, p);
            assert!(l.iter().all(|&x| x > -1e-12), "{p:?} -> {l:?}");
        }
    }

    #[test]
    fn off_dump_has_all_entities() {
        let mesh = Mesh::build_crisscross(1).unwrap();
        let mut buf = Vec::new();
        mesh.write_off(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2 + 13 + 16);
    }
}
