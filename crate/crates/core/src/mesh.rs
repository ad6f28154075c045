//! Parametric bracket mesh with a bendable top tab, and angle-based labelling.
//!
//! The bracket is a base plate, a vertical wall rising from the plate's back edge, and a
//! tab sitting on top of the wall. The tab rotates rigidly about a horizontal hinge at the
//! top of the wall. A bend of 0° leaves the tab coplanar with the wall; positive angles
//! tilt the tab tip over the plate so its outer face turns upward.
//!
//! Coordinates are millimetres in a part-local frame: x along the plate width, y along
//! its depth, z up.

use crate::Label;
use nalgebra::{Point3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

pub type Point = Point3<f64>;
pub type Vec3 = Vector3<f64>;

/// Smallest triangle area (mm²) accepted as non-degenerate.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("bend angle {0}° outside [-90, 90]")]
    AngleOutOfRange(f64),
    #[error("hinge axis must be parallel to the base plate (direction {0:?})")]
    HingeNotInPlatePlane([f64; 3]),
    #[error("tab vertex set is empty")]
    EmptyTab,
    #[error("tab vertex index {index} out of range for {count} vertices")]
    TabIndexOutOfRange { index: usize, count: usize },
    #[error("invalid angle classes: {0}")]
    InvalidClassSpec(String),
}

/// Material slot per triangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PartRegion {
    Plate = 0,
    Wall = 1,
    Tab = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub material_ids: Vec<PartRegion>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle(&self, t: usize) -> [Point; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized normal following counter-clockwise winding.
    pub fn face_normal(&self, t: usize) -> Vec3 {
        let [a, b, c] = self.triangle(t);
        (b - a).cross(&(c - a))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        0.5 * self.face_normal(t).norm()
    }

    /// Checks index bounds and triangle non-degeneracy.
    pub fn validate(&self) -> Result<(), String> {
        if self.material_ids.len() != self.triangles.len() {
            return Err("material id count differs from triangle count".into());
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            if let Some(&i) = tri.iter().find(|&&i| i >= self.vertices.len()) {
                return Err(format!("triangle {t} references vertex {i}"));
            }
            if self.triangle_area(t) <= MIN_TRIANGLE_AREA {
                return Err(format!("triangle {t} is degenerate"));
            }
        }
        Ok(())
    }

    /// Axis-aligned bounds `(min, max)` of all vertices.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = Point::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// ASCII STL dump, one facet per triangle.
    pub fn write_ascii_stl<W: Write>(&self, name: &str, mut out: W) -> io::Result<()> {
        writeln!(out, "solid {name}")?;
        for t in 0..self.triangles.len() {
            let n = self.face_normal(t).normalize();
            writeln!(out, "  facet normal {:e} {:e} {:e}", n.x, n.y, n.z)?;
            writeln!(out, "    outer loop")?;
            for v in self.triangle(t) {
                writeln!(out, "      vertex {:e} {:e} {:e}", v.x, v.y, v.z)?;
            }
            writeln!(out, "    endloop")?;
            writeln!(out, "  endfacet")?;
        }
        writeln!(out, "endsolid {name}")
    }
}

/// Line about which the tab rotates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HingeAxis {
    pub point: Point,
    pub direction: Unit<Vec3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BendSpec {
    pub bend_angle_deg: f64,
    pub hinge_axis: HingeAxis,
    pub tab_vertex_set: Vec<usize>,
}

impl BendSpec {
    /// Bend of the built-in bracket's tab.
    pub fn bracket(bend_angle_deg: f64) -> Self {
        let b = Bracket::default();
        Self {
            bend_angle_deg,
            hinge_axis: b.hinge_axis(),
            tab_vertex_set: b.tab_vertex_indices(),
        }
    }

    pub fn validate(&self, vertex_count: usize) -> Result<(), MeshError> {
        if !(-90.0..=90.0).contains(&self.bend_angle_deg) {
            return Err(MeshError::AngleOutOfRange(self.bend_angle_deg));
        }
        let d = self.hinge_axis.direction;
        if d.z.abs() > 1e-9 {
            return Err(MeshError::HingeNotInPlatePlane([d.x, d.y, d.z]));
        }
        if self.tab_vertex_set.is_empty() {
            return Err(MeshError::EmptyTab);
        }
        if let Some(&index) = self.tab_vertex_set.iter().find(|&&i| i >= vertex_count) {
            return Err(MeshError::TabIndexOutOfRange {
                index,
                count: vertex_count,
            });
        }
        Ok(())
    }

    pub fn rotation(&self) -> Rotation3<f64> {
        Rotation3::from_axis_angle(&self.hinge_axis.direction, self.bend_angle_deg.to_radians())
    }
}

/// Dimensions of the built-in bracket, millimetres.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub plate: [f64; 3],
    pub wall_width: f64,
    pub wall_height: f64,
    pub thickness: f64,
    pub tab_width: f64,
    pub tab_length: f64,
}

impl Default for Bracket {
    fn default() -> Self {
        Self {
            plate: [60.0, 40.0, 2.0],
            wall_width: 40.0,
            wall_height: 30.0,
            thickness: 2.0,
            tab_width: 20.0,
            tab_length: 12.0,
        }
    }
}

const VERTS_PER_BOX: usize = 8;

impl Bracket {
    fn boxes(&self) -> [([f64; 3], [f64; 3], PartRegion); 3] {
        let [pw, pd, pt] = self.plate;
        let t = self.thickness;
        let wx0 = 0.5 * (pw - self.wall_width);
        let tx0 = 0.5 * (pw - self.tab_width);
        let top = self.wall_height;
        [
            ([0.0, 0.0, 0.0], [pw, pd, pt], PartRegion::Plate),
            (
                [wx0, pd - t, 0.0],
                [wx0 + self.wall_width, pd, top],
                PartRegion::Wall,
            ),
            (
                [tx0, pd - t, top],
                [tx0 + self.tab_width, pd, top + self.tab_length],
                PartRegion::Tab,
            ),
        ]
    }

    /// Hinge through the middle of the wall's top edge, along +x.
    pub fn hinge_axis(&self) -> HingeAxis {
        HingeAxis {
            point: Point::new(0.0, self.plate[1] - 0.5 * self.thickness, self.wall_height),
            direction: Vec3::x_axis(),
        }
    }

    pub fn tab_vertex_indices(&self) -> Vec<usize> {
        (2 * VERTS_PER_BOX..3 * VERTS_PER_BOX).collect()
    }

    /// Unbent mesh (tab coplanar with the wall).
    pub fn reference_mesh(&self) -> TriangleMesh {
        let mut mesh = TriangleMesh {
            vertices: Vec::with_capacity(3 * VERTS_PER_BOX),
            triangles: Vec::with_capacity(36),
            material_ids: Vec::with_capacity(36),
        };
        for (lo, hi, region) in self.boxes() {
            push_box(&mut mesh, lo, hi, region);
        }
        mesh
    }

    /// Geometric centre of the unbent part; a convenient camera target.
    pub fn center(&self) -> Point {
        Point::new(
            0.5 * self.plate[0],
            0.5 * self.plate[1],
            0.5 * (self.wall_height + self.tab_length),
        )
    }
}

fn push_box(mesh: &mut TriangleMesh, lo: [f64; 3], hi: [f64; 3], region: PartRegion) {
    let base = mesh.vertices.len();
    // Vertex i has x from bit 0, y from bit 1, z from bit 2.
    for i in 0..VERTS_PER_BOX {
        let pick = |axis: usize| if i >> axis & 1 == 1 { hi[axis] } else { lo[axis] };
        mesh.vertices.push(Point::new(pick(0), pick(1), pick(2)));
    }
    let faces: [([usize; 4], Vec3); 6] = [
        ([0, 2, 6, 4], -Vec3::x()),
        ([1, 3, 7, 5], Vec3::x()),
        ([0, 1, 5, 4], -Vec3::y()),
        ([2, 3, 7, 6], Vec3::y()),
        ([0, 1, 3, 2], -Vec3::z()),
        ([4, 5, 7, 6], Vec3::z()),
    ];
    for (quad, outward) in faces {
        let [a, b, c, d] = quad.map(|q| base + q);
        let n = (mesh.vertices[b] - mesh.vertices[a]).cross(&(mesh.vertices[c] - mesh.vertices[a]));
        let tris = if n.dot(&outward) > 0.0 {
            [[a, b, c], [a, c, d]]
        } else {
            [[a, c, b], [a, d, c]]
        };
        for tri in tris {
            mesh.triangles.push(tri);
            mesh.material_ids.push(region);
        }
    }
}

/// Builds the bracket with its tab rigidly rotated about the hinge.
///
/// Vertex and triangle counts never depend on the angle; only the vertices listed in
/// `bend.tab_vertex_set` move.
pub fn build_part_mesh(bend: &BendSpec) -> Result<TriangleMesh, MeshError> {
    let mut mesh = Bracket::default().reference_mesh();
    bend.validate(mesh.vertices.len())?;
    let rot = bend.rotation();
    let pivot = bend.hinge_axis.point;
    for &i in &bend.tab_vertex_set {
        let rel = mesh.vertices[i] - pivot;
        mesh.vertices[i] = pivot + rot * rel;
    }
    Ok(mesh)
}

/// Triangles per box and the position of the +y face within a box's triangle list.
const TRIS_PER_BOX: usize = 12;
const PLUS_Y_FACE_TRI: usize = 6;

/// Outward unit normal of the tab's outer face (+y when unbent).
pub fn tab_outer_normal(mesh: &TriangleMesh) -> Vec3 {
    mesh.face_normal(2 * TRIS_PER_BOX + PLUS_Y_FACE_TRI).normalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleClassSpec {
    pub pass_angles_deg: Vec<f64>,
    pub fail_angles_deg: Vec<f64>,
    pub decision_threshold_deg: f64,
}

pub const DEFAULT_DECISION_THRESHOLD_DEG: f64 = 12.5;

impl Default for AngleClassSpec {
    fn default() -> Self {
        Self {
            pass_angles_deg: vec![15.0, 20.0, 25.0, 30.0],
            fail_angles_deg: vec![-5.0, 0.0, 5.0, 10.0],
            decision_threshold_deg: DEFAULT_DECISION_THRESHOLD_DEG,
        }
    }
}

impl AngleClassSpec {
    pub fn validate(&self) -> Result<(), MeshError> {
        let bad = |msg: String| Err(MeshError::InvalidClassSpec(msg));
        if self.pass_angles_deg.is_empty() || self.fail_angles_deg.is_empty() {
            return bad("pass and fail angle sets must be nonempty".into());
        }
        let overlap: Vec<f64> = self
            .pass_angles_deg
            .iter()
            .copied()
            .filter(|a| self.fail_angles_deg.contains(a))
            .collect();
        if !overlap.is_empty() {
            return bad(format!("angles {overlap:?} are both pass and fail"));
        }
        let min_pass = self.pass_angles_deg.iter().copied().fold(f64::INFINITY, f64::min);
        let max_fail = self.fail_angles_deg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if min_pass <= max_fail {
            return bad(format!(
                "smallest pass angle {min_pass} must exceed largest fail angle {max_fail}"
            ));
        }
        let th = self.decision_threshold_deg;
        if !(th > max_fail && th < min_pass) {
            return bad(format!(
                "decision threshold {th} must lie strictly between {max_fail} and {min_pass}"
            ));
        }
        Ok(())
    }
}

/// Listed angles take their listed class; any other angle passes iff it is at least the
/// decision threshold.
pub fn classify_angle(angle_deg: f64, spec: &AngleClassSpec) -> Label {
    if spec.pass_angles_deg.contains(&angle_deg) {
        Label::Pass
    } else if spec.fail_angles_deg.contains(&angle_deg) {
        Label::Fail
    } else if angle_deg >= spec.decision_threshold_deg {
        Label::Pass
    } else {
        Label::Fail
    }
}
