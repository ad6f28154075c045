//! Z-buffered software rasterizer producing RGBA part sprites.
//!
//! Shading is ambient + Lambert + energy-normalized Blinn-Phong, lit by a rectangular
//! area light approximated with a grid of point samples. Every sprite is rendered at
//! `supersample`× resolution and box-filtered down; alpha is the covered-subsample
//! fraction and colour is the mean over covered subsamples (straight alpha).

use crate::mask::Mask;
use crate::mesh::{Point, TriangleMesh, Vec3};
use image::{Rgba, RgbaImage};
use nalgebra::{IsometryMatrix3, Matrix3, Rotation3, Translation3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Constant ambient floor added to every lit sample.
pub const AMBIENT: f64 = 0.03;
/// Points closer than this (camera-frame z, mm) are treated as behind the camera.
pub const NEAR_PLANE: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("point at depth {depth} is behind the camera")]
    BehindCamera { depth: f64 },
    #[error("part is clipped by the image border; reposition the camera")]
    Frame,
    #[error("mesh has no triangles")]
    EmptyMesh,
    #[error("part covers no pixels")]
    EmptySprite,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid light: {0}")]
    InvalidLight(String),
    #[error("invalid material: {0}")]
    InvalidMaterial(String),
}

/// Pinhole camera. Camera frame: x right, y down, z forward.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub image_width: u32,
    pub image_height: u32,
    pub focal_length: f64,
    pub principal_point: [f64; 2],
    /// Rigid transform from world to camera coordinates.
    pub pose: IsometryMatrix3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
}

impl Camera {
    /// Camera at `eye` looking at `target`, principal point at the image centre.
    pub fn look_at(eye: Point, target: Point, up: Vec3, width: u32, height: u32, focal_length: f64) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
            right.transpose(),
            down.transpose(),
            forward.transpose(),
        ]));
        let t = -(rot * eye.coords);
        Self {
            image_width: width,
            image_height: height,
            focal_length,
            principal_point: [0.5 * width as f64, 0.5 * height as f64],
            pose: IsometryMatrix3::from_parts(Translation3::from(t), rot),
        }
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        let bad = |m: String| Err(RenderError::InvalidCamera(m));
        if !(self.focal_length > 0.0 && self.focal_length.is_finite()) {
            return bad(format!("focal length {} must be positive", self.focal_length));
        }
        let [px, py] = self.principal_point;
        if !(px >= 0.0 && px <= self.image_width as f64 && py >= 0.0 && py <= self.image_height as f64) {
            return bad(format!("principal point ({px}, {py}) outside the image"));
        }
        let r = self.pose.rotation.matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return bad("pose rotation is not orthonormal".into());
        }
        Ok(())
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Point {
        self.pose.inverse_transform_point(&Point::origin())
    }

    pub fn to_camera(&self, p: &Point) -> Point {
        self.pose.transform_point(p)
    }

    /// Pinhole projection of a camera-frame point.
    pub fn project_camera_point(&self, pc: &Point) -> Result<Projection, RenderError> {
        if pc.z <= NEAR_PLANE {
            return Err(RenderError::BehindCamera { depth: pc.z });
        }
        Ok(Projection {
            x: self.principal_point[0] + self.focal_length * pc.x / pc.z,
            y: self.principal_point[1] + self.focal_length * pc.y / pc.z,
            depth: pc.z,
        })
    }

    /// Same optics sampled `factor` times more densely in each direction.
    pub fn scaled(&self, factor: u32) -> Camera {
        let f = factor as f64;
        Camera {
            image_width: self.image_width * factor,
            image_height: self.image_height * factor,
            focal_length: self.focal_length * f,
            principal_point: [self.principal_point[0] * f, self.principal_point[1] * f],
            pose: self.pose,
        }
    }
}

/// Projects a world point to pixel coordinates plus camera-frame depth.
pub fn project_vertex(cam: &Camera, p: &Point) -> Result<Projection, RenderError> {
    cam.project_camera_point(&cam.to_camera(p))
}

/// Rectangular emitter spanned by two unit axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AreaLight {
    pub center: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    /// Width along `u_axis` and height along `v_axis`, mm.
    pub extent: [f64; 2],
    pub power_watts: f64,
    pub sample_count: u32,
}

impl AreaLight {
    pub fn validate(&self) -> Result<(), RenderError> {
        if !(self.power_watts >= 0.0 && self.power_watts.is_finite()) {
            return Err(RenderError::InvalidLight(format!("power {} W", self.power_watts)));
        }
        if self.sample_count == 0 {
            return Err(RenderError::InvalidLight("sample_count must be >= 1".into()));
        }
        Ok(())
    }

    /// Cell-centred sample positions on a near-square grid, row-major.
    pub fn sample_points(&self) -> Vec<Point> {
        let n = self.sample_count as usize;
        let cols = (n as f64).sqrt().ceil() as usize;
        let rows = n.div_ceil(cols);
        let c = Point::from(self.center);
        let u = Vec3::from(self.u_axis);
        let v = Vec3::from(self.v_axis);
        (0..n)
            .map(|k| {
                let (i, j) = (k % cols, k / cols);
                let fu = ((i as f64 + 0.5) / cols as f64 - 0.5) * self.extent[0];
                let fv = ((j as f64 + 0.5) / rows as f64 - 0.5) * self.extent[1];
                c + u * fu + v * fv
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub base_color: [f64; 3],
    pub roughness: f64,
    pub metallic: f64,
}

impl Material {
    pub fn validate(&self) -> Result<(), RenderError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.base_color.iter().all(|&c| in_unit(c)) {
            return Err(RenderError::InvalidMaterial("base colour outside [0, 1]".into()));
        }
        if !(self.roughness > 0.0 && self.roughness <= 1.0) {
            return Err(RenderError::InvalidMaterial(format!("roughness {}", self.roughness)));
        }
        if !in_unit(self.metallic) {
            return Err(RenderError::InvalidMaterial(format!("metallic {}", self.metallic)));
        }
        Ok(())
    }

    /// Blinn-Phong exponent `max(2, 2/r² − 2)`.
    pub fn specular_exponent(&self) -> f64 {
        (2.0 / (self.roughness * self.roughness) - 2.0).max(2.0)
    }

    /// White specular blended toward the base colour by the metallic factor.
    pub fn specular_color(&self) -> [f64; 3] {
        self.base_color.map(|c| 1.0 + (c - 1.0) * self.metallic)
    }
}

/// Reflected radiance factor for one light direction, before irradiance scaling.
///
/// `base·max(0, n·l) + spec·(n+8)/(8π)·max(0, n·h)^n`, the specular lobe only when the
/// light is above the surface.
pub fn direct_response(normal: &Vec3, view_dir: &Vec3, light_dir: &Vec3, material: &Material) -> [f64; 3] {
    let n_dot_l = normal.dot(light_dir);
    if n_dot_l <= 0.0 {
        return [0.0; 3];
    }
    let half = (view_dir + light_dir).normalize();
    let exponent = material.specular_exponent();
    let lobe = (exponent + 8.0) / (8.0 * PI) * normal.dot(&half).max(0.0).powf(exponent);
    let spec = material.specular_color();
    let mut out = [0.0; 3];
    for c in 0..3 {
        out[c] = material.base_color[c] * n_dot_l + spec[c] * lobe;
    }
    out
}

/// Ambient + diffuse + specular for a single light direction, clamped to [0, 1].
///
/// `irradiance` is already in display units (see [`RenderSettings::exposure_gain`]).
pub fn shade(normal: &Vec3, view_dir: &Vec3, light_dir: &Vec3, material: &Material, irradiance: f64) -> [f64; 3] {
    let d = direct_response(normal, view_dir, light_dir, material);
    d.map(|v| (AMBIENT + irradiance * v).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    /// Display units per W/m² of irradiance.
    pub exposure_gain: f64,
    /// Subsamples per pixel along each axis.
    pub supersample: u32,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            exposure_gain: 0.1,
            supersample: 2,
        }
    }
}

/// Irradiance in display units from one of `light.sample_count` point samples.
pub fn sample_irradiance(light: &AreaLight, settings: &RenderSettings, distance_mm: f64) -> f64 {
    let d_m = distance_mm * 1e-3;
    settings.exposure_gain * light.power_watts / (4.0 * PI * d_m * d_m) / light.sample_count as f64
}

/// Rendered part before compositing.
#[derive(Debug, Clone, PartialEq)]
pub struct Sprite {
    pub rgba: RgbaImage,
    pub mask: Mask,
    /// Nearest camera depth per pixel, `f32::INFINITY` where uncovered.
    pub depth: Vec<f32>,
}

impl Sprite {
    pub fn width(&self) -> u32 {
        self.rgba.width()
    }

    pub fn height(&self) -> u32 {
        self.rgba.height()
    }

    /// Builds a sprite from RGBA data; the mask follows alpha.
    pub fn from_rgba(rgba: RgbaImage) -> Self {
        let mask = Mask::from_alpha(&rgba);
        let depth = vec![f32::INFINITY; rgba.width() as usize * rgba.height() as usize];
        Self { rgba, mask, depth }
    }

    /// Crops to the coverage bounding box grown by `margin` pixels (clamped to the image).
    /// Returns the crop and its top-left offset in the original sprite.
    pub fn crop_to_coverage(&self, margin: u32) -> Option<(Sprite, [u32; 2])> {
        let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
        for (x, y) in self.mask.covered() {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
        if x0 == u32::MAX {
            return None;
        }
        let x0 = x0.saturating_sub(margin);
        let y0 = y0.saturating_sub(margin);
        let x1 = (x1 + margin).min(self.width());
        let y1 = (y1 + margin).min(self.height());
        let (w, h) = (x1 - x0, y1 - y0);
        let rgba = image::imageops::crop_imm(&self.rgba, x0, y0, w, h).to_image();
        let mut depth = Vec::with_capacity((w * h) as usize);
        for y in y0..y1 {
            let row = (y * self.width()) as usize;
            depth.extend_from_slice(&self.depth[row + x0 as usize..row + x1 as usize]);
        }
        let mask = Mask::from_alpha(&rgba);
        Some((Sprite { rgba, mask, depth }, [x0, y0]))
    }
}

/// Screen-space triangle ready for edge-function rasterization.
struct ScreenTriangle {
    /// Vertices in pixel coordinates, counter-clockwise on screen (positive area).
    p: [[f64; 2]; 3],
    inv_depth: [f64; 3],
    area2: f64,
    top_left: [bool; 3],
}

impl ScreenTriangle {
    #[inline]
    fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    }

    fn new(mut p: [[f64; 2]; 3], mut depth: [f64; 3]) -> Option<Self> {
        let mut area2 = Self::edge(p[0], p[1], p[2]);
        if area2 == 0.0 {
            return None;
        }
        if area2 < 0.0 {
            p.swap(1, 2);
            depth.swap(1, 2);
            area2 = -area2;
        }
        // Edge i runs from p[i] to p[(i+1)%3] and weights vertex (i+2)%3. With y down and
        // positive area, a top edge is horizontal pointing -x and a left edge points +y.
        let top_left = [0, 1, 2].map(|i| {
            let a = p[i];
            let b = p[(i + 1) % 3];
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            (dy == 0.0 && dx < 0.0) || dy > 0.0
        });
        Some(Self {
            p,
            inv_depth: depth.map(|d| 1.0 / d),
            area2,
            top_left,
        })
    }

    /// Pixel bounding range `[x0, x1) × [y0, y1)` of sample indices to test.
    fn sample_bounds(&self, w: u32, h: u32) -> (u32, u32, u32, u32) {
        let min_x = self.p.iter().map(|v| v[0]).fold(f64::INFINITY, f64::min);
        let max_x = self.p.iter().map(|v| v[0]).fold(f64::NEG_INFINITY, f64::max);
        let min_y = self.p.iter().map(|v| v[1]).fold(f64::INFINITY, f64::min);
        let max_y = self.p.iter().map(|v| v[1]).fold(f64::NEG_INFINITY, f64::max);
        let clamp = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
        (
            clamp((min_x - 0.5).floor(), w),
            clamp((max_x + 0.5).ceil() + 1.0, w),
            clamp((min_y - 0.5).floor(), h),
            clamp((max_y + 0.5).ceil() + 1.0, h),
        )
    }

    /// Barycentric weights when the sample at `s` is covered under the top-left rule.
    #[inline]
    fn cover(&self, s: [f64; 2]) -> Option<[f64; 3]> {
        let mut w = [0.0; 3];
        for i in 0..3 {
            let e = Self::edge(self.p[i], self.p[(i + 1) % 3], s);
            if e < 0.0 || (e == 0.0 && !self.top_left[i]) {
                return None;
            }
            w[(i + 2) % 3] = e / self.area2;
        }
        Some(w)
    }
}

/// Camera-frame vertices, projections and front-facing flags for a mesh.
fn setup_triangles(mesh: &TriangleMesh, cam: &Camera) -> Result<Vec<Option<ScreenTriangle>>, RenderError> {
    let cam_pts: Vec<Point> = mesh.vertices.iter().map(|v| cam.to_camera(v)).collect();
    let projected = cam_pts
        .iter()
        .map(|pc| cam.project_camera_point(pc))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mesh
        .triangles
        .iter()
        .map(|&[a, b, c]| {
            let n = (cam_pts[b] - cam_pts[a]).cross(&(cam_pts[c] - cam_pts[a]));
            if n.dot(&cam_pts[a].coords) >= 0.0 {
                return None; // back face
            }
            let p = [a, b, c].map(|i| [projected[i].x, projected[i].y]);
            ScreenTriangle::new(p, [a, b, c].map(|i| projected[i].depth))
        })
        .collect())
}

fn check_framed(mesh: &TriangleMesh, cam: &Camera) -> Result<(), RenderError> {
    let (w, h) = (cam.image_width as f64, cam.image_height as f64);
    for v in &mesh.vertices {
        let p = project_vertex(cam, v)?;
        if !(p.x > 1.0 && p.x < w - 1.0 && p.y > 1.0 && p.y < h - 1.0) {
            return Err(RenderError::Frame);
        }
    }
    Ok(())
}

/// Silhouette from coverage alone: a pixel is set when any of its subsamples lies inside
/// a front-facing triangle. No depth test or shading is involved.
pub fn coverage_mask(mesh: &TriangleMesh, cam: &Camera, supersample: u32) -> Result<Mask, RenderError> {
    let hi = cam.scaled(supersample);
    let tris = setup_triangles(mesh, &hi)?;
    let mut mask = Mask::new(cam.image_width, cam.image_height);
    for tri in tris.iter().flatten() {
        let (x0, x1, y0, y1) = tri.sample_bounds(hi.image_width, hi.image_height);
        for y in y0..y1 {
            for x in x0..x1 {
                if tri.cover([x as f64 + 0.5, y as f64 + 0.5]).is_some() {
                    mask.set(x / supersample, y / supersample, true);
                }
            }
        }
    }
    Ok(mask)
}

/// Renders `mesh` into a sprite the size of the camera image.
///
/// Errors when the mesh is empty, any vertex is behind the camera, or the part is not
/// strictly inside the image.
pub fn render_sprite(
    mesh: &TriangleMesh,
    cam: &Camera,
    light: &AreaLight,
    material: &Material,
    settings: &RenderSettings,
) -> Result<Sprite, RenderError> {
    if mesh.is_empty() {
        return Err(RenderError::EmptyMesh);
    }
    cam.validate()?;
    light.validate()?;
    material.validate()?;
    check_framed(mesh, cam)?;

    let ss = settings.supersample.max(1);
    let hi = cam.scaled(ss);
    let (hw, hh) = (hi.image_width as usize, hi.image_height as usize);
    let tris = setup_triangles(mesh, &hi)?;

    let mut zbuf = vec![f64::INFINITY; hw * hh];
    let mut tri_id = vec![u32::MAX; hw * hh];
    for (t, tri) in tris.iter().enumerate() {
        let Some(tri) = tri else { continue };
        let (x0, x1, y0, y1) = tri.sample_bounds(hi.image_width, hi.image_height);
        for y in y0..y1 {
            for x in x0..x1 {
                let Some(w) = tri.cover([x as f64 + 0.5, y as f64 + 0.5]) else {
                    continue;
                };
                let inv_z = w[0] * tri.inv_depth[0] + w[1] * tri.inv_depth[1] + w[2] * tri.inv_depth[2];
                let z = 1.0 / inv_z;
                let idx = y as usize * hw + x as usize;
                if z < zbuf[idx] {
                    zbuf[idx] = z;
                    tri_id[idx] = t as u32;
                }
            }
        }
    }

    // Deferred shading: recover each visible sample's world point by intersecting its
    // view ray with the winning triangle's plane.
    let normals: Vec<Vec3> = (0..mesh.triangles.len()).map(|t| mesh.face_normal(t).normalize()).collect();
    let plane_points: Vec<Point> = mesh.triangles.iter().map(|t| mesh.vertices[t[0]]).collect();
    let eye = cam.center();
    let inv_rot = hi.pose.rotation.inverse();
    let lights = light.sample_points();
    let mut hi_color = vec![[0.0f64; 3]; hw * hh];
    for idx in 0..hw * hh {
        let t = tri_id[idx];
        if t == u32::MAX {
            continue;
        }
        let t = t as usize;
        let (x, y) = ((idx % hw) as f64 + 0.5, (idx / hw) as f64 + 0.5);
        let dir_cam = Vec3::new(
            (x - hi.principal_point[0]) / hi.focal_length,
            (y - hi.principal_point[1]) / hi.focal_length,
            1.0,
        );
        let dir = (inv_rot * dir_cam).normalize();
        let n = normals[t];
        let s = (plane_points[t] - eye).dot(&n) / dir.dot(&n);
        let p = eye + dir * s;
        let view = -dir;
        let mut c = [AMBIENT; 3];
        for lp in &lights {
            let to_light = lp - p;
            let dist = to_light.norm();
            let l = to_light / dist;
            let e = sample_irradiance(light, settings, dist);
            let r = direct_response(&n, &view, &l, material);
            for k in 0..3 {
                c[k] += e * r[k];
            }
        }
        hi_color[idx] = c.map(|v| v.clamp(0.0, 1.0));
    }

    // Box-filter down to the output resolution.
    let (w, h) = (cam.image_width, cam.image_height);
    let mut rgba = RgbaImage::new(w, h);
    let mut depth = vec![f32::INFINITY; (w * h) as usize];
    let per_pixel = (ss * ss) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut sum = [0.0; 3];
            let mut covered = 0u32;
            let mut nearest = f64::INFINITY;
            for sy in 0..ss {
                for sx in 0..ss {
                    let idx = (y * ss + sy) as usize * hw + (x * ss + sx) as usize;
                    if tri_id[idx] != u32::MAX {
                        covered += 1;
                        nearest = nearest.min(zbuf[idx]);
                        for k in 0..3 {
                            sum[k] += hi_color[idx][k];
                        }
                    }
                }
            }
            if covered > 0 {
                let c = sum.map(|v| to_u8(v / covered as f64));
                let a = ((covered as f64 / per_pixel) * 255.0).round() as u8;
                rgba.put_pixel(x, y, Rgba([c[0], c[1], c[2], a]));
                depth[(y * w + x) as usize] = nearest as f32;
            }
        }
    }
    let mask = Mask::from_alpha(&rgba);
    if mask.is_empty() {
        return Err(RenderError::EmptySprite);
    }
    if mask.touches_border() {
        return Err(RenderError::Frame);
    }
    Ok(Sprite { rgba, mask, depth })
}

#[inline]
fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::PartRegion;

    fn axis_camera(size: u32, f: f64) -> Camera {
        Camera::look_at(
            Point::new(0.0, 0.0, 0.0),
            Point::new(0.0, 0.0, 1.0),
            -Vec3::y(),
            size,
            size,
            f,
        )
    }

    fn test_light(power: f64) -> AreaLight {
        AreaLight {
            center: [0.0, 0.0, -100.0],
            u_axis: [1.0, 0.0, 0.0],
            v_axis: [0.0, 1.0, 0.0],
            extent: [40.0, 40.0],
            power_watts: power,
            sample_count: 16,
        }
    }

    fn gray(roughness: f64) -> Material {
        Material {
            base_color: [0.6, 0.6, 0.6],
            roughness,
            metallic: 1.0,
        }
    }

    /// Axis-aligned square facing a camera at the origin, `half` mm half-width at depth `z`.
    fn square(half: f64, z: f64, region: PartRegion) -> TriangleMesh {
        TriangleMesh {
            vertices: vec![
                Point::new(-half, -half, z),
                Point::new(half, -half, z),
                Point::new(half, half, z),
                Point::new(-half, half, z),
            ],
            // Counter-clockwise seen from the camera at the origin (normal toward -z).
            triangles: vec![[0, 2, 1], [0, 3, 2]],
            material_ids: vec![region; 2],
        }
    }

    #[test]
    fn look_at_identity_pose() {
        let cam = axis_camera(640, 100.0);
        cam.validate().unwrap();
        let r = cam.pose.rotation.matrix();
        assert!((r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let mut cam = axis_camera(640, 100.0);
        cam.principal_point = [320.0, 320.0];
        let p = project_vertex(&cam, &Point::new(0.0, 0.0, 5.0)).unwrap();
        assert_eq!((p.x, p.y), (320.0, 320.0));
        let p = project_vertex(&cam, &Point::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p.x - 330.0).abs() < 1e-12 && (p.y - 320.0).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let cam = axis_camera(640, 100.0);
        assert!(matches!(
            project_vertex(&cam, &Point::new(0.0, 0.0, -1.0)),
            Err(RenderError::BehindCamera { .. })
        ));
    }

    #[test]
    fn projection_monotone_in_world_x() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let cam = Camera::look_at(
            Point::new(10.0, -20.0, -300.0),
            Point::new(0.0, 0.0, 0.0),
            -Vec3::y(),
            640,
            640,
            800.0,
        );
        let z = 0.0;
        let y = rng.gen_range(-20.0..20.0);
        let mut xs: Vec<f64> = (0..200).map(|_| rng.gen_range(-50.0..50.0)).collect();
        xs.sort_by(f64::total_cmp);
        let px: Vec<f64> = xs
            .iter()
            .map(|&x| project_vertex(&cam, &Point::new(x, y, z)).unwrap().x)
            .collect();
        assert!(px.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_camera_rejected() {
        let mut cam = axis_camera(64, 10.0);
        cam.focal_length = 0.0;
        assert!(cam.validate().is_err());
        let mut cam = axis_camera(64, 10.0);
        cam.principal_point = [100.0, 5.0];
        assert!(cam.validate().is_err());
    }

    #[test]
    fn shade_without_light_is_ambient() {
        let n = Vec3::z();
        let c = shade(&n, &n, &n, &gray(0.4), 0.0);
        assert_eq!(c, [AMBIENT; 3]);
    }

    #[test]
    fn perpendicular_light_has_no_diffuse() {
        let n = Vec3::z();
        let l = Vec3::x();
        let d = direct_response(&n, &n, &l, &gray(0.4));
        assert_eq!(d, [0.0; 3]);
    }

    #[test]
    fn shade_matches_scalar_formula() {
        // Independent scalar evaluation: normal = light = view, r = 0.4, P = 10 W,
        // a single light sample 250 mm away, gain 0.1.
        let r: f64 = 0.4;
        let n_exp = (2.0 / (r * r) - 2.0).max(2.0);
        let irradiance = 0.1 * 10.0 / (4.0 * std::f64::consts::PI * 0.25 * 0.25);
        let base = 0.6;
        let expected = (0.03 + irradiance * (base + base * (n_exp + 8.0) / (8.0 * std::f64::consts::PI))).min(1.0);

        let light = AreaLight {
            sample_count: 1,
            power_watts: 10.0,
            ..test_light(10.0)
        };
        let settings = RenderSettings::default();
        let e = sample_irradiance(&light, &settings, 250.0);
        assert!((e - irradiance).abs() < 1e-12);
        let n = Vec3::z();
        let got = shade(&n, &n, &n, &gray(r), e);
        for c in got {
            assert!((c - expected).abs() < 1e-12, "{c} vs {expected}");
        }
    }

    #[test]
    fn square_area_matches_projection() {
        let f = 400.0;
        let cam = axis_camera(200, f);
        let (half, z) = (10.0, 100.0);
        let sprite = render_sprite(
            &square(half, z, PartRegion::Plate),
            &cam,
            &test_light(10.0),
            &gray(0.4),
            &RenderSettings::default(),
        )
        .unwrap();
        let side = 2.0 * half * f / z; // 80 px
        let area = side * side;
        let band = 4.0 * side + 4.0;
        let count = sprite.mask.count() as f64;
        assert!((count - area).abs() <= band, "{count} vs {area}");
        // Pixel centred grid aligned: the square spans exactly [60, 140).
        assert_eq!(count, 6400.0);
        // Nothing outside the silhouette.
        assert_eq!(sprite.rgba.get_pixel(0, 0)[3], 0);
        assert_eq!(sprite.rgba.get_pixel(30, 100)[3], 0);
    }

    #[test]
    fn zbuffer_keeps_nearer_triangle() {
        let cam = axis_camera(200, 400.0);
        let mut mesh = square(10.0, 100.0, PartRegion::Plate);
        let far = square(10.0, 150.0, PartRegion::Wall);
        let offset = mesh.vertices.len();
        mesh.vertices.extend(far.vertices);
        mesh.triangles.extend(far.triangles.iter().map(|t| t.map(|i| i + offset)));
        mesh.material_ids.extend(far.material_ids);
        let sprite = render_sprite(&mesh, &cam, &test_light(10.0), &gray(0.4), &RenderSettings::default()).unwrap();
        let d = sprite.depth[(100 * 200 + 100) as usize];
        assert!((d - 100.0).abs() < 1e-3, "depth {d}");
        // Same projected silhouette as the near square alone.
        assert_eq!(sprite.mask.count(), 6400);
    }

    #[test]
    fn back_faces_are_culled() {
        let cam = axis_camera(200, 400.0);
        let mut mesh = square(10.0, 100.0, PartRegion::Plate);
        for t in &mut mesh.triangles {
            t.swap(1, 2);
        }
        assert_eq!(
            render_sprite(&mesh, &cam, &test_light(10.0), &gray(0.4), &RenderSettings::default()),
            Err(RenderError::EmptySprite)
        );
    }

    #[test]
    fn clipped_part_is_frame_error() {
        let cam = axis_camera(200, 400.0);
        let mesh = square(30.0, 100.0, PartRegion::Plate); // 240 px wide
        assert_eq!(
            render_sprite(&mesh, &cam, &test_light(10.0), &gray(0.4), &RenderSettings::default()),
            Err(RenderError::Frame)
        );
    }

    #[test]
    fn empty_mesh_is_error() {
        let cam = axis_camera(200, 400.0);
        let mesh = TriangleMesh {
            vertices: vec![],
            triangles: vec![],
            material_ids: vec![],
        };
        assert_eq!(
            render_sprite(&mesh, &cam, &test_light(10.0), &gray(0.4), &RenderSettings::default()),
            Err(RenderError::EmptyMesh)
        );
    }

    #[test]
    fn light_samples_form_grid() {
        let pts = test_light(1.0).sample_points();
        assert_eq!(pts.len(), 16);
        let cx: f64 = pts.iter().map(|p| p.x).sum::<f64>() / 16.0;
        assert!(cx.abs() < 1e-12);
        assert!((pts[0].x + 15.0).abs() < 1e-12 && (pts[0].y + 15.0).abs() < 1e-12);
    }
}
