//! Fixed inspection-station scene: camera, light placement and base material.
//!
//! Only bend angle, roughness and light power vary between renders; everything here is
//! held constant and declared in the run configuration.

use crate::mesh::{build_part_mesh, BendSpec, Bracket, MeshError, Point, Vec3};
use crate::render::{render_sprite, AreaLight, Camera, Material, RenderError, RenderSettings, Sprite};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Render(#[from] RenderError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    pub focal_length_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightConfig {
    pub center: [f64; 3],
    pub u_axis: [f64; 3],
    pub v_axis: [f64; 3],
    pub extent: [f64; 2],
    pub sample_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Square canvas edge, pixels.
    pub canvas_size: u32,
    pub camera: CameraConfig,
    pub light: LightConfig,
    pub base_color: [f64; 3],
    pub metallic: f64,
    pub exposure_gain: f64,
    pub supersample: u32,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let c = Bracket::default().center();
        Self {
            canvas_size: 640,
            camera: CameraConfig {
                eye: [c.x + 110.0, c.y + 200.0, c.z + 250.0],
                target: [c.x, c.y, c.z],
                up: [0.0, 0.0, 1.0],
                focal_length_px: 800.0,
            },
            light: LightConfig {
                center: [c.x, c.y + 70.0, 300.0],
                u_axis: [1.0, 0.0, 0.0],
                v_axis: [0.0, 1.0, 0.0],
                extent: [100.0, 100.0],
                sample_count: 16,
            },
            base_color: [0.62, 0.63, 0.66],
            metallic: 1.0,
            exposure_gain: 0.08,
            supersample: 2,
        }
    }
}

/// Ready-to-render scene built from a [`SceneConfig`].
#[derive(Debug, Clone)]
pub struct Scene {
    pub camera: Camera,
    pub config: SceneConfig,
}

impl Scene {
    pub fn new(config: SceneConfig) -> Result<Self, SceneError> {
        let cc = &config.camera;
        let camera = Camera::look_at(
            Point::from(cc.eye),
            Point::from(cc.target),
            Vec3::from(cc.up),
            config.canvas_size,
            config.canvas_size,
            cc.focal_length_px,
        );
        camera.validate()?;
        Ok(Self { camera, config })
    }

    pub fn light(&self, power_watts: f64) -> AreaLight {
        let l = &self.config.light;
        AreaLight {
            center: l.center,
            u_axis: l.u_axis,
            v_axis: l.v_axis,
            extent: l.extent,
            power_watts,
            sample_count: l.sample_count,
        }
    }

    pub fn material(&self, roughness: f64) -> Material {
        Material {
            base_color: self.config.base_color,
            roughness,
            metallic: self.config.metallic,
        }
    }

    pub fn settings(&self) -> RenderSettings {
        RenderSettings {
            exposure_gain: self.config.exposure_gain,
            supersample: self.config.supersample,
        }
    }

    /// Renders the bracket at one domain-randomization point.
    pub fn render_part(&self, bend_angle_deg: f64, roughness: f64, power_watts: f64) -> Result<Sprite, SceneError> {
        let mesh = build_part_mesh(&BendSpec::bracket(bend_angle_deg))?;
        Ok(render_sprite(
            &mesh,
            &self.camera,
            &self.light(power_watts),
            &self.material(roughness),
            &self.settings(),
        )?)
    }
}
