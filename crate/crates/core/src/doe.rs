//! Full-factorial domain-randomization design and per-image seed derivation.

use crate::mesh::{classify_angle, AngleClassSpec, MeshError, DEFAULT_DECISION_THRESHOLD_DEG};
use crate::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DoeError {
    #[error("`{0}` must not be empty")]
    EmptyLevels(&'static str),
    #[error("images_per_config must be at least 1")]
    NoReplicates,
    #[error("{field} contains duplicate value {value}")]
    Duplicate { field: &'static str, value: String },
    #[error("level {value} of `{field}` is out of range")]
    OutOfRange { field: &'static str, value: f64 },
    #[error(transparent)]
    Angles(#[from] MeshError),
}

fn default_threshold() -> f64 {
    DEFAULT_DECISION_THRESHOLD_DEG
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoeSpec {
    pub pass_angles: Vec<f64>,
    pub fail_angles: Vec<f64>,
    #[serde(default = "default_threshold")]
    pub decision_threshold_deg: f64,
    pub roughness_levels: Vec<f64>,
    pub power_levels: Vec<f64>,
    pub background_ids: Vec<u32>,
    pub exposure_levels: Vec<f64>,
    pub images_per_config: u32,
    /// Filled in from the run configuration's master seed.
    #[serde(skip)]
    pub master_seed: u64,
}

impl Default for DoeSpec {
    fn default() -> Self {
        Self {
            pass_angles: vec![15.0, 20.0, 25.0, 30.0],
            fail_angles: vec![-5.0, 0.0, 5.0, 10.0],
            decision_threshold_deg: DEFAULT_DECISION_THRESHOLD_DEG,
            roughness_levels: vec![0.2, 0.4, 0.6],
            power_levels: vec![5.0, 10.0, 15.0],
            background_ids: vec![0, 1, 2],
            exposure_levels: vec![0.8, 1.0, 1.2],
            images_per_config: 20,
            master_seed: 0,
        }
    }
}

fn check_unique<T: PartialEq + std::fmt::Display>(field: &'static str, values: &[T]) -> Result<(), DoeError> {
    if values.is_empty() {
        return Err(DoeError::EmptyLevels(field));
    }
    for (i, v) in values.iter().enumerate() {
        if values[..i].contains(v) {
            return Err(DoeError::Duplicate {
                field,
                value: v.to_string(),
            });
        }
    }
    Ok(())
}

impl DoeSpec {
    pub fn angle_classes(&self) -> AngleClassSpec {
        AngleClassSpec {
            pass_angles_deg: self.pass_angles.clone(),
            fail_angles_deg: self.fail_angles.clone(),
            decision_threshold_deg: self.decision_threshold_deg,
        }
    }

    pub fn validate(&self) -> Result<(), DoeError> {
        check_unique("pass_angles", &self.pass_angles)?;
        check_unique("fail_angles", &self.fail_angles)?;
        check_unique("roughness_levels", &self.roughness_levels)?;
        check_unique("power_levels", &self.power_levels)?;
        check_unique("background_ids", &self.background_ids)?;
        check_unique("exposure_levels", &self.exposure_levels)?;
        if self.images_per_config == 0 {
            return Err(DoeError::NoReplicates);
        }
        self.angle_classes().validate()?;
        for &a in self.pass_angles.iter().chain(&self.fail_angles) {
            if !(-90.0..=90.0).contains(&a) {
                return Err(DoeError::OutOfRange { field: "angles", value: a });
            }
        }
        for &r in &self.roughness_levels {
            if !(r > 0.0 && r <= 1.0) {
                return Err(DoeError::OutOfRange {
                    field: "roughness_levels",
                    value: r,
                });
            }
        }
        for &p in &self.power_levels {
            if !(p >= 0.0 && p.is_finite()) {
                return Err(DoeError::OutOfRange {
                    field: "power_levels",
                    value: p,
                });
            }
        }
        for &e in &self.exposure_levels {
            if !(e > 0.0 && e.is_finite()) {
                return Err(DoeError::OutOfRange {
                    field: "exposure_levels",
                    value: e,
                });
            }
        }
        Ok(())
    }

    /// Number of composite plans the design expands to.
    pub fn plan_count(&self) -> usize {
        (self.pass_angles.len() + self.fail_angles.len())
            * self.roughness_levels.len()
            * self.power_levels.len()
            * self.background_ids.len()
            * self.exposure_levels.len()
            * self.images_per_config as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartConfig {
    pub config_id: u32,
    pub bend_angle_deg: f64,
    pub roughness: f64,
    pub power_watts: f64,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositePlan {
    pub plan_id: u32,
    pub part: PartConfig,
    pub background_id: u32,
    pub exposure_index: u32,
    pub exposure_level: f64,
    pub replicate_index: u32,
    pub derived_seed: u64,
}

/// Angle × roughness × power per class, pass block first, ids in enumeration order.
pub fn enumerate_part_configs(spec: &DoeSpec) -> Vec<PartConfig> {
    let classes = spec.angle_classes();
    let mut out = Vec::new();
    for angles in [&spec.pass_angles, &spec.fail_angles] {
        for &angle in angles {
            for &roughness in &spec.roughness_levels {
                for &power in &spec.power_levels {
                    out.push(PartConfig {
                        config_id: out.len() as u32,
                        bend_angle_deg: angle,
                        roughness,
                        power_watts: power,
                        label: classify_angle(angle, &classes),
                    });
                }
            }
        }
    }
    out
}

/// Every part config on every background/exposure pair, `images_per_config` times.
pub fn enumerate_composite_plans(spec: &DoeSpec, configs: &[PartConfig]) -> Vec<CompositePlan> {
    let mut out = Vec::with_capacity(
        configs.len() * spec.background_ids.len() * spec.exposure_levels.len() * spec.images_per_config as usize,
    );
    for part in configs {
        for &background_id in &spec.background_ids {
            for (exposure_index, &exposure_level) in spec.exposure_levels.iter().enumerate() {
                for replicate_index in 0..spec.images_per_config {
                    let derived_seed = derive_seed(
                        spec.master_seed,
                        &[
                            part.config_id as u64,
                            background_id as u64,
                            exposure_index as u64,
                            replicate_index as u64,
                        ],
                    );
                    out.push(CompositePlan {
                        plan_id: out.len() as u32,
                        part: part.clone(),
                        background_id,
                        exposure_index: exposure_index as u32,
                        exposure_level,
                        replicate_index,
                        derived_seed,
                    });
                }
            }
        }
    }
    out
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a coordinate tuple.
///
/// The state starts as `splitmix64(master)`; each coordinate `c_i` is folded in as
/// `state = splitmix64(state ^ splitmix64(c_i + (i + 1)·γ))`, and the tuple length is
/// folded in last so prefixes of a tuple do not collide with it.
pub fn derive_seed(master_seed: u64, coordinates: &[u64]) -> u64 {
    let mut state = splitmix64(master_seed);
    for (i, &c) in coordinates.iter().enumerate() {
        let lane = c.wrapping_add((i as u64 + 1).wrapping_mul(GOLDEN_GAMMA));
        state = splitmix64(state ^ splitmix64(lane));
    }
    splitmix64(state ^ coordinates.len() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn defaults_give_72_configs() {
        let spec = DoeSpec::default();
        spec.validate().unwrap();
        let configs = enumerate_part_configs(&spec);
        assert_eq!(configs.len(), 72);
        assert_eq!(configs.iter().filter(|c| c.label == Label::Pass).count(), 36);
        assert!(configs[..36].iter().all(|c| c.label == Label::Pass));
        assert!(configs[36..].iter().all(|c| c.label == Label::Fail));
    }

    #[test]
    fn singleton_design() {
        let spec = DoeSpec {
            pass_angles: vec![20.0],
            fail_angles: vec![5.0],
            roughness_levels: vec![0.4],
            power_levels: vec![10.0],
            ..DoeSpec::default()
        };
        let configs = enumerate_part_configs(&spec);
        let pass_only: Vec<_> = configs.iter().filter(|c| c.label == Label::Pass).collect();
        assert_eq!(pass_only.len(), 1);
    }

    #[test]
    fn two_level_design_matches_nested_loops() {
        let spec = DoeSpec {
            pass_angles: vec![15.0, 20.0],
            fail_angles: vec![0.0, 5.0],
            roughness_levels: vec![0.2, 0.6],
            power_levels: vec![5.0, 15.0],
            ..DoeSpec::default()
        };
        let configs = enumerate_part_configs(&spec);
        // Independent enumeration: class-major, then angle, roughness, power.
        let mut expected = Vec::new();
        for (angles, label) in [([15.0, 20.0], Label::Pass), ([0.0, 5.0], Label::Fail)] {
            for a in angles {
                for r in [0.2, 0.6] {
                    for p in [5.0, 15.0] {
                        expected.push((a, r, p, label));
                    }
                }
            }
        }
        assert_eq!(configs.len(), 16);
        for (i, (c, e)) in configs.iter().zip(&expected).enumerate() {
            assert_eq!(c.config_id, i as u32);
            assert_eq!((c.bend_angle_deg, c.roughness, c.power_watts, c.label), *e);
        }
    }

    #[test]
    fn defaults_give_12960_plans_with_unique_seeds() {
        let spec = DoeSpec {
            master_seed: 42,
            ..DoeSpec::default()
        };
        let plans = enumerate_composite_plans(&spec, &enumerate_part_configs(&spec));
        assert_eq!(plans.len(), 12_960);
        assert_eq!(plans.len(), spec.plan_count());
        assert_eq!(plans.iter().filter(|p| p.part.label == Label::Pass).count(), 6_480);
        let seeds: HashSet<u64> = plans.iter().map(|p| p.derived_seed).collect();
        assert_eq!(seeds.len(), 12_960);
        assert!(plans.iter().enumerate().all(|(i, p)| p.plan_id == i as u32));
    }

    #[test]
    fn minimal_plan_count_equals_config_count() {
        let spec = DoeSpec {
            background_ids: vec![0],
            exposure_levels: vec![1.0],
            images_per_config: 1,
            ..DoeSpec::default()
        };
        let configs = enumerate_part_configs(&spec);
        assert_eq!(enumerate_composite_plans(&spec, &configs).len(), configs.len());
    }

    #[test]
    fn seeds_are_stable_across_thread_counts() {
        use rayon::prelude::*;
        let spec = DoeSpec {
            master_seed: 7,
            ..DoeSpec::default()
        };
        let configs = enumerate_part_configs(&spec);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let plans = enumerate_composite_plans(&spec, &configs);
                plans.par_iter().map(|p| p.derived_seed).collect::<Vec<_>>()
            })
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn replicate_index_changes_seed() {
        for r in 0..100u64 {
            assert_ne!(derive_seed(1, &[3, 0, 1, r]), derive_seed(1, &[3, 0, 1, r + 1]));
        }
        assert_eq!(derive_seed(9, &[1, 2]), derive_seed(9, &[1, 2]));
        assert_ne!(derive_seed(9, &[1]), derive_seed(9, &[1, 0]));
    }

    #[test]
    fn validation_catches_overlap_and_empty_levels() {
        let spec = DoeSpec {
            fail_angles: vec![10.0, 15.0],
            ..DoeSpec::default()
        };
        assert!(matches!(spec.validate(), Err(DoeError::Angles(_))));
        let spec = DoeSpec {
            power_levels: vec![],
            ..DoeSpec::default()
        };
        assert_eq!(spec.validate(), Err(DoeError::EmptyLevels("power_levels")));
        let spec = DoeSpec {
            images_per_config: 0,
            ..DoeSpec::default()
        };
        assert_eq!(spec.validate(), Err(DoeError::NoReplicates));
    }

    #[test]
    fn class_balance_when_angle_sets_match() {
        let spec = DoeSpec::default();
        let plans = enumerate_composite_plans(&spec, &enumerate_part_configs(&spec));
        let pass = plans.iter().filter(|p| p.part.label == Label::Pass).count();
        assert_eq!(pass, plans.len() - pass);
    }
}
