//! Shared fixtures for the integration suites.

use drape::synth::{BodyRig, BodySegment, DeformationModel, GarmentSpec, GarmentTopology, PoseSampling};

/// Torso-like three-segment rig used across the acceptance scenes.
pub fn acceptance_rig() -> BodyRig {
    BodyRig {
        segments: vec![
            BodySegment {
                length: 200.0,
                radius: 70.0,
            },
            BodySegment {
                length: 180.0,
                radius: 60.0,
            },
            BodySegment {
                length: 150.0,
                radius: 45.0,
            },
        ],
        ring_sides: 24,
        rings_per_segment: 8,
    }
}

/// Dress-scale tube: 32 x 64 = 2048 vertices, bbox diagonal ~626 mm.
pub fn acceptance_dress() -> GarmentSpec {
    GarmentSpec {
        topology: GarmentTopology::Tube,
        rings: 32,
        segments: 64,
        radius: 150.0,
        width: 0.0,
        y_start: 40.0,
        y_end: 500.0,
    }
}

/// 15 mm pose-phased wrinkles, eight waves around the tube.
pub fn acceptance_model(seed: u64) -> DeformationModel {
    DeformationModel {
        amplitude: 15.0,
        wave_count: 8.0,
        phase_coupling: 2.0,
        collision_margin: 4.0,
        seed,
    }
}

pub fn acceptance_sampling() -> PoseSampling {
    PoseSampling {
        max_bend: 0.4,
        max_root_yaw: 0.3,
        max_root_shift: 25.0,
    }
}
