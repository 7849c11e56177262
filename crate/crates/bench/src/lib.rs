//! Fixtures shared by the benchmarks.

use npuppet_core::model::{DeformModel, ModelConfig};
use npuppet_core::synthetic::{Rig, Sample};

/// The synthetic rig, a few rendered frames and a tiny untrained model, all
/// at `res`×`res`.
pub struct Fixture {
    pub rig: Rig,
    pub frames: Vec<Sample>,
    pub model: DeformModel,
}

impl Fixture {
    pub fn new(subdivisions: usize, res: usize) -> Fixture {
        let rig = Rig::new(subdivisions).expect("rig builds");
        let frames = rig.dataset(4, 0, 1, res, res).expect("frames render").train;
        let model =
            DeformModel::new(ModelConfig::tiny(res, res), rig.puppet.vertex_count(), 0).expect("model initializes");
        Fixture { rig, frames, model }
    }
}
