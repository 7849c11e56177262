//! A small articulated test character and pose generator.
//!
//! The character has a torso and two arms, each arm hinged to the torso at
//! the shoulder joint found by the puppet builder. Poses rotate each arm
//! rigidly about its shoulder and then move the whole figure rigidly, so
//! every generated pose has zero ARAP and joint energy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, Point2, Rot2};
use crate::image::Image;
use crate::puppet::{build_puppet, BuildOptions, DeformState, PartSpec, Puppet};
use crate::render::{render, RasterConfig};

/// Articulation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Left and right arm angles about their shoulders, radians.
    pub arms: [f64; 2],
    /// Whole-figure rotation about the origin, radians.
    pub turn: f64,
    pub shift: Point2,
}

impl Pose {
    pub const REST: Pose = Pose {
        arms: [0.0, 0.0],
        turn: 0.0,
        shift: [0.0, 0.0],
    };

    pub fn lerp(&self, other: &Pose, t: f64) -> Pose {
        let l = |a: f64, b: f64| (1.0 - t) * a + t * b;
        Pose {
            arms: [l(self.arms[0], other.arms[0]), l(self.arms[1], other.arms[1])],
            turn: l(self.turn, other.turn),
            shift: [l(self.shift[0], other.shift[0]), l(self.shift[1], other.shift[1])],
        }
    }
}

/// Sampling ranges for [`Rig::random_pose`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRange {
    pub arm: f64,
    pub turn: f64,
    pub shift: f64,
}

impl Default for PoseRange {
    fn default() -> Self {
        PoseRange {
            arm: 40f64.to_radians(),
            turn: 12f64.to_radians(),
            shift: 0.15,
        }
    }
}

/// The test character with what is needed to pose it.
#[derive(Debug, Clone)]
pub struct Rig {
    pub puppet: Puppet,
    /// Layer index of each vertex.
    part_of: Vec<usize>,
    /// Shoulder positions of the two arm layers.
    pivots: [Point2; 2],
}

fn torso_texture() -> Image {
    Image::from_fn(16, 20, 4, |c, r| {
        let (x, y) = (c as f64 / 15.0, r as f64 / 19.0);
        let band = if (0.45..0.6).contains(&y) { 0.35 } else { 0.0 };
        vec![0.85 - 0.5 * y, 0.3 + 0.4 * x - band, 0.25 + 0.5 * y * x, 1.0]
    })
}

fn arm_texture(hue: f64) -> Image {
    Image::from_fn(24, 6, 4, |c, r| {
        let (x, y) = (c as f64 / 23.0, r as f64 / 5.0);
        vec![0.2 + 0.6 * x, hue * (1.0 - 0.6 * x), 0.3 + 0.4 * y, 1.0]
    })
}

fn arm_outline(sign: f64) -> Vec<Point2> {
    let xs = [0.12, 0.38, 0.66];
    let mut pts: Vec<Point2> = xs.iter().map(|x| [sign * x, 0.1]).collect();
    pts.extend(xs.iter().rev().map(|x| [sign * x, 0.26]));
    if sign < 0.0 {
        pts.reverse();
    }
    pts
}

impl Rig {
    /// Builds the character. `subdivisions` midpoint-subdivides the merged
    /// mesh.
    pub fn new(subdivisions: usize) -> Result<Rig> {
        let torso = vec![
            [-0.24, -0.55],
            [0.24, -0.55],
            [0.27, -0.1],
            [0.22, 0.35],
            [0.0, 0.42],
            [-0.22, 0.35],
            [-0.27, -0.1],
        ];
        let parts = vec![
            PartSpec {
                name: "arm_left".into(),
                outline: arm_outline(-1.0),
                texture: arm_texture(0.8),
            },
            PartSpec {
                name: "arm_right".into(),
                outline: arm_outline(1.0),
                texture: arm_texture(0.4),
            },
            PartSpec {
                name: "torso".into(),
                outline: torso,
                texture: torso_texture(),
            },
        ];
        let opts = BuildOptions {
            refine_edge: Some(0.45),
            subdivisions,
            ..Default::default()
        };
        let report = build_puppet(&parts, &opts)?;
        let puppet = report.puppet;
        if puppet.joints.len() != 2 {
            return Err(Error::Invalid(format!(
                "test character should have 2 joints, got {}",
                puppet.joints.len()
            )));
        }
        let part_of = puppet.vertex_layers();
        let mut pivots = [[0.0; 2]; 2];
        for &[a, b] in &puppet.joints {
            let arm = if part_of[a] < 2 { a } else { b };
            pivots[part_of[arm]] = puppet.rest_vertices[arm];
        }
        Ok(Rig {
            puppet,
            part_of,
            pivots,
        })
    }

    pub fn pose_state(&self, pose: &Pose) -> DeformState {
        let global = Rot2::from_angle(pose.turn);
        let arm_rots = pose.arms.map(Rot2::from_angle);
        let vertices = self
            .puppet
            .rest_vertices
            .iter()
            .zip(&self.part_of)
            .map(|(v, &part)| {
                let local = if part < 2 {
                    let c = self.pivots[part];
                    geom::add(c, arm_rots[part].apply(geom::sub(*v, c)))
                } else {
                    *v
                };
                geom::add(global.apply(local), pose.shift)
            })
            .collect();
        DeformState { vertices }
    }

    pub fn random_pose(&self, rng: &mut impl Rng, range: &PoseRange) -> Pose {
        let mut u = |s: f64| if s > 0.0 { rng.random_range(-s..=s) } else { 0.0 };
        Pose {
            arms: [u(range.arm), u(range.arm)],
            turn: u(range.turn),
            shift: [u(range.shift), u(range.shift)],
        }
    }

    /// Hard render over an opaque white background, as RGB.
    pub fn render_frame(&self, state: &DeformState, width: usize, height: usize) -> Result<Image> {
        let cfg = RasterConfig::new(width, height).with_background([1.0; 4]);
        Ok(render(state, &self.puppet, &cfg)?.rgba.take_channels(3))
    }

    /// Hard render composited over an RGB background of the same size.
    pub fn render_over(&self, state: &DeformState, background: &Image) -> Result<Image> {
        let cfg = RasterConfig::new(background.width, background.height);
        let fg = render(state, &self.puppet, &cfg)?.rgba;
        let mut out = background.take_channels(3);
        for (o, f) in out.data.chunks_mut(3).zip(fg.data.chunks(4)) {
            for k in 0..3 {
                o[k] = f[3] * f[k] + (1.0 - f[3]) * o[k];
            }
        }
        Ok(out)
    }
}

/// Rendered frames with their ground-truth poses.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pose: Pose,
    pub state: DeformState,
    pub image: Image,
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub train: Vec<Sample>,
    /// Poses halfway between consecutive pairs of training poses.
    pub heldout: Vec<Sample>,
}

impl Rig {
    pub fn sample(&self, pose: Pose, width: usize, height: usize) -> Result<Sample> {
        let state = self.pose_state(&pose);
        let image = self.render_frame(&state, width, height)?;
        Ok(Sample { pose, state, image })
    }

    /// `n_train` random poses and `n_heldout` interpolated ones.
    pub fn dataset(
        &self,
        n_train: usize,
        n_heldout: usize,
        seed: u64,
        width: usize,
        height: usize,
    ) -> Result<SyntheticSet> {
        self.dataset_in(&PoseRange::default(), n_train, n_heldout, seed, width, height)
    }

    pub fn dataset_in(
        &self,
        range: &PoseRange,
        n_train: usize,
        n_heldout: usize,
        seed: u64,
        width: usize,
        height: usize,
    ) -> Result<SyntheticSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let poses: Vec<Pose> = (0..n_train).map(|_| self.random_pose(&mut rng, range)).collect();
        let train = poses
            .iter()
            .map(|p| self.sample(*p, width, height))
            .collect::<Result<Vec<_>>>()?;
        let heldout = (0..n_heldout)
            .map(|k| {
                let a = poses[(2 * k) % n_train.max(1)];
                let b = poses[(2 * k + 1) % n_train.max(1)];
                self.sample(a.lerp(&b, 0.5), width, height)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SyntheticSet { train, heldout })
    }
}

/// Mean distance in pixels between corresponding vertices.
pub fn mean_vertex_error_px(a: &DeformState, b: &DeformState, width: usize, height: usize) -> f64 {
    let (sx, sy) = (width as f64 / 2.0, height as f64 / 2.0);
    let n = a.vertices.len().max(1) as f64;
    a.vertices
        .iter()
        .zip(&b.vertices)
        .map(|(p, q)| ((p[0] - q[0]) * sx).hypot((p[1] - q[1]) * sy))
        .sum::<f64>()
        / n
}
