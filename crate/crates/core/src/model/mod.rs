//! The deformation network.
//!
//! The encoder takes an RGB image through three stride-2 convolutions and
//! three fully connected layers down to a 512-wide latent code. The decoder
//! maps the code through three fully connected layers to one offset per
//! vertex plus a global translation, which are added to the rest pose.
//!
//! The last decoder layer is stored as two matrices, `dec3_off` producing the
//! `2|V|` offsets and `dec3_bias` producing the translation. Together they are
//! a single affine layer with `2|V| + 2` outputs.

mod file;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Checkpoint, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::image::Image;
use crate::puppet::{DeformState, Puppet};

pub use file::{sha256_hex, ModelManifest};

pub const LATENT_DIM: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Input resolution; both must be multiples of 8.
    pub width: usize,
    pub height: usize,
    pub conv_channels: [usize; 3],
    /// Widths of the two hidden encoder layers after the convolutions.
    pub encoder_hidden: [usize; 2],
    pub decoder_hidden: [usize; 2],
    /// Offsets are clamped to `[-cap, cap]` (NDC units).
    pub offset_cap: f64,
    pub leaky_slope: f64,
    /// Multiplier on the initial range of the last decoder layer, so an
    /// untrained model starts near the rest pose.
    pub final_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 256,
            height: 256,
            conv_channels: [32, 64, 128],
            encoder_hidden: [1024, 1024],
            decoder_hidden: [1024, 1024],
            offset_cap: 2.0,
            leaky_slope: 0.2,
            final_init_scale: 0.01,
        }
    }
}

impl ModelConfig {
    /// Small widths for tests and quick experiments.
    pub fn tiny(width: usize, height: usize) -> Self {
        ModelConfig {
            width,
            height,
            conv_channels: [4, 8, 8],
            encoder_hidden: [32, 32],
            decoder_hidden: [32, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(8) || !self.height.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "model resolution must be a positive multiple of 8, got {}x{}",
                self.width, self.height
            )));
        }
        let widths = self.conv_channels.iter().chain(&self.encoder_hidden).chain(&self.decoder_hidden);
        if widths.clone().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.offset_cap > 0.0) || !(self.leaky_slope >= 0.0) || !(self.final_init_scale >= 0.0) {
            return Err(Error::Config(format!(
                "offset_cap must be positive and leaky_slope, final_init_scale non-negative: {self:?}"
            )));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        self.conv_channels[2] * (self.width / 8) * (self.height / 8)
    }

    /// Parameter names and shapes in checkpoint order.
    fn layout(&self, vertex_count: usize) -> Vec<(String, Vec<usize>)> {
        let c = self.conv_channels;
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &co) in c.iter().enumerate() {
            out.push((format!("conv{}.w", i + 1), vec![5, 5, cin, co]));
            out.push((format!("conv{}.b", i + 1), vec![co]));
            cin = co;
        }
        let enc = [self.flat_features(), self.encoder_hidden[0], self.encoder_hidden[1], LATENT_DIM];
        for i in 0..3 {
            out.push((format!("enc{}.w", i + 1), vec![enc[i], enc[i + 1]]));
            out.push((format!("enc{}.b", i + 1), vec![1, enc[i + 1]]));
        }
        let dec = [LATENT_DIM, self.decoder_hidden[0], self.decoder_hidden[1]];
        for i in 0..2 {
            out.push((format!("dec{}.w", i + 1), vec![dec[i], dec[i + 1]]));
            out.push((format!("dec{}.b", i + 1), vec![1, dec[i + 1]]));
        }
        let h = self.decoder_hidden[1];
        out.push(("dec3_off.w".into(), vec![h, 2 * vertex_count]));
        out.push(("dec3_off.b".into(), vec![1, 2 * vertex_count]));
        out.push(("dec3_bias.w".into(), vec![h, 2]));
        out.push(("dec3_bias.b".into(), vec![1, 2]));
        out
    }
}

/// A 512-wide latent code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Latent(Vec<f64>);

impl Latent {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return Err(Error::shape("latent", format!("{} values, expected {LATENT_DIM}", z.len())));
        }
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(Latent(z))
    }

    pub fn zeros() -> Self {
        Latent(vec![0.0; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `(1 − t)·a + t·b`.
    pub fn lerp(&self, other: &Latent, t: f64) -> Latent {
        Latent(self.0.iter().zip(&other.0).map(|(a, b)| (1.0 - t) * a + t * b).collect())
    }
}

impl TryFrom<Vec<f64>> for Latent {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Latent::new(v)
    }
}

impl From<Latent> for Vec<f64> {
    fn from(z: Latent) -> Self {
        z.0
    }
}

/// Model parameters registered in a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    fn pair(&self, layer: usize) -> (Var, Var) {
        (self.vars[2 * layer], self.vars[2 * layer + 1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformModel {
    pub config: ModelConfig,
    pub vertex_count: usize,
    names: Vec<String>,
    pub params: Vec<Tensor>,
}

/// Composites transparent pixels over white and keeps RGB.
pub fn prepare_input(img: &Image) -> Image {
    match img.channels {
        3 => img.clone(),
        _ => img.to_rgb_over([1.0; 3]),
    }
}

impl DeformModel {
    /// Weights uniform in `±√(6/fan_in)`, biases zero; the last decoder layer
    /// is further scaled by `final_init_scale`.
    pub fn new(config: ModelConfig, vertex_count: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = config.layout(vertex_count);
        let mut params = Vec::with_capacity(layout.len());
        for (name, shape) in &layout {
            let n: usize = shape.iter().product();
            let t = if name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                let fan_in: usize = shape[..shape.len() - 1].iter().product();
                let mut limit = (6.0 / fan_in as f64).sqrt();
                if name.starts_with("dec3") {
                    limit *= config.final_init_scale;
                }
                let data = (0..n).map(|_| rng.random_range(-1.0..=1.0) * limit).collect();
                Tensor::new(shape.clone(), data)?
            };
            params.push(t);
        }
        Ok(DeformModel {
            config,
            vertex_count,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            params,
        })
    }

    /// All parameters zero.
    pub fn zeros(config: ModelConfig, vertex_count: usize) -> Result<Self> {
        let mut m = DeformModel::new(config, vertex_count, 0)?;
        for p in &mut m.params {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(m)
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.params[i])
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn check_puppet(&self, puppet: &Puppet) -> Result<()> {
        if puppet.vertex_count() != self.vertex_count {
            return Err(Error::shape(
                "decode",
                format!(
                    "model has {} vertices, puppet has {}",
                    self.vertex_count,
                    puppet.vertex_count()
                ),
            ));
        }
        Ok(())
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| if trainable { g.leaf(p.clone()) } else { g.constant(p.clone()) })
            .collect();
        Bound { vars }
    }

    /// Stacks images into an `[N,H,W,3]` tensor at the model resolution.
    pub fn input_tensor(&self, images: &[&Image]) -> Result<Tensor> {
        let (w, h) = (self.config.width, self.config.height);
        let mut data = Vec::with_capacity(images.len() * w * h * 3);
        for img in images {
            if img.width != w || img.height != h {
                return Err(Error::shape(
                    "encode",
                    format!("image is {}x{}, model expects {w}x{h}", img.width, img.height),
                ));
            }
            data.extend_from_slice(&prepare_input(img).data);
        }
        Tensor::new(vec![images.len(), h, w, 3], data)
    }

    fn dense(&self, g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        let ones = g.constant(Tensor::filled(&[n, 1], 1.0));
        let xw = g.matmul(x, w)?;
        let bb = g.matmul(ones, b)?;
        g.add(xw, bb)
    }

    /// `[N,H,W,3] → [N,512]`.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let slope = self.config.leaky_slope;
        let mut h = x;
        for layer in 0..3 {
            let (w, b) = p.pair(layer);
            h = g.conv2d(h, w, Some(b), 2, 2)?;
            h = g.leaky_relu(h, slope)?;
        }
        let n = g.shape(h)[0];
        h = g.reshape(h, &[n, self.config.flat_features()])?;
        for layer in 3..6 {
            let (w, b) = p.pair(layer);
            h = self.dense(g, h, w, b)?;
            if layer < 5 {
                h = g.leaky_relu(h, slope)?;
            }
        }
        Ok(h)
    }

    /// `[N,512]` latents to one `[V,2]` vertex array per row.
    pub fn decode_graph(&self, g: &mut Graph, p: &Bound, z: Var, rest: &[Point2]) -> Result<Vec<Var>> {
        let slope = self.config.leaky_slope;
        let mut h = z;
        for layer in 6..8 {
            let (w, b) = p.pair(layer);
            h = self.dense(g, h, w, b)?;
            h = g.leaky_relu(h, slope)?;
        }
        self.decode_head(g, p, h, rest)
    }

    /// The last decoder stage: hidden activations `[N,hidden]` to vertices,
    /// `rest + clamp(offsets) + translation`.
    pub fn decode_head(&self, g: &mut Graph, p: &Bound, h: Var, rest: &[Point2]) -> Result<Vec<Var>> {
        if rest.len() != self.vertex_count {
            return Err(Error::shape(
                "decode",
                format!("model has {} vertices, rest pose has {}", self.vertex_count, rest.len()),
            ));
        }
        let (wo, bo) = p.pair(8);
        let (wb, bb) = p.pair(9);
        let off = self.dense(g, h, wo, bo)?;
        let cap = self.config.offset_cap;
        let off = g.clamp(off, -cap, cap)?;
        let shift = self.dense(g, h, wb, bb)?;
        let v = self.vertex_count;
        let rest_t = g.constant(Tensor::new(vec![v, 2], rest.iter().flat_map(|p| [p[0], p[1]]).collect())?);
        let ones = g.constant(Tensor::filled(&[v, 1], 1.0));
        let n = g.shape(h)[0];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let oi = g.slice(off, i, 1)?;
            let oi = g.reshape(oi, &[v, 2])?;
            let si = g.slice(shift, i, 1)?;
            let si = g.matmul(ones, si)?;
            let moved = g.add(rest_t, oi)?;
            out.push(g.add(moved, si)?);
        }
        Ok(out)
    }

    pub fn encode(&self, img: &Image) -> Result<Latent> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(self.input_tensor(&[img])?);
        let z = self.encode_graph(&mut g, &p, x)?;
        Latent::new(g.value(z).data().to_vec())
    }

    pub fn decode(&self, z: &Latent, puppet: &Puppet) -> Result<DeformState> {
        self.check_puppet(puppet)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let zt = g.constant(Tensor::new(vec![1, LATENT_DIM], z.as_slice().to_vec())?);
        let v = self.decode_graph(&mut g, &p, zt, &puppet.rest_vertices)?;
        let s = DeformState::from_flat(g.value(v[0]).data());
        if s.vertices.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
            return Err(Error::NonFinite("decoded vertices".into()));
        }
        Ok(s)
    }

    pub fn predict(&self, img: &Image, puppet: &Puppet) -> Result<(Latent, DeformState)> {
        let z = self.encode(img)?;
        let s = self.decode(&z, puppet)?;
        Ok((z, s))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            tensors: self.names.iter().cloned().zip(self.params.iter().cloned()).collect(),
        }
    }

    pub fn from_checkpoint(config: ModelConfig, vertex_count: usize, ckpt: &Checkpoint) -> Result<Self> {
        let mut m = DeformModel::zeros(config, vertex_count)?;
        if ckpt.tensors.len() != m.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, model needs {}",
                ckpt.tensors.len(),
                m.params.len()
            )));
        }
        for ((name, slot), (cname, t)) in m.names.iter().zip(&mut m.params).zip(&ckpt.tensors) {
            if name != cname || slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "expected {name} {:?}, found {cname} {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name} has non-finite values")));
            }
            *slot = t.clone();
        }
        Ok(m)
    }
}
