//! The implicit reconstruction network.
//!
//! A strided CNN encoder turns the input volume into a feature pyramid. Each
//! query point is encoded as the trilinearly sampled features of every level
//! plus its own coordinates. A shared MLP trunk maps the encoding to a bounded
//! displacement `d` and an additive correction `c`, and the class logits are
//! `t(p + d) + c`, where `t` is a frozen template decoded from a learned
//! latent vector.

mod config;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nn::{checkpoint, Activation, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::volume::{voxel_center_coord, ChannelGrid, GridDims, LabelVolume, NormCoord};
use crate::{Error, Result};

pub use config::{EncoderConfig, ModelConfig, PointHeadConfig, TemplateConfig, LEAKY_SLOPE};

type Layer = (ParamId, ParamId);

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn conv_layer(store: &mut ParamStore, name: &str, cout: usize, cin: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    let w = store.add_he_uniform(format!("{name}.weight"), &[cout, cin, 3, 3, 3], cin * 27, rng)?;
    let b = store.add_zeros(format!("{name}.bias"), &[cout])?;
    Ok((w, b))
}

fn linear_layer(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> Result<Layer> {
    let w = store.add_he_uniform(format!("{name}.weight"), &[out, inp], inp, rng)?;
    let b = store.add_zeros(format!("{name}.bias"), &[out])?;
    Ok((w, b))
}

/// Multi-resolution feature grids, each `[1, C, D, H, W]`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    stages: Vec<Layer>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = config.in_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(conv_layer(&mut store, &format!("encoder.stage{i}"), c, cin, rng)?);
            cin = c;
        }
        Ok(Self { config, store, stages })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [b, c, d, h, w] = match shape {
            [b, c, d, h, w] => [*b, *c, *d, *h, *w],
            s => return Err(shape_err(format!("encoder input must be [1, C, D, H, W], got {s:?}"))),
        };
        if b != 1 || c != self.config.in_channels {
            return Err(shape_err(format!(
                "encoder expects [1, {}, ..] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        let k = self.config.divisor();
        if [d, h, w].iter().any(|&n| n % k != 0 || n / k < 2) {
            return Err(shape_err(format!(
                "encoder input dims {:?} must be multiples of {k} with at least 2 voxels per axis at the coarsest level",
                [d, h, w]
            )));
        }
        Ok(())
    }

    /// One stride-2 convolution per stage; returns every stage output.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Vec<Var>> {
        self.check_input(tape.value(input).shape())?;
        let mut x = input;
        let mut levels = Vec::with_capacity(self.stages.len());
        for &(w, b) in &self.stages {
            let y = tape.conv3d(x, bound.var(w), Some(bound.var(b)), 2, 1)?;
            x = tape.activation(y, self.config.activation)?;
            levels.push(x);
        }
        Ok(levels)
    }

    pub fn pyramid(&self, input: &Tensor) -> Result<FeaturePyramid> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let levels = self.encode(&mut tape, &bound, x)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| tape.value(v).clone()).collect(),
        })
    }
}

/// `[trilinear(F_1, p), .., trilinear(F_n, p), p]` for `[N, 3]` coordinates.
pub fn point_encoding(tape: &mut Tape, levels: &[Var], coords: Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(levels.len() + 1);
    for &level in levels {
        parts.push(tape.sample(level, coords)?);
    }
    parts.push(coords);
    tape.concat(&parts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TemplateNet {
    pub config: TemplateConfig,
    pub num_classes: usize,
    pub store: ParamStore,
    latent: ParamId,
    project: Layer,
    stages: Vec<Layer>,
    output: Layer,
}

impl TemplateNet {
    pub fn new(config: TemplateConfig, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let latent = store.add(
            "template.latent",
            Tensor::from_fn(&[1, config.latent_dim], |_| rng.random_range(-1.0..1.0)),
        )?;
        let base = config.base_resolution.pow(3) * config.base_channels;
        let project = linear_layer(&mut store, "template.project", base, config.latent_dim, rng)?;
        let mut stages = Vec::new();
        let mut cin = config.base_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            stages.push(conv_layer(&mut store, &format!("template.stage{i}"), c, cin, rng)?);
            cin = c;
        }
        let output = conv_layer(&mut store, "template.output", num_classes, cin, rng)?;
        Ok(Self {
            config,
            num_classes,
            store,
            latent,
            project,
            stages,
            output,
        })
    }

    pub fn output_shape(config: &TemplateConfig, num_classes: usize) -> [usize; 4] {
        let r = config.resolution();
        [num_classes, r, r, r]
    }

    /// Template logits `[1, K+1, R, R, R]`.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let slope = Activation::LeakyRelu(LEAKY_SLOPE);
        let b = self.config.base_resolution;
        let h = tape.linear(bound.var(self.latent), bound.var(self.project.0), Some(bound.var(self.project.1)))?;
        let h = tape.activation(h, slope)?;
        let mut x = tape.reshape(h, &[1, self.config.base_channels, b, b, b])?;
        for &(w, bias) in &self.stages {
            let up = tape.upsample2x(x)?;
            let y = tape.conv3d(up, bound.var(w), Some(bound.var(bias)), 1, 1)?;
            x = tape.activation(y, slope)?;
        }
        tape.conv3d(x, bound.var(self.output.0), Some(bound.var(self.output.1)), 1, 1)
    }

    /// Evaluates the template without recording gradients.
    pub fn generate(&self) -> Result<ChannelGrid> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound)?;
        let r = self.config.resolution();
        ChannelGrid::new(self.num_classes, GridDims::cube(r)?, tape.value(out).data().to_vec())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &[&self.store])
    }

    /// Restores template weights saved by [`TemplateNet::save`] or
    /// [`ImplicitModel::save`]; other parameters in the file are ignored.
    pub fn load(config: TemplateConfig, num_classes: usize, path: &std::path::Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let mut net = Self::new(config, num_classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::restore_into(&mut net.store, &loaded)?;
        Ok(net)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointHead {
    pub config: PointHeadConfig,
    pub store: ParamStore,
    trunk: Vec<Layer>,
    deform: Layer,
    correct: Layer,
}

/// Per-point head outputs: `d` is `[N, 3]`, `c` is `[N, K+1]`.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutputs {
    pub deformation: Var,
    pub correction: Var,
}

impl PointHead {
    pub fn new(config: PointHeadConfig, encoding_width: usize, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut trunk = Vec::new();
        let mut inp = encoding_width;
        for (i, &w) in config.hidden.iter().enumerate() {
            trunk.push(linear_layer(&mut store, &format!("head.trunk{i}"), w, inp, rng)?);
            inp = w;
        }
        let head = |store: &mut ParamStore, name: &str, out: usize, rng: &mut ChaCha8Rng| -> Result<Layer> {
            if config.zero_init_heads {
                Ok((
                    store.add_zeros(format!("{name}.weight"), &[out, inp])?,
                    store.add_zeros(format!("{name}.bias"), &[out])?,
                ))
            } else {
                linear_layer(store, name, out, inp, rng)
            }
        };
        let deform = head(&mut store, "head.deform", 3, rng)?;
        let correct = head(&mut store, "head.correct", num_classes, rng)?;
        Ok(Self {
            config,
            store,
            trunk,
            deform,
            correct,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, encoding: Var) -> Result<HeadOutputs> {
        let mut h = encoding;
        for &(w, b) in &self.trunk {
            let y = tape.linear(h, bound.var(w), Some(bound.var(b)))?;
            h = tape.activation(y, self.config.activation)?;
        }
        let d = tape.linear(h, bound.var(self.deform.0), Some(bound.var(self.deform.1)))?;
        let deformation = tape.tanh(d)?;
        let correction = tape.linear(h, bound.var(self.correct.0), Some(bound.var(self.correct.1)))?;
        Ok(HeadOutputs {
            deformation,
            correction,
        })
    }

    /// Displacement `d` in `(-1, 1)^3`.
    pub fn deform(&self, tape: &mut Tape, bound: &Bound, encoding: Var) -> Result<Var> {
        Ok(self.forward(tape, bound, encoding)?.deformation)
    }

    /// Additive logit correction `c`.
    pub fn correct(&self, tape: &mut Tape, bound: &Bound, encoding: Var) -> Result<Var> {
        Ok(self.forward(tape, bound, encoding)?.correction)
    }
}

/// `logits = t(p + d) + c`. The template is sampled with clamping, so the
/// deformed query never leaves `[-1, 1]^3`.
pub fn pipeline_forward(tape: &mut Tape, template: Var, coords: Var, heads: HeadOutputs) -> Result<Var> {
    let moved = tape.add(coords, heads.deformation)?;
    let sampled = tape.sample(template, moved)?;
    tape.add(sampled, heads.correction)
}

/// Tape handles of a bound model.
pub struct BoundModel {
    pub encoder: Bound,
    pub head: Bound,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct PointOutputs {
    pub logits: Var,
    pub deformation: Var,
    pub correction: Var,
}

/// Encoder, point head and frozen template, with the template's logits
/// cached as a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImplicitModel {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: PointHead,
    pub template: TemplateNet,
    field: ChannelGrid,
}

/// Points evaluated per tape during dense inference.
pub const INFER_CHUNK: usize = 4096;

impl ImplicitModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut rng)?;
        let head = PointHead::new(config.head.clone(), config.encoding_width(), config.num_classes, &mut rng)?;
        let template = TemplateNet::new(config.template.clone(), config.num_classes, &mut rng)?;
        let field = template.generate()?;
        Ok(Self {
            config,
            encoder,
            head,
            template,
            field,
        })
    }

    /// Replaces the template network and re-evaluates its field.
    pub fn set_template(&mut self, template: TemplateNet) -> Result<()> {
        if template.config != self.config.template || template.num_classes != self.config.num_classes {
            return Err(Error::CheckpointMismatch("template configuration differs from model".into()));
        }
        self.field = template.generate()?;
        self.template = template;
        Ok(())
    }

    pub fn template_field(&self) -> &ChannelGrid {
        &self.field
    }

    fn template_tensor(&self) -> Tensor {
        let r = self.field.dims();
        Tensor::new(&[self.field.channels(), r.d, r.h, r.w], self.field.data().to_vec())
            .expect("template grid shape")
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel {
            encoder: self.encoder.store.bind(tape, trainable),
            head: self.head.store.bind(tape, trainable),
        }
    }

    /// Full forward pass for `[N, 3]` coordinates against a `[1, C, D, H, W]`
    /// input; the template enters as a constant.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundModel, input: &Tensor, coords: &Tensor) -> Result<PointOutputs> {
        let x = tape.constant(input.clone());
        let levels = self.encoder.encode(tape, &bound.encoder, x)?;
        self.forward_levels(tape, bound, &levels, coords)
    }

    fn forward_levels(&self, tape: &mut Tape, bound: &BoundModel, levels: &[Var], coords: &Tensor) -> Result<PointOutputs> {
        let p = tape.constant(coords.clone());
        let enc = point_encoding(tape, levels, p)?;
        let heads = self.head.forward(tape, &bound.head, enc)?;
        let template = tape.constant(self.template_tensor());
        let logits = pipeline_forward(tape, template, p, heads)?;
        Ok(PointOutputs {
            logits,
            deformation: heads.deformation,
            correction: heads.correction,
        })
    }

    /// Logits `[N, K+1]` at the given points for a precomputed pyramid.
    pub fn point_logits(&self, pyramid: &FeaturePyramid, points: &[NormCoord]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let levels: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let coords = coords_tensor(points);
        let out = self.forward_levels(&mut tape, &bound, &levels, &coords)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Displacements `[N, 3]` at the given points.
    pub fn point_deformation(&self, pyramid: &FeaturePyramid, points: &[NormCoord]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let levels: Vec<Var> = pyramid.levels.iter().map(|t| tape.constant(t.clone())).collect();
        let coords = coords_tensor(points);
        let out = self.forward_levels(&mut tape, &bound, &levels, &coords)?;
        Ok(tape.value(out.deformation).clone())
    }

    /// Argmax labels at every voxel center of `out_dims` (ties go to the lower
    /// class). Chunks are evaluated in parallel; each point's result does not
    /// depend on the chunking.
    pub fn infer(&self, input: &Tensor, out_dims: GridDims) -> Result<LabelVolume> {
        let pyramid = self.encoder.pyramid(input)?;
        self.infer_with_pyramid(&pyramid, out_dims)
    }

    pub fn infer_with_pyramid(&self, pyramid: &FeaturePyramid, out_dims: GridDims) -> Result<LabelVolume> {
        let k = self.config.num_classes;
        let n = out_dims.len();
        let chunks: Vec<Result<Vec<u8>>> = (0..n.div_ceil(INFER_CHUNK))
            .into_par_iter()
            .map(|c| {
                let range = c * INFER_CHUNK..((c + 1) * INFER_CHUNK).min(n);
                let points: Vec<NormCoord> = range.map(|i| voxel_point(out_dims, i)).collect();
                let logits = self.point_logits(pyramid, &points)?;
                Ok(logits.data().chunks(k).map(argmax).collect())
            })
            .collect();
        let mut labels = Vec::with_capacity(n);
        for chunk in chunks {
            labels.extend(chunk?);
        }
        LabelVolume::new(out_dims, k as u8, labels)
    }

    /// Saves all parameters (encoder, head, template) to one checkpoint.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::save(path, &[&self.encoder.store, &self.head.store, &self.template.store])
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&[&self.encoder.store, &self.head.store, &self.template.store])
    }

    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let loaded = checkpoint::load(path)?;
        let mut model = Self::new(config, 0)?;
        checkpoint::restore_into(&mut model.encoder.store, &loaded)?;
        checkpoint::restore_into(&mut model.head.store, &loaded)?;
        checkpoint::restore_into(&mut model.template.store, &loaded)?;
        model.field = model.template.generate()?;
        Ok(model)
    }
}

/// Normalized coordinate of voxel `i` of `dims`.
pub fn voxel_point(dims: GridDims, i: usize) -> NormCoord {
    let (z, y, x) = dims.coords(i);
    NormCoord::new(
        voxel_center_coord(x, dims.w),
        voxel_center_coord(y, dims.h),
        voxel_center_coord(z, dims.d),
    )
}

/// `[N, 3]` tensor of `(x, y, z)` rows.
pub fn coords_tensor(points: &[NormCoord]) -> Tensor {
    let data = points.iter().flat_map(|p| p.as_array()).collect();
    Tensor::new(&[points.len(), 3], data).expect("row count matches")
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: &[f64]) -> u8 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests;
