use super::gemm;
use super::tensor::Tensor;
use crate::volume::{axis_stencil, AxisStencil, GridDims};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Tanh,
}

/// Backward rule for an op defined outside this module.
pub trait CustomBackward: Send + Sync {
    /// Returns one gradient buffer per input, each shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Constant,
    Leaf,
    Conv3d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
        cols: Vec<Vec<f64>>,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Act {
        input: Var,
        kind: Activation,
    },
    Softmax {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    ChannelsLast {
        input: Var,
    },
    Upsample2x {
        input: Var,
    },
    Sample {
        field: Var,
        coords: Var,
        stencils: Vec<[AxisStencil; 3]>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u8>,
        probs: Vec<f64>,
    },
    SoftDice {
        probs: Var,
        targets: Vec<u8>,
        eps: f64,
    },
    DeformPenalty {
        d: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    Dot {
        input: Var,
        weights: Vec<f64>,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<dyn CustomBackward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

fn conv_out(n: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if n + 2 * padding < k {
        return Err(shape_err(format!(
            "conv extent {n} with padding {padding} smaller than kernel {k}"
        )));
    }
    Ok((n + 2 * padding - k) / stride + 1)
}

struct ConvGeom {
    cin: usize,
    inp: [usize; 3],
    ker: [usize; 3],
    out: [usize; 3],
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.cin * self.ker.iter().product::<usize>()
    }
    fn out_len(&self) -> usize {
        self.out.iter().product()
    }
    fn in_len(&self) -> usize {
        self.inp.iter().product()
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.out_len();
    let mut cols = vec![0.0; g.rows() * p];
    let [id, ih, iw] = g.inp;
    let [kd, kh, kw] = g.ker;
    let [od, oh, ow] = g.out;
    let (s, pad) = (g.stride as isize, g.padding as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * g.in_len()..(c + 1) * g.in_len()];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - pad;
                        if iz < 0 || iz >= id as isize {
                            o += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < iw as isize {
                                    dst[o] = xc[base + ix as usize];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.out_len();
    let [id, ih, iw] = g.inp;
    let [kd, kh, kw] = g.ker;
    let [od, oh, ow] = g.out;
    let (s, pad) = (g.stride as isize, g.padding as isize);
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &mut dx[c * g.in_len()..(c + 1) * g.in_len()];
        for kz in 0..kd {
            for ky in 0..kh {
                for kx in 0..kw {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut o = 0;
                    for oz in 0..od {
                        let iz = oz as isize * s + kz as isize - pad;
                        if iz < 0 || iz >= id as isize {
                            o += oh * ow;
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as isize * s + ky as isize - pad;
                            if iy < 0 || iy >= ih as isize {
                                o += ow;
                                continue;
                            }
                            let base = (iz as usize * ih + iy as usize) * iw;
                            for ox in 0..ow {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < iw as isize {
                                    xc[base + ix as usize] += src[o];
                                }
                                o += 1;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Accepts `[C, D, H, W]` or `[1, C, D, H, W]`.
fn field_geometry(shape: &[usize]) -> Result<(usize, GridDims)> {
    let s = match shape {
        [c, d, h, w] => [*c, *d, *h, *w],
        [1, c, d, h, w] => [*c, *d, *h, *w],
        _ => return Err(shape_err(format!("expected a [C, D, H, W] field, got {shape:?}"))),
    };
    Ok((s[0], GridDims::new(s[1], s[2], s[3])?))
}

fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Identity => x,
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu(a) => {
            if x > 0.0 {
                x
            } else {
                a * x
            }
        }
        Activation::Tanh => x.tanh(),
    }
}

fn row_softmax(row: &[f64], out: &mut [f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(row) {
        *o = (z - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    m + sum.ln()
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [n, c] => Ok((*n, *c)),
        s => Err(shape_err(format!("{what} expects a [N, C] tensor, got {s:?}"))),
    }
}

fn check_targets(targets: &[u8], n: usize, c: usize) -> Result<()> {
    if targets.len() != n {
        return Err(shape_err(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= c) {
        return Err(shape_err(format!("target class {t} with only {c} channels")));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical("non-finite value produced on tape".into()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A gradient-requiring input (parameters, or inputs under test).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// 3-D cross-correlation. `input` is `[B, Cin, D, H, W]`, `weight` is
    /// `[Cout, Cin, kd, kh, kw]`, `bias` is `[Cout]`.
    pub fn conv3d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(shape_err("conv3d stride must be at least 1"));
        }
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (b, cin, inp) = match xs.as_slice() {
            [b, c, d, h, w] => (*b, *c, [*d, *h, *w]),
            s => return Err(shape_err(format!("conv3d input must be 5-D, got {s:?}"))),
        };
        let (cout, ker) = match ws.as_slice() {
            [o, c, kd, kh, kw] if *c == cin => (*o, [*kd, *kh, *kw]),
            s => {
                return Err(shape_err(format!(
                    "conv3d weight {s:?} incompatible with {cin} input channels"
                )))
            }
        };
        if let Some(bv) = bias {
            if self.value(bv).shape() != [cout] {
                return Err(shape_err(format!(
                    "conv3d bias {:?} but {cout} output channels",
                    self.value(bv).shape()
                )));
            }
        }
        let out = [
            conv_out(inp[0], ker[0], stride, padding)?,
            conv_out(inp[1], ker[1], stride, padding)?,
            conv_out(inp[2], ker[2], stride, padding)?,
        ];
        let g = ConvGeom {
            cin,
            inp,
            ker,
            out,
            stride,
            padding,
        };
        let (p, k) = (g.out_len(), g.rows());
        let mut y = vec![0.0; b * cout * p];
        let mut saved = Vec::with_capacity(b);
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let bias_v = bias.map(|bv| self.value(bv).data());
            for bi in 0..b {
                let cols = im2col(&x[bi * cin * g.in_len()..(bi + 1) * cin * g.in_len()], &g);
                let yb = &mut y[bi * cout * p..(bi + 1) * cout * p];
                if let Some(bias_v) = bias_v {
                    for (c, chunk) in yb.chunks_mut(p).enumerate() {
                        chunk.fill(bias_v[c]);
                    }
                    gemm::nn(cout, k, p, w, &cols, yb, 1.0);
                } else {
                    gemm::nn(cout, k, p, w, &cols, yb, 0.0);
                }
                saved.push(cols);
            }
        }
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|v| self.needs(v));
        let value = Tensor::new(&[b, cout, out[0], out[1], out[2]], y)?;
        self.push(
            value,
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols: if needs { saved } else { Vec::new() },
            },
            needs,
        )
    }

    /// `y = x W^T + b` with `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, din) = matrix_dims(self.value(input), "linear")?;
        let (dout, win) = matrix_dims(self.value(weight), "linear weight")?;
        if win != din {
            return Err(shape_err(format!("linear weight expects {win} inputs, got {din}")));
        }
        let mut y = vec![0.0; n * dout];
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            if bd.len() != dout {
                return Err(shape_err(format!("linear bias has {} entries, need {dout}", bd.len())));
            }
            for row in y.chunks_mut(dout) {
                row.copy_from_slice(bd);
            }
        }
        gemm::nt(
            n,
            din,
            dout,
            self.value(input).data(),
            self.value(weight).data(),
            &mut y,
            if bias.is_some() { 1.0 } else { 0.0 },
        );
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|v| self.needs(v));
        self.push(Tensor::new(&[n, dout], y)?, Op::Linear { input, weight, bias }, needs)
    }

    pub fn activation(&mut self, input: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(input);
        }
        let x = self.value(input);
        let shape = x.shape().to_vec();
        let y: Vec<f64> = x.data().iter().map(|&v| activate(kind, v)).collect();
        let needs = self.needs(input);
        self.push(Tensor::new(&shape, y)?, Op::Act { input, kind }, needs)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Relu)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        self.activation(input, Activation::LeakyRelu(slope))
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        self.activation(input, Activation::Tanh)
    }

    /// Softmax over the channel (last) axis of an `[N, C]` tensor.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(input), "softmax")?;
        let x = self.value(input).data();
        let mut y = vec![0.0; n * c];
        for (row, out) in x.chunks(c).zip(y.chunks_mut(c)) {
            row_softmax(row, out);
        }
        let needs = self.needs(input);
        self.push(Tensor::new(&[n, c], y)?, Op::Softmax { input }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(format!("add of {:?} and {:?}", ta.shape(), tb.shape())));
        }
        let y: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let shape = ta.shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&shape, y)?, Op::Add { a, b }, needs)
    }

    /// Concatenates `[N, C_i]` tensors along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let mut widths = Vec::with_capacity(inputs.len());
        let mut rows = None;
        for &v in inputs {
            let (n, c) = matrix_dims(self.value(v), "concat")?;
            if *rows.get_or_insert(n) != n {
                return Err(shape_err("concat inputs disagree on row count"));
            }
            widths.push(c);
        }
        let n = rows.unwrap_or(0);
        let total: usize = widths.iter().sum();
        let mut y = vec![0.0; n * total];
        let mut off = 0;
        for (&v, &c) in inputs.iter().zip(&widths) {
            let x = self.value(v).data();
            for r in 0..n {
                y[r * total + off..r * total + off + c].copy_from_slice(&x[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            Tensor::new(&[n, total], y)?,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        let needs = self.needs(input);
        self.push(value, Op::Reshape { input }, needs)
    }

    /// `[C, D, H, W]` (or with a leading batch of 1) to `[D*H*W, C]`.
    pub fn channels_last(&mut self, input: Var) -> Result<Var> {
        let (c, dims) = field_geometry(self.value(input).shape())?;
        let s = dims.len();
        let x = self.value(input).data();
        let mut y = vec![0.0; s * c];
        for ch in 0..c {
            for i in 0..s {
                y[i * c + ch] = x[ch * s + i];
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(&[s, c], y)?, Op::ChannelsLast { input }, needs)
    }

    /// Nearest-neighbor 2x upsampling of a `[B, C, D, H, W]` tensor.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (b, c, d, h, w) = match self.value(input).shape() {
            [b, c, d, h, w] => (*b, *c, *d, *h, *w),
            s => return Err(shape_err(format!("upsample2x expects 5-D input, got {s:?}"))),
        };
        let x = self.value(input).data();
        let (d2, h2, w2) = (2 * d, 2 * h, 2 * w);
        let mut y = vec![0.0; b * c * d2 * h2 * w2];
        for bc in 0..b * c {
            let src = &x[bc * d * h * w..(bc + 1) * d * h * w];
            let dst = &mut y[bc * d2 * h2 * w2..(bc + 1) * d2 * h2 * w2];
            for z in 0..d2 {
                for yy in 0..h2 {
                    let srow = ((z / 2) * h + yy / 2) * w;
                    let drow = (z * h2 + yy) * w2;
                    for xx in 0..w2 {
                        dst[drow + xx] = src[srow + xx / 2];
                    }
                }
            }
        }
        let needs = self.needs(input);
        self.push(Tensor::new(&[b, c, d2, h2, w2], y)?, Op::Upsample2x { input }, needs)
    }

    /// Trilinear sampling of a `[C, D, H, W]` field at `[N, 3]` normalized
    /// `(x, y, z)` coordinates, giving `[N, C]`. Out-of-range coordinates are
    /// clamped and receive no coordinate gradient.
    pub fn sample(&mut self, field: Var, coords: Var) -> Result<Var> {
        let (c, dims) = field_geometry(self.value(field).shape())?;
        let (n, three) = matrix_dims(self.value(coords), "sample coords")?;
        if three != 3 {
            return Err(shape_err(format!("sample coords need 3 columns, got {three}")));
        }
        let f = self.value(field).data();
        let p = self.value(coords).data();
        let mut y = vec![0.0; n * c];
        let mut stencils = Vec::with_capacity(n);
        for (row, out) in p.chunks(3).zip(y.chunks_mut(c)) {
            let st = [
                axis_stencil(row[0], dims.w),
                axis_stencil(row[1], dims.h),
                axis_stencil(row[2], dims.d),
            ];
            crate::volume::interp::blend_channels(f, c, dims, &st, out);
            stencils.push(st);
        }
        let needs = self.needs(field) || self.needs(coords);
        self.push(
            Tensor::new(&[n, c], y)?,
            Op::Sample {
                field,
                coords,
                stencils,
            },
            needs,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u8]) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(logits), "cross_entropy")?;
        check_targets(targets, n, c)?;
        let z = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut total = 0.0;
        for (r, (row, out)) in z.chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let lse = row_softmax(row, out);
            total += lse - row[targets[r] as usize];
        }
        let needs = self.needs(logits);
        self.push(
            Tensor::scalar(total / n.max(1) as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        )
    }

    /// `1 - mean_c (2 sum(p y) + eps) / (sum p + sum y + eps)` over every
    /// channel, background included.
    pub fn soft_dice(&mut self, probs: Var, targets: &[u8]) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(probs), "soft_dice")?;
        check_targets(targets, n, c)?;
        let (inter, union) = dice_sums(self.value(probs).data(), targets, c);
        let mean: f64 = inter
            .iter()
            .zip(&union)
            .map(|(i, u)| (2.0 * i + DICE_EPS) / (u + DICE_EPS))
            .sum::<f64>()
            / c as f64;
        let needs = self.needs(probs);
        self.push(
            Tensor::scalar(1.0 - mean),
            Op::SoftDice {
                probs,
                targets: targets.to_vec(),
                eps: DICE_EPS,
            },
            needs,
        )
    }

    /// Mean Euclidean norm of the rows of an `[N, 3]` displacement tensor.
    pub fn deformation_penalty(&mut self, d: Var) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(d), "deformation_penalty")?;
        if c != 3 {
            return Err(shape_err(format!("deformation needs 3 channels, got {c}")));
        }
        let total: f64 = self
            .value(d)
            .data()
            .chunks(3)
            .map(|r| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt())
            .sum();
        let needs = self.needs(d);
        self.push(Tensor::scalar(total / n.max(1) as f64), Op::DeformPenalty { d }, needs)
    }

    /// `sum_k w_k * s_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err(format!("weighted_sum term of shape {:?}", t.shape())));
            }
            total += w * t.data()[0];
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            needs,
        )
    }

    /// `sum_i w_i * x_i`, a scalar probe of any tensor.
    pub fn dot(&mut self, input: Var, weights: &[f64]) -> Result<Var> {
        let x = self.value(input).data();
        if x.len() != weights.len() {
            return Err(shape_err(format!("dot of {} values with {} weights", x.len(), weights.len())));
        }
        let s = x.iter().zip(weights).map(|(a, b)| a * b).sum();
        let needs = self.needs(input);
        self.push(
            Tensor::scalar(s),
            Op::Dot {
                input,
                weights: weights.to_vec(),
            },
            needs,
        )
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: Box<dyn CustomBackward>) -> Result<Var> {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar root, got {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                for (v, contrib) in self.node_backward(node, &g) {
                    accumulate(&mut grads[v.0], contrib);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Conv3d {
                input,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let xs = self.value(*input).shape();
                let ws = self.value(*weight).shape();
                let ys = node.value.shape();
                let geom = ConvGeom {
                    cin: xs[1],
                    inp: [xs[2], xs[3], xs[4]],
                    ker: [ws[2], ws[3], ws[4]],
                    out: [ys[2], ys[3], ys[4]],
                    stride: *stride,
                    padding: *padding,
                };
                let (b, cout, p, k) = (xs[0], ws[0], geom.out_len(), geom.rows());
                let w = self.value(*weight).data();
                let mut dw = vec![0.0; cout * k];
                let mut db = vec![0.0; cout];
                let mut dx = vec![0.0; b * geom.cin * geom.in_len()];
                let mut dcols = vec![0.0; k * p];
                for bi in 0..b {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    if self.needs(*weight) {
                        gemm::nt(cout, p, k, gb, &cols[bi], &mut dw, 1.0);
                    }
                    if bias.is_some() {
                        for (c, chunk) in gb.chunks(p).enumerate() {
                            db[c] += chunk.iter().sum::<f64>();
                        }
                    }
                    if self.needs(*input) {
                        gemm::tn(k, cout, p, w, gb, &mut dcols, 0.0);
                        let span = geom.cin * geom.in_len();
                        col2im(&dcols, &geom, &mut dx[bi * span..(bi + 1) * span]);
                    }
                }
                if self.needs(*input) {
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    out.push((*weight, dw));
                }
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        out.push((*bv, db));
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let (n, din) = matrix_dims(self.value(*input), "").unwrap();
                let dout = self.value(*weight).shape()[0];
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * din];
                    gemm::nn(n, dout, din, g, self.value(*weight).data(), &mut dx, 0.0);
                    out.push((*input, dx));
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; dout * din];
                    gemm::tn(dout, n, din, g, self.value(*input).data(), &mut dw, 0.0);
                    out.push((*weight, dw));
                }
                if let Some(bv) = bias {
                    if self.needs(*bv) {
                        let mut db = vec![0.0; dout];
                        for row in g.chunks(dout) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        out.push((*bv, db));
                    }
                }
            }
            Op::Act { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx: Vec<f64> = match kind {
                    Activation::Identity => g.to_vec(),
                    Activation::Relu => x.iter().zip(g).map(|(&x, &g)| if x > 0.0 { g } else { 0.0 }).collect(),
                    Activation::LeakyRelu(a) => x
                        .iter()
                        .zip(g)
                        .map(|(&x, &g)| if x > 0.0 { g } else { a * g })
                        .collect(),
                    Activation::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (1.0 - y * y)).collect(),
                };
                out.push((*input, dx));
            }
            Op::Softmax { input } => {
                let c = node.value.shape()[1];
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dr[k] = yr[k] * (gr[k] - s);
                    }
                }
                out.push((*input, dx));
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Concat { inputs } => {
                let total = node.value.shape()[1];
                let n = node.value.shape()[0];
                let mut off = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.needs(v) {
                        let mut dx = vec![0.0; n * c];
                        for r in 0..n {
                            dx[r * c..(r + 1) * c].copy_from_slice(&g[r * total + off..r * total + off + c]);
                        }
                        out.push((v, dx));
                    }
                    off += c;
                }
            }
            Op::Reshape { input } => out.push((*input, g.to_vec())),
            Op::ChannelsLast { input } => {
                let (s, c) = (node.value.shape()[0], node.value.shape()[1]);
                let mut dx = vec![0.0; s * c];
                for i in 0..s {
                    for ch in 0..c {
                        dx[ch * s + i] = g[i * c + ch];
                    }
                }
                out.push((*input, dx));
            }
            Op::Upsample2x { input } => {
                let xs = self.value(*input).shape();
                let (bc, d, h, w) = (xs[0] * xs[1], xs[2], xs[3], xs[4]);
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![0.0; bc * d * h * w];
                for k in 0..bc {
                    let src = &g[k * 8 * d * h * w..(k + 1) * 8 * d * h * w];
                    let dst = &mut dx[k * d * h * w..(k + 1) * d * h * w];
                    for z in 0..2 * d {
                        for yy in 0..h2 {
                            let drow = ((z / 2) * h + yy / 2) * w;
                            let srow = (z * h2 + yy) * w2;
                            for xx in 0..w2 {
                                dst[drow + xx / 2] += src[srow + xx];
                            }
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::Sample {
                field,
                coords,
                stencils,
            } => {
                let (c, dims) = field_geometry(self.value(*field).shape()).unwrap();
                let s = dims.len();
                let f = self.value(*field).data();
                let want_field = self.needs(*field);
                let want_coords = self.needs(*coords);
                let mut dfield = if want_field { vec![0.0; c * s] } else { Vec::new() };
                let mut dcoords = if want_coords { vec![0.0; stencils.len() * 3] } else { Vec::new() };
                let scale = [
                    0.5 * (dims.w - 1) as f64,
                    0.5 * (dims.h - 1) as f64,
                    0.5 * (dims.d - 1) as f64,
                ];
                for (n, st) in stencils.iter().enumerate() {
                    let gn = &g[n * c..(n + 1) * c];
                    let (idx, w) = crate::volume::interp::corner_weights(dims, st);
                    if want_field {
                        for (ch, &gv) in gn.iter().enumerate() {
                            let base = &mut dfield[ch * s..(ch + 1) * s];
                            for k in 0..8 {
                                base[idx[k]] += w[k] * gv;
                            }
                        }
                    }
                    if want_coords {
                        let wx = [1.0 - st[0].frac, st[0].frac];
                        let wy = [1.0 - st[1].frac, st[1].frac];
                        let wz = [1.0 - st[2].frac, st[2].frac];
                        const SIGN: [f64; 2] = [-1.0, 1.0];
                        let mut dwdu = [[0.0; 8]; 3];
                        let mut k = 0;
                        for dz in 0..2 {
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    dwdu[0][k] = wz[dz] * wy[dy] * SIGN[dx];
                                    dwdu[1][k] = wz[dz] * SIGN[dy] * wx[dx];
                                    dwdu[2][k] = SIGN[dz] * wy[dy] * wx[dx];
                                    k += 1;
                                }
                            }
                        }
                        for axis in 0..3 {
                            if st[axis].clamped {
                                continue;
                            }
                            let mut acc = 0.0;
                            for (ch, &gv) in gn.iter().enumerate() {
                                let base = &f[ch * s..(ch + 1) * s];
                                let mut dv = 0.0;
                                for k in 0..8 {
                                    dv += dwdu[axis][k] * base[idx[k]];
                                }
                                acc += gv * dv;
                            }
                            dcoords[n * 3 + axis] = acc * scale[axis];
                        }
                    }
                }
                if want_field {
                    out.push((*field, dfield));
                }
                if want_coords {
                    out.push((*coords, dcoords));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n.max(1);
                let scale = g[0] / n.max(1) as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * c + t as usize] -= scale;
                }
                out.push((*logits, dx));
            }
            Op::SoftDice { probs, targets, eps } => {
                let p = self.value(*probs).data();
                let c = self.value(*probs).shape()[1];
                let (inter, union) = dice_sums(p, targets, c);
                let scale = -g[0] / c as f64;
                // d/dp[n,k] of (2I_k + eps)/(U_k + eps)
                let denom: Vec<f64> = union.iter().map(|u| u + eps).collect();
                let numer: Vec<f64> = inter.iter().map(|i| 2.0 * i + eps).collect();
                let mut dx = vec![0.0; p.len()];
                for (r, &t) in targets.iter().enumerate() {
                    for k in 0..c {
                        let y = if t as usize == k { 1.0 } else { 0.0 };
                        dx[r * c + k] = scale * (2.0 * y * denom[k] - numer[k]) / (denom[k] * denom[k]);
                    }
                }
                out.push((*probs, dx));
            }
            Op::DeformPenalty { d } => {
                let x = self.value(*d).data();
                let n = x.len() / 3;
                let scale = g[0] / n.max(1) as f64;
                let mut dx = vec![0.0; x.len()];
                for (r, dr) in x.chunks(3).zip(dx.chunks_mut(3)) {
                    let norm = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
                    if norm > 0.0 {
                        for k in 0..3 {
                            dr[k] = scale * r[k] / norm;
                        }
                    }
                }
                out.push((*d, dx));
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        out.push((v, vec![w * g[0]]));
                    }
                }
            }
            Op::Dot { input, weights } => {
                out.push((*input, weights.iter().map(|w| w * g[0]).collect()));
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let grads = backward.backward(&ins, &node.value, g);
                for (&v, dv) in inputs.iter().zip(grads) {
                    if self.needs(v) {
                        out.push((v, dv));
                    }
                }
            }
        }
        out
    }
}

fn dice_sums(p: &[f64], targets: &[u8], c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut inter = vec![0.0; c];
    let mut union = vec![0.0; c];
    for (row, &t) in p.chunks(c).zip(targets) {
        for k in 0..c {
            union[k] += row[k];
        }
        inter[t as usize] += row[t as usize];
        union[t as usize] += 1.0;
    }
    (inter, union)
}

fn accumulate(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}
