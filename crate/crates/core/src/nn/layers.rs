use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{keypoints_to_heatmaps, soft_argmax, spatial_softmax};
use super::{matmul, Mode, NnError, Param, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Dropout {
        rate: f64,
    },
    Linear {
        inputs: usize,
        outputs: usize,
    },
    /// Transposed convolution without padding.
    UpConv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
    },
    /// Spatial softmax followed by soft-argmax: N×K×I×J to N×2K.
    SpatialSoftArgmax,
    /// N×2K keypoints to N×K×height×width Laplace maps.
    Heatmap {
        sigma: f64,
        height: usize,
        width: usize,
    },
    Flatten,
}

fn shape_err(spec: &LayerSpec, input: &[usize]) -> NnError {
    NnError::Shape(format!("{spec:?} cannot take input {input:?}"))
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, NnError> {
        let bad = || shape_err(self, input);
        Ok(match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => match input[..] {
                [n, c, h, w] if c == in_ch && h + 2 * padding >= kernel && w + 2 * padding >= kernel => {
                    vec![n, out_ch, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1]
                }
                _ => return Err(bad()),
            },
            LayerSpec::BatchNorm { channels } => {
                if input.len() < 2 || input[1] != channels {
                    return Err(bad());
                }
                input.to_vec()
            }
            LayerSpec::Relu | LayerSpec::Dropout { .. } => input.to_vec(),
            LayerSpec::Linear { inputs, outputs } => match input[..] {
                [n, i] if i == inputs => vec![n, outputs],
                _ => return Err(bad()),
            },
            LayerSpec::UpConv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => match input[..] {
                [n, c, h, w] if c == in_ch && h > 0 && w > 0 => vec![n, out_ch, (h - 1) * stride + kernel, (w - 1) * stride + kernel],
                _ => return Err(bad()),
            },
            LayerSpec::SpatialSoftArgmax => match input[..] {
                [n, c, _, _] => vec![n, 2 * c],
                _ => return Err(bad()),
            },
            LayerSpec::Heatmap { height, width, .. } => match input[..] {
                [n, c] if c % 2 == 0 => vec![n, c / 2, height, width],
                _ => return Err(bad()),
            },
            LayerSpec::Flatten => {
                if input.is_empty() {
                    return Err(bad());
                }
                vec![input[0], input[1..].iter().product()]
            }
        })
    }

    fn validate(&self) -> Result<(), NnError> {
        let ok = match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                ..
            } => in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0,
            LayerSpec::BatchNorm { channels } => channels > 0,
            LayerSpec::Dropout { rate } => (0.0..1.0).contains(&rate),
            LayerSpec::Linear { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::UpConv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => in_ch > 0 && out_ch > 0 && kernel > 0 && stride > 0,
            LayerSpec::Heatmap { sigma, height, width } => sigma > 0.0 && height > 0 && width > 0,
            LayerSpec::Relu | LayerSpec::SpatialSoftArgmax | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(NnError::InvalidLayer(format!("{self:?}")))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, cols: &mut [T]) {
    let np = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let y = (oy * s + ki) as isize - p as isize;
                    for ox in 0..ow {
                        let xx = (ox * s + kj) as isize - p as isize;
                        dst[oy * ow + ox] = if y >= 0 && (y as usize) < h && xx >= 0 && (xx as usize) < w {
                            x[(ch * h + y as usize) * w + xx as usize]
                        } else {
                            T::ZERO
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, oh: usize, ow: usize, x: &mut [T]) {
    let np = oh * ow;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..oh {
                    let y = (oy * s + ki) as isize - p as isize;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for ox in 0..ow {
                        let xx = (ox * s + kj) as isize - p as isize;
                        if xx >= 0 && (xx as usize) < w {
                            x[(ch * h + y as usize) * w + xx as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn uniform_init<T: Real>(n: usize, bound: f64, rng: &mut impl Rng) -> Vec<T> {
    (0..n).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect()
}

#[derive(Debug, Clone)]
pub struct Conv<T: Real> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cols: Vec<T>,
    in_shape: Vec<usize>,
    out_hw: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct UpConv<T: Real> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Stored as in_ch × (out_ch·k·k).
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T: Real> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
    mode: Mode,
}

#[derive(Debug, Clone)]
pub struct Linear<T: Real> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Dropout<T: Real> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<T>>,
}

#[derive(Debug, Clone)]
pub enum Layer<T: Real> {
    Conv(Conv<T>),
    BatchNorm(BatchNorm<T>),
    Relu { mask: Vec<bool> },
    Dropout(Dropout<T>),
    Linear(Linear<T>),
    UpConv(UpConv<T>),
    SpatialSoftArgmax { probs: Tensor<T> },
    Heatmap { sigma: f64, height: usize, width: usize, keypoints: Tensor<T>, maps: Tensor<T> },
    Flatten { shape: Vec<usize> },
}

impl<T: Real> Layer<T> {
    /// Layer with zeroed parameters (BatchNorm: unit scale and variance).
    pub fn zeroed(spec: &LayerSpec) -> Result<Self, NnError> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => Layer::Conv(Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                weight: Param::new(&[out_ch, in_ch * kernel * kernel], vec![T::ZERO; out_ch * in_ch * kernel * kernel]),
                bias: Param::new(&[out_ch], vec![T::ZERO; out_ch]),
                cols: Vec::new(),
                in_shape: Vec::new(),
                out_hw: (0, 0),
            }),
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm {
                channels,
                gamma: Param::new(&[channels], vec![T::ONE; channels]),
                beta: Param::new(&[channels], vec![T::ZERO; channels]),
                running_mean: vec![T::ZERO; channels],
                running_var: vec![T::ONE; channels],
                momentum: 0.1,
                eps: 1e-5,
                xhat: Vec::new(),
                inv_std: Vec::new(),
                shape: Vec::new(),
                mode: Mode::Eval,
            }),
            LayerSpec::Relu => Layer::Relu { mask: Vec::new() },
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(0),
                mask: None,
            }),
            LayerSpec::Linear { inputs, outputs } => Layer::Linear(Linear {
                inputs,
                outputs,
                weight: Param::new(&[outputs, inputs], vec![T::ZERO; outputs * inputs]),
                bias: Param::new(&[outputs], vec![T::ZERO; outputs]),
                input: Tensor::zeros(&[0]),
            }),
            LayerSpec::UpConv {
                in_ch,
                out_ch,
                kernel,
                stride,
            } => Layer::UpConv(UpConv {
                in_ch,
                out_ch,
                kernel,
                stride,
                weight: Param::new(&[in_ch, out_ch * kernel * kernel], vec![T::ZERO; in_ch * out_ch * kernel * kernel]),
                bias: Param::new(&[out_ch], vec![T::ZERO; out_ch]),
                input: Tensor::zeros(&[0]),
            }),
            LayerSpec::SpatialSoftArgmax => Layer::SpatialSoftArgmax { probs: Tensor::zeros(&[0]) },
            LayerSpec::Heatmap { sigma, height, width } => Layer::Heatmap {
                sigma,
                height,
                width,
                keypoints: Tensor::zeros(&[0]),
                maps: Tensor::zeros(&[0]),
            },
            LayerSpec::Flatten => Layer::Flatten { shape: Vec::new() },
        })
    }

    /// Randomly initialised layer: uniform ±1/√fan_in for weights and biases.
    pub fn build(spec: &LayerSpec, rng: &mut impl Rng) -> Result<Self, NnError> {
        let mut l = Self::zeroed(spec)?;
        match &mut l {
            Layer::Conv(c) => {
                let b = 1.0 / ((c.in_ch * c.kernel * c.kernel) as f64).sqrt();
                c.weight.value = uniform_init(c.weight.value.len(), b, rng);
                c.bias.value = uniform_init(c.out_ch, b, rng);
            }
            Layer::UpConv(c) => {
                let b = 1.0 / ((c.in_ch * c.kernel * c.kernel) as f64).sqrt();
                c.weight.value = uniform_init(c.weight.value.len(), b, rng);
                c.bias.value = uniform_init(c.out_ch, b, rng);
            }
            Layer::Linear(c) => {
                let b = 1.0 / (c.inputs as f64).sqrt();
                c.weight.value = uniform_init(c.weight.value.len(), b, rng);
                c.bias.value = uniform_init(c.outputs, b, rng);
            }
            Layer::Dropout(d) => d.rng = ChaCha8Rng::seed_from_u64(rng.gen()),
            _ => {}
        }
        Ok(l)
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(c) => LayerSpec::Conv {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::BatchNorm(b) => LayerSpec::BatchNorm { channels: b.channels },
            Layer::Relu { .. } => LayerSpec::Relu,
            Layer::Dropout(d) => LayerSpec::Dropout { rate: d.rate },
            Layer::Linear(l) => LayerSpec::Linear {
                inputs: l.inputs,
                outputs: l.outputs,
            },
            Layer::UpConv(c) => LayerSpec::UpConv {
                in_ch: c.in_ch,
                out_ch: c.out_ch,
                kernel: c.kernel,
                stride: c.stride,
            },
            Layer::SpatialSoftArgmax { .. } => LayerSpec::SpatialSoftArgmax,
            Layer::Heatmap { sigma, height, width, .. } => LayerSpec::Heatmap {
                sigma: *sigma,
                height: *height,
                width: *width,
            },
            Layer::Flatten { .. } => LayerSpec::Flatten,
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::UpConv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Linear(c) => vec![&mut c.weight, &mut c.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            _ => vec![],
        }
    }

    /// Named state tensors (parameters then running statistics), in a fixed order.
    pub fn state(&self) -> Vec<(&'static str, Vec<usize>, &[T])> {
        match self {
            Layer::Conv(c) => vec![("weight", c.weight.shape.clone(), &c.weight.value), ("bias", c.bias.shape.clone(), &c.bias.value)],
            Layer::UpConv(c) => vec![("weight", c.weight.shape.clone(), &c.weight.value), ("bias", c.bias.shape.clone(), &c.bias.value)],
            Layer::Linear(c) => vec![("weight", c.weight.shape.clone(), &c.weight.value), ("bias", c.bias.shape.clone(), &c.bias.value)],
            Layer::BatchNorm(b) => vec![
                ("gamma", vec![b.channels], &b.gamma.value),
                ("beta", vec![b.channels], &b.beta.value),
                ("running_mean", vec![b.channels], &b.running_mean),
                ("running_var", vec![b.channels], &b.running_var),
            ],
            _ => vec![],
        }
    }

    fn state_mut(&mut self) -> Vec<&mut Vec<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight.value, &mut c.bias.value],
            Layer::UpConv(c) => vec![&mut c.weight.value, &mut c.bias.value],
            Layer::Linear(c) => vec![&mut c.weight.value, &mut c.bias.value],
            Layer::BatchNorm(b) => vec![&mut b.gamma.value, &mut b.beta.value, &mut b.running_mean, &mut b.running_var],
            _ => vec![],
        }
    }

    /// Overwrites the state tensors from values in the order of [`Layer::state`].
    pub fn load_state(&mut self, values: &[Vec<f64>]) -> Result<(), NnError> {
        let slots = self.state_mut();
        if slots.len() != values.len() {
            return Err(NnError::Shape(format!("expected {} state tensors, got {}", slots.len(), values.len())));
        }
        for (dst, src) in slots.into_iter().zip(values) {
            if dst.len() != src.len() {
                return Err(NnError::Shape(format!("state tensor has {} values, expected {}", src.len(), dst.len())));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                *d = T::from_f64(*s);
            }
        }
        Ok(())
    }

    /// Same layer in another precision.
    pub fn cast<U: Real>(&self) -> Layer<U> {
        let mut out = Layer::<U>::zeroed(&self.spec()).expect("spec already validated");
        let vals: Vec<Vec<f64>> = self.state().iter().map(|(_, _, v)| v.iter().map(|x| x.to_f64()).collect()).collect();
        out.load_state(&vals).expect("same spec");
        if let (Layer::Dropout(a), Layer::Dropout(b)) = (self, &mut out) {
            b.rng = a.rng.clone();
        }
        out
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let out_shape = self.spec().output_shape(&x.shape)?;
        match self {
            Layer::Conv(c) => {
                let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let ckk = c.in_ch * c.kernel * c.kernel;
                let np = oh * ow;
                c.cols.resize(n * ckk * np, T::ZERO);
                let mut out = Tensor::zeros(&out_shape);
                let in_sz = c.in_ch * h * w;
                for b in 0..n {
                    let cols = &mut c.cols[b * ckk * np..(b + 1) * ckk * np];
                    im2col(&x.data[b * in_sz..(b + 1) * in_sz], c.in_ch, h, w, c.kernel, c.stride, c.padding, oh, ow, cols);
                    let o = &mut out.data[b * c.out_ch * np..(b + 1) * c.out_ch * np];
                    for (ch, row) in o.chunks_mut(np).enumerate() {
                        row.iter_mut().for_each(|v| *v = c.bias.value[ch]);
                    }
                    matmul(&c.weight.value, false, cols, false, o, c.out_ch, ckk, np, true);
                }
                c.in_shape = x.shape.clone();
                c.out_hw = (oh, ow);
                Ok(out)
            }
            Layer::UpConv(c) => {
                let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let okk = c.out_ch * c.kernel * c.kernel;
                let hw = h * w;
                let mut cols = vec![T::ZERO; okk * hw];
                let mut out = Tensor::zeros(&out_shape);
                let out_sz = c.out_ch * oh * ow;
                for b in 0..n {
                    matmul(&c.weight.value, true, &x.data[b * c.in_ch * hw..(b + 1) * c.in_ch * hw], false, &mut cols, okk, c.in_ch, hw, false);
                    let o = &mut out.data[b * out_sz..(b + 1) * out_sz];
                    for (ch, plane) in o.chunks_mut(oh * ow).enumerate() {
                        plane.iter_mut().for_each(|v| *v = c.bias.value[ch]);
                    }
                    col2im(&cols, c.out_ch, oh, ow, c.kernel, c.stride, 0, h, w, o);
                }
                c.input = x.clone();
                Ok(out)
            }
            Layer::Linear(l) => {
                let n = x.shape[0];
                let mut out = Tensor::zeros(&out_shape);
                for row in out.data.chunks_mut(l.outputs) {
                    row.copy_from_slice(&l.bias.value);
                }
                matmul(&x.data, false, &l.weight.value, true, &mut out.data, n, l.inputs, l.outputs, true);
                l.input = x.clone();
                Ok(out)
            }
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::Relu { mask } => {
                let mut out = x.clone();
                mask.clear();
                mask.extend(x.data.iter().map(|&v| v > T::ZERO));
                for (o, &m) in out.data.iter_mut().zip(mask.iter()) {
                    if !m {
                        *o = T::ZERO;
                    }
                }
                Ok(out)
            }
            Layer::Dropout(d) => {
                if mode == Mode::Eval || d.rate == 0.0 {
                    d.mask = None;
                    return Ok(x.clone());
                }
                let keep = T::from_f64(1.0 / (1.0 - d.rate));
                let mask: Vec<T> = (0..x.len()).map(|_| if d.rng.gen::<f64>() >= d.rate { keep } else { T::ZERO }).collect();
                let mut out = x.clone();
                out.data.iter_mut().zip(&mask).for_each(|(o, &m)| *o *= m);
                d.mask = Some(mask);
                Ok(out)
            }
            Layer::SpatialSoftArgmax { probs } => {
                *probs = spatial_softmax(x)?;
                soft_argmax(probs)
            }
            Layer::Heatmap {
                sigma,
                height,
                width,
                keypoints,
                maps,
            } => {
                *maps = keypoints_to_heatmaps(x, *sigma, *height, *width)?;
                *keypoints = x.clone();
                Ok(maps.clone())
            }
            Layer::Flatten { shape } => {
                *shape = x.shape.clone();
                x.clone().reshaped(&out_shape)
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        match self {
            Layer::Conv(c) => {
                let (n, h, w) = (c.in_shape[0], c.in_shape[2], c.in_shape[3]);
                let (oh, ow) = c.out_hw;
                let np = oh * ow;
                let ckk = c.in_ch * c.kernel * c.kernel;
                check_len(g, n * c.out_ch * np)?;
                let mut dx = Tensor::zeros(&c.in_shape);
                let mut dcols = vec![T::ZERO; ckk * np];
                let in_sz = c.in_ch * h * w;
                for b in 0..n {
                    let gb = &g.data[b * c.out_ch * np..(b + 1) * c.out_ch * np];
                    let cols = &c.cols[b * ckk * np..(b + 1) * ckk * np];
                    matmul(gb, false, cols, true, &mut c.weight.grad, c.out_ch, np, ckk, true);
                    for (ch, row) in gb.chunks(np).enumerate() {
                        c.bias.grad[ch] += row.iter().copied().sum();
                    }
                    matmul(&c.weight.value, true, gb, false, &mut dcols, ckk, c.out_ch, np, false);
                    col2im(&dcols, c.in_ch, h, w, c.kernel, c.stride, c.padding, oh, ow, &mut dx.data[b * in_sz..(b + 1) * in_sz]);
                }
                Ok(dx)
            }
            Layer::UpConv(c) => {
                let x = &c.input;
                let (n, h, w) = (x.shape[0], x.shape[2], x.shape[3]);
                let hw = h * w;
                let (oh, ow) = ((h - 1) * c.stride + c.kernel, (w - 1) * c.stride + c.kernel);
                let okk = c.out_ch * c.kernel * c.kernel;
                let out_sz = c.out_ch * oh * ow;
                check_len(g, n * out_sz)?;
                let mut dcols = vec![T::ZERO; okk * hw];
                let mut dx = Tensor::zeros(&x.shape);
                for b in 0..n {
                    let gb = &g.data[b * out_sz..(b + 1) * out_sz];
                    for (ch, plane) in gb.chunks(oh * ow).enumerate() {
                        c.bias.grad[ch] += plane.iter().copied().sum();
                    }
                    im2col(gb, c.out_ch, oh, ow, c.kernel, c.stride, 0, h, w, &mut dcols);
                    let xb = &x.data[b * c.in_ch * hw..(b + 1) * c.in_ch * hw];
                    matmul(xb, false, &dcols, true, &mut c.weight.grad, c.in_ch, hw, okk, true);
                    matmul(&c.weight.value, false, &dcols, false, &mut dx.data[b * c.in_ch * hw..(b + 1) * c.in_ch * hw], c.in_ch, okk, hw, false);
                }
                Ok(dx)
            }
            Layer::Linear(l) => {
                let n = l.input.shape[0];
                check_len(g, n * l.outputs)?;
                matmul(&g.data, true, &l.input.data, false, &mut l.weight.grad, l.outputs, n, l.inputs, true);
                for row in g.data.chunks(l.outputs) {
                    for (bg, &v) in l.bias.grad.iter_mut().zip(row) {
                        *bg += v;
                    }
                }
                let mut dx = Tensor::zeros(&l.input.shape);
                matmul(&g.data, false, &l.weight.value, false, &mut dx.data, n, l.outputs, l.inputs, false);
                Ok(dx)
            }
            Layer::BatchNorm(bn) => bn.backward(g),
            Layer::Relu { mask } => {
                check_len(g, mask.len())?;
                let mut dx = g.clone();
                for (d, &m) in dx.data.iter_mut().zip(mask.iter()) {
                    if !m {
                        *d = T::ZERO;
                    }
                }
                Ok(dx)
            }
            Layer::Dropout(d) => {
                let mut dx = g.clone();
                if let Some(mask) = &d.mask {
                    check_len(g, mask.len())?;
                    dx.data.iter_mut().zip(mask).for_each(|(v, &m)| *v *= m);
                }
                Ok(dx)
            }
            Layer::SpatialSoftArgmax { probs } => {
                let (n, c, hh, ww) = (probs.shape[0], probs.shape[1], probs.shape[2], probs.shape[3]);
                check_len(g, n * 2 * c)?;
                let mut dx = Tensor::zeros(&probs.shape);
                for b in 0..n {
                    for k in 0..c {
                        let base = (b * c + k) * hh * ww;
                        let p = &probs.data[base..base + hh * ww];
                        let (mut u, mut v) = (T::ZERO, T::ZERO);
                        for i in 0..hh {
                            for j in 0..ww {
                                u += p[i * ww + j] * T::from_f64(i as f64 / hh as f64);
                                v += p[i * ww + j] * T::from_f64(j as f64 / ww as f64);
                            }
                        }
                        let gu = g.data[b * 2 * c + 2 * k];
                        let gv = g.data[b * 2 * c + 2 * k + 1];
                        for i in 0..hh {
                            let a = T::from_f64(i as f64 / hh as f64) - u;
                            for j in 0..ww {
                                let bb = T::from_f64(j as f64 / ww as f64) - v;
                                dx.data[base + i * ww + j] = p[i * ww + j] * (gu * a + gv * bb);
                            }
                        }
                    }
                }
                Ok(dx)
            }
            Layer::Heatmap {
                sigma,
                height,
                width,
                keypoints,
                maps,
            } => {
                let (n, two_k) = (keypoints.shape[0], keypoints.shape[1]);
                let kk = two_k / 2;
                let (hh, ww) = (*height, *width);
                check_len(g, maps.len())?;
                let mut dk = Tensor::zeros(&keypoints.shape);
                for b in 0..n {
                    for c in 0..kk {
                        let u = keypoints.data[b * two_k + 2 * c].to_f64() * hh as f64;
                        let v = keypoints.data[b * two_k + 2 * c + 1].to_f64() * ww as f64;
                        let base = (b * kk + c) * hh * ww;
                        let (mut du, mut dv) = (0.0f64, 0.0f64);
                        for m in 0..hh {
                            let su = sign(m as f64 - u);
                            for j in 0..ww {
                                let gv = g.data[base + m * ww + j].to_f64() * maps.data[base + m * ww + j].to_f64();
                                du += gv * su;
                                dv += gv * sign(j as f64 - v);
                            }
                        }
                        dk.data[b * two_k + 2 * c] = T::from_f64(du * hh as f64 / *sigma);
                        dk.data[b * two_k + 2 * c + 1] = T::from_f64(dv * ww as f64 / *sigma);
                    }
                }
                Ok(dk)
            }
            Layer::Flatten { shape } => g.clone().reshaped(shape),
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_len<T: Real>(g: &Tensor<T>, n: usize) -> Result<(), NnError> {
    if g.len() == n {
        Ok(())
    } else {
        Err(NnError::Shape(format!("gradient has {} values, expected {n}", g.len())))
    }
}

impl<T: Real> BatchNorm<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let n = x.shape[0];
        let c = self.channels;
        let inner: usize = x.shape[2..].iter().product();
        let m = n * inner;
        let mut out = x.clone();
        self.shape = x.shape.clone();
        self.mode = mode;
        self.xhat.resize(x.len(), T::ZERO);
        self.inv_std.resize(c, T::ZERO);
        for ch in 0..c {
            let (mean, var) = if mode == Mode::Train {
                let mut s = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    s += x.data[off..off + inner].iter().map(|v| v.to_f64()).sum::<f64>();
                }
                let mean = s / m as f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    let off = (b * c + ch) * inner;
                    sq += x.data[off..off + inner].iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>();
                }
                let var = sq / m as f64;
                let mo = self.momentum;
                let unbiased = if m > 1 { var * m as f64 / (m - 1) as f64 } else { var };
                self.running_mean[ch] = T::from_f64((1.0 - mo) * self.running_mean[ch].to_f64() + mo * mean);
                self.running_var[ch] = T::from_f64((1.0 - mo) * self.running_var[ch].to_f64() + mo * unbiased);
                (mean, var)
            } else {
                (self.running_mean[ch].to_f64(), self.running_var[ch].to_f64())
            };
            let inv = 1.0 / (var + self.eps).sqrt();
            self.inv_std[ch] = T::from_f64(inv);
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let xh = (x.data[i] - mean_t) * inv_t;
                    self.xhat[i] = xh;
                    out.data[i] = g * xh + bt;
                }
            }
        }
        Ok(out)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        check_len(g, self.xhat.len())?;
        let n = self.shape[0];
        let c = self.channels;
        let inner: usize = self.shape[2..].iter().product();
        let m = (n * inner) as f64;
        let mut dx = Tensor::zeros(&self.shape);
        for ch in 0..c {
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for b in 0..n {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    sg += g.data[i].to_f64();
                    sgx += (g.data[i] * self.xhat[i]).to_f64();
                }
            }
            self.beta.grad[ch] += T::from_f64(sg);
            self.gamma.grad[ch] += T::from_f64(sgx);
            let gamma = self.gamma.value[ch];
            let inv = self.inv_std[ch];
            for b in 0..n {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    dx.data[i] = if self.mode == Mode::Train {
                        // sums of dxhat are gamma times the sums above
                        gamma * inv * (g.data[i] - T::from_f64(sg / m) - self.xhat[i] * T::from_f64(sgx / m))
                    } else {
                        gamma * inv * g.data[i]
                    };
                }
            }
        }
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_negative_is_zero() {
        let mut l = Layer::<f32>::zeroed(&LayerSpec::Relu).unwrap();
        let x = Tensor::from_vec(&[2, 3], vec![-1.0, -0.5, -3.0, -0.1, -2.0, -9.0]).unwrap();
        assert!(l.forward(&x, Mode::Train).unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Layer::<f32>::zeroed(&LayerSpec::BatchNorm { channels: 3 }).unwrap();
        let x = Tensor::from_vec(&[8, 3, 5, 5], (0..600).map(|_| rng.gen_range(-4.0f32..9.0)).collect()).unwrap();
        let y = l.forward(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..8).flat_map(|b| y.data[(b * 3 + ch) * 25..(b * 3 + ch + 1) * 25].iter().map(|&v| v as f64).collect::<Vec<_>>()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn conv_identity_kernel() {
        let spec = LayerSpec::Conv {
            in_ch: 2,
            out_ch: 2,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let mut l = Layer::<f64>::zeroed(&spec).unwrap();
        if let Layer::Conv(c) = &mut l {
            // out channel o reads the centre tap of in channel o
            for o in 0..2 {
                c.weight.value[o * 18 + o * 9 + 4] = 1.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 2, 5, 7], &mut rng);
        assert_eq!(l.forward(&x, Mode::Eval).unwrap(), x);
    }

    #[test]
    fn conv_matches_direct_oracle() {
        let spec = LayerSpec::Conv {
            in_ch: 3,
            out_ch: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Layer::<f64>::build(&spec, &mut rng).unwrap();
        let x = rand_tensor(&[2, 3, 9, 8], &mut rng);
        let y = l.forward(&x, Mode::Eval).unwrap();
        let Layer::Conv(c) = &l else { unreachable!() };
        let (oh, ow) = (y.shape[2], y.shape[3]);
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = c.bias.value[o];
                        for i in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let (yy, xx) = ((oy * 2 + ki) as i64 - 1, (ox * 2 + kj) as i64 - 1);
                                    if yy >= 0 && yy < 9 && xx >= 0 && xx < 8 {
                                        s += c.weight.value[o * 27 + i * 9 + ki * 3 + kj] * x.data[((b * 3 + i) * 9 + yy as usize) * 8 + xx as usize];
                                    }
                                }
                            }
                        }
                        assert!((s - y.data[((b * 4 + o) * oh + oy) * ow + ox]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn upconv_matches_scatter_oracle() {
        let spec = LayerSpec::UpConv {
            in_ch: 2,
            out_ch: 3,
            kernel: 3,
            stride: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = Layer::<f64>::build(&spec, &mut rng).unwrap();
        let x = rand_tensor(&[1, 2, 3, 4], &mut rng);
        let y = l.forward(&x, Mode::Eval).unwrap();
        let Layer::UpConv(c) = &l else { unreachable!() };
        let (oh, ow) = (7, 9);
        assert_eq!(y.shape, vec![1, 3, oh, ow]);
        let mut expect = vec![0.0; 3 * oh * ow];
        for o in 0..3 {
            for v in &mut expect[o * oh * ow..(o + 1) * oh * ow] {
                *v = c.bias.value[o];
            }
        }
        for i in 0..2 {
            for yy in 0..3 {
                for xx in 0..4 {
                    for o in 0..3 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                expect[(o * oh + yy * 2 + ki) * ow + xx * 2 + kj] += c.weight.value[i * 27 + o * 9 + ki * 3 + kj] * x.data[(i * 3 + yy) * 4 + xx];
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut l = Layer::<f64>::build(&LayerSpec::Dropout { rate: 0.25 }, &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 4000], vec![1.0; 4000]).unwrap();
        assert_eq!(l.forward(&x, Mode::Eval).unwrap(), x);
        let y = l.forward(&x, Mode::Train).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let mean = y.data.iter().sum::<f64>() / 4000.0;
        assert!((mean - 1.0).abs() < 0.05);
    }

    #[test]
    fn shapes_are_checked() {
        let mut l = Layer::<f32>::zeroed(&LayerSpec::Linear { inputs: 3, outputs: 2 }).unwrap();
        assert!(l.forward(&Tensor::zeros(&[2, 4]), Mode::Eval).is_err());
        assert!(Layer::<f32>::zeroed(&LayerSpec::Heatmap { sigma: 0.0, height: 4, width: 4 }).is_err());
    }
}
