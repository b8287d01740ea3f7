//! Minimal reverse-mode differentiation over dense f64 tensors: exactly the
//! ops the conditional generator/discriminator pair and its physics-aware
//! losses need. A `Tape` records forward ops; `backward` walks the recording
//! in reverse and accumulates gradients.

use crate::error::{Error, Result};

/// Dense row-major tensor. Activations use (N, C, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.is_empty() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?} ({numel} values)", shape),
                found: format!("{} values", data.len()),
                context: "Tensor::new".into(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        input: Var,
        alpha: f64,
    },
    Tanh {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        input: Var,
        scale: f64,
        // offset has zero gradient; stored so the node fully describes the op
        #[allow(dead_code)]
        offset: f64,
    },
    Abs {
        input: Var,
    },
    Atan {
        input: Var,
    },
    Mean {
        input: Var,
    },
    /// Central-difference stress divergence: (N,3,H,W) -> (N,2,H,W).
    Divergence {
        input: Var,
        spacing: f64,
    },
    /// Per-image RMS over all channels and pixels: (N,C,H,W) -> (N).
    RmsPerImage {
        input: Var,
    },
    /// Per-image mean over all channels and pixels: (N,C,H,W) -> (N).
    MeanPerImage {
        input: Var,
    },
    /// Multiply every entry of image n by scalars[n]: ((N,..), (N)) -> (N,..).
    BroadcastMulImage {
        map: Var,
        scalars: Var,
    },
    /// Numerically stable mean BCE of logits against a constant label.
    BceWithLogits {
        logits: Var,
        label: f64,
    },
    /// ln(max(x, floor)); zero gradient below the floor.
    LnClamped {
        input: Var,
        floor: f64,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by [`Tape::backward`], indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::DataIntegrity {
                context: format!("{:?}", op_name(&op)),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf, value)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, cin, h, wd] = dims4(x, "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(w, "conv2d weight")?;
        if wcin != cin || b.shape != vec![cout] {
            return Err(Error::ShapeMismatch {
                expected: format!("weight (Cout,{cin},k,k), bias (Cout)"),
                found: format!("{:?} / {:?}", w.shape, b.shape),
                context: "conv2d".into(),
            });
        }
        if (h + 2 * pad) < kh || (h + 2 * pad - kh) % stride != 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("spatial dims compatible with k={kh}, s={stride}, p={pad}"),
                found: format!("{h}x{wd}"),
                context: "conv2d".into(),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.data[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += x.data
                                        [((ni * cin + ci) * h + iy as usize) * wd + ix as usize]
                                        * w.data[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((ni * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            Tensor::new(vec![n, cout, oh, ow], out)?,
        )
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let [n, cin, h, wd] = dims4(x, "conv_transpose2d input")?;
        let [wcin, cout, kh, kw] = dims4(w, "conv_transpose2d weight")?;
        if wcin != cin || b.shape != vec![cout] {
            return Err(Error::ShapeMismatch {
                expected: format!("weight ({cin},Cout,k,k), bias (Cout)"),
                found: format!("{:?} / {:?}", w.shape, b.shape),
                context: "conv_transpose2d".into(),
            });
        }
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wd - 1) * stride + kw - 2 * pad;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for co in 0..cout {
                for v in
                    out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow].iter_mut()
                {
                    *v = b.data[co];
                }
            }
        }
        for ni in 0..n {
            for ci in 0..cin {
                for y in 0..h {
                    for xp in 0..wd {
                        let v = x.data[((ni * cin + ci) * h + y) * wd + xp];
                        for co in 0..cout {
                            for ky in 0..kh {
                                let oy = (y * stride + ky) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ox = (xp * stride + kx) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    out[((ni * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                        v * w.data[((ci * cout + co) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
            Tensor::new(vec![n, cout, oh, ow], out)?,
        )
    }

    pub fn leaky_relu(&mut self, input: Var, alpha: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { alpha * v })
            .collect();
        let shape = x.shape.clone();
        self.push(Op::LeakyRelu { input, alpha }, Tensor::new(shape, data)?)
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.leaky_relu(input, 0.0)
    }

    pub fn tanh(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.tanh()).collect();
        let shape = x.shape.clone();
        self.push(Op::Tanh { input }, Tensor::new(shape, data)?)
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| logistic(v)).collect();
        let shape = x.shape.clone();
        self.push(Op::Sigmoid { input }, Tensor::new(shape, data)?)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let ta = self.value(a);
        let tb = self.value(b);
        let [n, ca, h, w] = dims4(ta, "concat a")?;
        let [nb, cb, hb, wb] = dims4(tb, "concat b")?;
        if n != nb || h != hb || w != wb {
            return Err(Error::ShapeMismatch {
                expected: format!("(N={n},*,{h},{w})"),
                found: format!("{:?}", tb.shape),
                context: "concat_channels".into(),
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * n * h * w);
        for ni in 0..n {
            data.extend_from_slice(&ta.data[ni * ca * h * w..(ni + 1) * ca * h * w]);
            data.extend_from_slice(&tb.data[ni * cb * h * w..(ni + 1) * cb * h * w]);
        }
        self.push(
            Op::ConcatChannels { a, b },
            Tensor::new(vec![n, ca + cb, h, w], data)?,
        )
    }

    fn elementwise_pair(&mut self, a: Var, b: Var, op: fn(f64, f64) -> f64, which: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape != tb.shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", ta.shape),
                found: format!("{:?}", tb.shape),
                context: which.into(),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| op(x, y)).collect();
        Ok((ta.shape.clone(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.elementwise_pair(a, b, |x, y| x + y, "add")?;
        self.push(Op::Add { a, b }, Tensor::new(shape, data)?)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.elementwise_pair(a, b, |x, y| x - y, "sub")?;
        self.push(Op::Sub { a, b }, Tensor::new(shape, data)?)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = self.elementwise_pair(a, b, |x, y| x * y, "mul")?;
        self.push(Op::Mul { a, b }, Tensor::new(shape, data)?)
    }

    pub fn affine(&mut self, input: Var, scale: f64, offset: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| scale * v + offset).collect();
        let shape = x.shape.clone();
        self.push(
            Op::Affine {
                input,
                scale,
                offset,
            },
            Tensor::new(shape, data)?,
        )
    }

    pub fn abs(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.abs()).collect();
        let shape = x.shape.clone();
        self.push(Op::Abs { input }, Tensor::new(shape, data)?)
    }

    pub fn atan(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.atan()).collect();
        let shape = x.shape.clone();
        self.push(Op::Atan { input }, Tensor::new(shape, data)?)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let m = x.data.iter().sum::<f64>() / x.numel() as f64;
        self.push(Op::Mean { input }, Tensor::scalar(m))
    }

    pub fn divergence(&mut self, input: Var, spacing: f64) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4(x, "divergence input")?;
        if c != 3 {
            return Err(Error::ShapeMismatch {
                expected: "3 stress channels".into(),
                found: format!("{c}"),
                context: "divergence".into(),
            });
        }
        let mut out = vec![0.0; n * 2 * h * w];
        let inv = 1.0 / (2.0 * spacing);
        for ni in 0..n {
            let s11 = &x.data[(ni * 3) * h * w..(ni * 3 + 1) * h * w];
            let s22 = &x.data[(ni * 3 + 1) * h * w..(ni * 3 + 2) * h * w];
            let s12 = &x.data[(ni * 3 + 2) * h * w..(ni * 3 + 3) * h * w];
            for i in 0..h {
                let ip = (i + 1) % h;
                let im = (i + h - 1) % h;
                for j in 0..w {
                    let jp = (j + 1) % w;
                    let jm = (j + w - 1) % w;
                    let k1 = (s11[i * w + jp] - s11[i * w + jm]) * inv
                        + (s12[ip * w + j] - s12[im * w + j]) * inv;
                    let k2 = (s12[i * w + jp] - s12[i * w + jm]) * inv
                        + (s22[ip * w + j] - s22[im * w + j]) * inv;
                    out[((ni * 2) * h + i) * w + j] = k1;
                    out[((ni * 2 + 1) * h + i) * w + j] = k2;
                }
            }
        }
        self.push(
            Op::Divergence { input, spacing },
            Tensor::new(vec![n, 2, h, w], out)?,
        )
    }

    pub fn rms_per_image(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4(x, "rms_per_image input")?;
        let per = c * h * w;
        let mut out = vec![0.0; n];
        for ni in 0..n {
            let slice = &x.data[ni * per..(ni + 1) * per];
            let ms = slice.iter().map(|v| v * v).sum::<f64>() / per as f64;
            out[ni] = ms.sqrt();
        }
        self.push(Op::RmsPerImage { input }, Tensor::new(vec![n], out)?)
    }

    pub fn mean_per_image(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = dims4(x, "mean_per_image input")?;
        let per = c * h * w;
        let mut out = vec![0.0; n];
        for ni in 0..n {
            out[ni] = x.data[ni * per..(ni + 1) * per].iter().sum::<f64>() / per as f64;
        }
        self.push(Op::MeanPerImage { input }, Tensor::new(vec![n], out)?)
    }

    pub fn broadcast_mul_image(&mut self, map: Var, scalars: Var) -> Result<Var> {
        let tm = self.value(map);
        let ts = self.value(scalars);
        let [n, c, h, w] = dims4(tm, "broadcast map")?;
        if ts.shape != vec![n] {
            return Err(Error::ShapeMismatch {
                expected: format!("({n})"),
                found: format!("{:?}", ts.shape),
                context: "broadcast_mul_image".into(),
            });
        }
        let per = c * h * w;
        let mut data = tm.data.clone();
        for ni in 0..n {
            let s = ts.data[ni];
            for v in data[ni * per..(ni + 1) * per].iter_mut() {
                *v *= s;
            }
        }
        self.push(
            Op::BroadcastMulImage { map, scalars },
            Tensor::new(vec![n, c, h, w], data)?,
        )
    }

    /// Mean over all elements of BCE(sigmoid(logit), label), stable form
    /// max(x,0) - x*y + ln(1 + exp(-|x|)).
    pub fn bce_with_logits(&mut self, logits: Var, label: f64) -> Result<Var> {
        let x = self.value(logits);
        let total: f64 = x
            .data
            .iter()
            .map(|&v| v.max(0.0) - v * label + (-v.abs()).exp().ln_1p())
            .sum();
        let m = total / x.numel() as f64;
        self.push(Op::BceWithLogits { logits, label }, Tensor::scalar(m))
    }

    pub fn ln_clamped(&mut self, input: Var, floor: f64) -> Result<Var> {
        let x = self.value(input);
        let data = x.data.iter().map(|&v| v.max(floor).ln()).collect();
        let shape = x.shape.clone();
        self.push(Op::LnClamped { input, floor }, Tensor::new(shape, data)?)
    }

    /// Reverse pass from a scalar loss. Returns one gradient slot per node;
    /// leaves that did not participate have `None`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(grad_out) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &grad_out, &mut grads)?;
            // leaves keep their gradient; interior nodes are done
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad_out);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        idx: usize,
        grad_out: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let add_to = |grads: &mut [Option<Vec<f64>>], var: Var, contrib: Vec<f64>| {
            match &mut grads[var.0] {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(contrib) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let [n, cin, h, wd] = dims4(x, "conv2d input")?;
                let [cout, _, kh, kw] = dims4(w, "conv2d weight")?;
                let oh = (h + 2 * pad - kh) / stride + 1;
                let ow = (wd + 2 * pad - kw) / stride + 1;
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; cout];
                for ni in 0..n {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = grad_out[((ni * cout + co) * oh + oy) * ow + ox];
                                gb[co] += go;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = ((ni * cin + ci) * h + iy as usize) * wd
                                                + ix as usize;
                                            let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                            gx[xi] += go * w.data[wi];
                                            gw[wi] += go * x.data[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                add_to(grads, input, gx);
                add_to(grads, weight, gw);
                add_to(grads, bias, gb);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                pad,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let [n, cin, h, wd] = dims4(x, "convT input")?;
                let [_, cout, kh, kw] = dims4(w, "convT weight")?;
                let oh = (h - 1) * stride + kh - 2 * pad;
                let ow = (wd - 1) * stride + kw - 2 * pad;
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; cout];
                for ni in 0..n {
                    for co in 0..cout {
                        for v in
                            grad_out[(ni * cout + co) * oh * ow..(ni * cout + co + 1) * oh * ow]
                                .iter()
                        {
                            gb[co] += v;
                        }
                    }
                }
                for ni in 0..n {
                    for ci in 0..cin {
                        for y in 0..h {
                            for xp in 0..wd {
                                let xi = ((ni * cin + ci) * h + y) * wd + xp;
                                let xv = x.data[xi];
                                let mut acc = 0.0;
                                for co in 0..cout {
                                    for ky in 0..kh {
                                        let oy = (y * stride + ky) as isize - pad as isize;
                                        if oy < 0 || oy >= oh as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ox = (xp * stride + kx) as isize - pad as isize;
                                            if ox < 0 || ox >= ow as isize {
                                                continue;
                                            }
                                            let oi = ((ni * cout + co) * oh + oy as usize) * ow
                                                + ox as usize;
                                            let wi = ((ci * cout + co) * kh + ky) * kw + kx;
                                            acc += grad_out[oi] * w.data[wi];
                                            gw[wi] += grad_out[oi] * xv;
                                        }
                                    }
                                }
                                gx[xi] += acc;
                            }
                        }
                    }
                }
                add_to(grads, input, gx);
                add_to(grads, weight, gw);
                add_to(grads, bias, gb);
            }
            Op::LeakyRelu { input, alpha } => {
                let x = self.value(input);
                let g = x
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &go)| if v >= 0.0 { go } else { alpha * go })
                    .collect();
                add_to(grads, input, g);
            }
            Op::Tanh { input } => {
                let y = &node.value;
                let g = y
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&t, &go)| go * (1.0 - t * t))
                    .collect();
                add_to(grads, input, g);
            }
            Op::Sigmoid { input } => {
                let y = &node.value;
                let g = y
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&s, &go)| go * s * (1.0 - s))
                    .collect();
                add_to(grads, input, g);
            }
            Op::ConcatChannels { a, b } => {
                let ta = self.value(a);
                let tb = self.value(b);
                let [n, ca, h, w] = dims4(ta, "concat a")?;
                let cb = tb.shape[1];
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                let per_a = ca * h * w;
                let per_b = cb * h * w;
                let per_o = per_a + per_b;
                for ni in 0..n {
                    ga[ni * per_a..(ni + 1) * per_a]
                        .copy_from_slice(&grad_out[ni * per_o..ni * per_o + per_a]);
                    gb[ni * per_b..(ni + 1) * per_b]
                        .copy_from_slice(&grad_out[ni * per_o + per_a..(ni + 1) * per_o]);
                }
                add_to(grads, a, ga);
                add_to(grads, b, gb);
            }
            Op::Add { a, b } => {
                add_to(grads, a, grad_out.to_vec());
                add_to(grads, b, grad_out.to_vec());
            }
            Op::Sub { a, b } => {
                add_to(grads, a, grad_out.to_vec());
                add_to(grads, b, grad_out.iter().map(|g| -g).collect());
            }
            Op::Mul { a, b } => {
                let ta = self.value(a).data.clone();
                let tb = self.value(b).data.clone();
                add_to(
                    grads,
                    a,
                    grad_out.iter().zip(&tb).map(|(g, v)| g * v).collect(),
                );
                add_to(
                    grads,
                    b,
                    grad_out.iter().zip(&ta).map(|(g, v)| g * v).collect(),
                );
            }
            Op::Affine { input, scale, .. } => {
                add_to(grads, input, grad_out.iter().map(|g| g * scale).collect());
            }
            Op::Abs { input } => {
                let x = self.value(input);
                let g = x
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &go)| {
                        if v > 0.0 {
                            go
                        } else if v < 0.0 {
                            -go
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_to(grads, input, g);
            }
            Op::Atan { input } => {
                let x = self.value(input);
                let g = x
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &go)| go / (1.0 + v * v))
                    .collect();
                add_to(grads, input, g);
            }
            Op::Mean { input } => {
                let n = self.value(input).numel();
                let g = grad_out[0] / n as f64;
                add_to(grads, input, vec![g; n]);
            }
            Op::Divergence { input, spacing } => {
                // adjoint of the circulant central-difference stencil is its
                // negation: grad_s11 = -D1 gK1, grad_s22 = -D2 gK2,
                // grad_s12 = -D2 gK1 - D1 gK2
                let x = self.value(input);
                let [n, _, h, w] = dims4(x, "divergence input")?;
                let inv = 1.0 / (2.0 * spacing);
                let mut gx = vec![0.0; x.numel()];
                for ni in 0..n {
                    let gk1 = &grad_out[(ni * 2) * h * w..(ni * 2 + 1) * h * w];
                    let gk2 = &grad_out[(ni * 2 + 1) * h * w..(ni * 2 + 2) * h * w];
                    for i in 0..h {
                        let ip = (i + 1) % h;
                        let im = (i + h - 1) % h;
                        for j in 0..w {
                            let jp = (j + 1) % w;
                            let jm = (j + w - 1) % w;
                            let d1_gk1 = (gk1[i * w + jp] - gk1[i * w + jm]) * inv;
                            let d2_gk1 = (gk1[ip * w + j] - gk1[im * w + j]) * inv;
                            let d1_gk2 = (gk2[i * w + jp] - gk2[i * w + jm]) * inv;
                            let d2_gk2 = (gk2[ip * w + j] - gk2[im * w + j]) * inv;
                            gx[((ni * 3) * h + i) * w + j] = -d1_gk1;
                            gx[((ni * 3 + 1) * h + i) * w + j] = -d2_gk2;
                            gx[((ni * 3 + 2) * h + i) * w + j] = -d2_gk1 - d1_gk2;
                        }
                    }
                }
                add_to(grads, input, gx);
            }
            Op::RmsPerImage { input } => {
                let x = self.value(input);
                let [n, c, h, w] = dims4(x, "rms input")?;
                let per = c * h * w;
                let mut gx = vec![0.0; x.numel()];
                for ni in 0..n {
                    let r = node.value.data[ni];
                    if r == 0.0 {
                        continue;
                    }
                    let go = grad_out[ni];
                    for k in 0..per {
                        gx[ni * per + k] = go * x.data[ni * per + k] / (r * per as f64);
                    }
                }
                add_to(grads, input, gx);
            }
            Op::MeanPerImage { input } => {
                let x = self.value(input);
                let n = node.value.numel();
                let per = x.numel() / n;
                let mut gx = vec![0.0; x.numel()];
                for ni in 0..n {
                    let g = grad_out[ni] / per as f64;
                    for v in gx[ni * per..(ni + 1) * per].iter_mut() {
                        *v = g;
                    }
                }
                add_to(grads, input, gx);
            }
            Op::BroadcastMulImage { map, scalars } => {
                let tm = self.value(map);
                let ts = self.value(scalars);
                let n = ts.numel();
                let per = tm.numel() / n;
                let mut gm = vec![0.0; tm.numel()];
                let mut gs = vec![0.0; n];
                for ni in 0..n {
                    let s = ts.data[ni];
                    for k in 0..per {
                        let go = grad_out[ni * per + k];
                        gm[ni * per + k] = go * s;
                        gs[ni] += go * tm.data[ni * per + k];
                    }
                }
                add_to(grads, map, gm);
                add_to(grads, scalars, gs);
            }
            Op::BceWithLogits { logits, label } => {
                let x = self.value(logits);
                let n = x.numel() as f64;
                let g = grad_out[0];
                let gx = x
                    .data
                    .iter()
                    .map(|&v| g * (logistic(v) - label) / n)
                    .collect();
                add_to(grads, logits, gx);
            }
            Op::LnClamped { input, floor } => {
                let x = self.value(input);
                let g = x
                    .data
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, &go)| if v > floor { go / v } else { 0.0 })
                    .collect();
                add_to(grads, input, g);
            }
        }
        Ok(())
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dims4(t: &Tensor, context: &str) -> Result<[usize; 4]> {
    if t.shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: "rank-4 tensor".into(),
            found: format!("{:?}", t.shape),
            context: context.into(),
        });
    }
    Ok([t.shape[0], t.shape[1], t.shape[2], t.shape[3]])
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::ConvTranspose2d { .. } => "conv_transpose2d",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Tanh { .. } => "tanh",
        Op::Sigmoid { .. } => "sigmoid",
        Op::ConcatChannels { .. } => "concat_channels",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::Affine { .. } => "affine",
        Op::Abs { .. } => "abs",
        Op::Atan { .. } => "atan",
        Op::Mean { .. } => "mean",
        Op::Divergence { .. } => "divergence",
        Op::RmsPerImage { .. } => "rms_per_image",
        Op::MeanPerImage { .. } => "mean_per_image",
        Op::BroadcastMulImage { .. } => "broadcast_mul_image",
        Op::BceWithLogits { .. } => "bce_with_logits",
        Op::LnClamped { .. } => "ln_clamped",
    }
}
