//! Layer primitives with explicit forward/backward passes.
//!
//! Activations are f64 NCHW tensors (or N×D after global pooling).
//! Convolutions run as im2col + matrix multiply; every layer caches what its
//! backward pass needs, and backward consumes that cache. Parameters carry
//! their gradient, a stable name for checkpoints, and a kind that tells the
//! optimizer whether weight decay applies.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How batch statistics and dropout behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch-norm uses batch statistics and updates running averages;
    /// dropout is active. The only mode optimizer updates may follow.
    Train,
    /// Batch statistics without updating running averages, dropout off.
    /// Used for small-loss scoring forwards that must not disturb state.
    Loss,
    /// Running statistics, dropout off: deterministic inference.
    Eval,
    /// Running statistics with dropout active: stochastic inference for
    /// Monte-Carlo dropout.
    Sample,
}

impl ForwardMode {
    pub fn dropout_active(self) -> bool {
        matches!(self, Self::Train | Self::Sample)
    }

    fn batch_stats(self) -> bool {
        matches!(self, Self::Train | Self::Loss)
    }
}

/// Whether the optimizer applies decoupled weight decay to a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Multiplicative weights: decayed.
    Weight,
    /// Biases and normalization affine terms: never decayed.
    Bias,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    fn new(name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self { name: name.into(), kind, value, grad }
    }
}

/// Either a feature map or a flattened feature vector batch.
#[derive(Debug, Clone)]
pub enum Activation {
    Map(Array4<f64>),
    Vec2(Array2<f64>),
}

impl Activation {
    fn into_map(self) -> Result<Array4<f64>> {
        match self {
            Self::Map(a) => Ok(a),
            Self::Vec2(_) => Err(Error::InvalidConfig(
                "internal: layer expected a feature map".into(),
            )),
        }
    }

    fn into_vec2(self) -> Result<Array2<f64>> {
        match self {
            Self::Vec2(a) => Ok(a),
            Self::Map(_) => Err(Error::InvalidConfig(
                "internal: layer expected a flattened batch".into(),
            )),
        }
    }
}

/// Unfolds `x` into a [cin·kh·kw, n·ho·wo] matrix of receptive fields.
pub(crate) fn im2col(
    x: &Array4<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, cin, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let cols = n * ho * wo;
    let mut m = Array2::<f64>::zeros((cin * kh * kw, cols));
    let xs = x.as_slice().expect("input is standard layout");
    let ms = m.as_slice_mut().expect("fresh array is standard layout");
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = oh * stride + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        let x_base = ((ni * cin + ci) * h + ih) * w;
                        let m_base = row * cols + (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = ow * stride + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            ms[m_base + ow] = xs[x_base + iw - pad];
                        }
                    }
                }
            }
        }
    }
    (m, ho, wo)
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto the input.
pub(crate) fn col2im(
    cols: &Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, w) = x_dim;
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let ncols = n * ho * wo;
    let mut x = Array4::<f64>::zeros(x_dim);
    let xs = x.as_slice_mut().expect("fresh array is standard layout");
    let cs = cols.as_slice().expect("gradient is standard layout");
    for ci in 0..cin {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for ni in 0..n {
                    for oh in 0..ho {
                        let ih = oh * stride + ki;
                        if ih < pad || ih >= h + pad {
                            continue;
                        }
                        let ih = ih - pad;
                        let x_base = ((ni * cin + ci) * h + ih) * w;
                        let c_base = row * ncols + (ni * ho + oh) * wo;
                        for ow in 0..wo {
                            let iw = ow * stride + kj;
                            if iw < pad || iw >= w + pad {
                                continue;
                            }
                            xs[x_base + iw - pad] += cs[c_base + ow];
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    in_channels: usize,
    out_channels: usize,
    cache: Option<ConvCache>,
}

#[derive(Debug, Clone)]
struct ConvCache {
    cols: Array2<f64>,
    x_dim: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel.0 * kernel.1) as f64;
        let std = (2.0 / fan_in).sqrt();
        let shape = IxDyn(&[out_channels, in_channels, kernel.0, kernel.1]);
        let weight = ArrayD::from_shape_fn(shape, |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        });
        Self {
            weight: Param::new(format!("{prefix}.weight"), ParamKind::Weight, weight),
            bias: Param::new(
                format!("{prefix}.bias"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[out_channels])),
            ),
            kernel,
            stride,
            pad,
            in_channels,
            out_channels,
            cache: None,
        }
    }

    fn forward(&mut self, x: Array4<f64>) -> Result<Array4<f64>> {
        let (n, cin, _, _) = x.dim();
        if cin != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input channels", self.in_channels),
                got: format!("{cin}"),
            });
        }
        let (cols, ho, wo) = im2col(&x, self.kernel.0, self.kernel.1, self.stride, self.pad);
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((self.out_channels, k))
            .expect("weight is standard layout");
        let mut out_mat = w_mat.dot(&cols);
        for (mut row, &b) in out_mat
            .axis_iter_mut(Axis(0))
            .zip(self.bias.value.iter())
        {
            row.mapv_inplace(|v| v + b);
        }
        self.cache = Some(ConvCache { cols, x_dim: x.dim(), out_hw: (ho, wo) });
        // [cout, n·ho·wo] → [n, cout, ho, wo]
        let out = out_mat
            .into_shape((self.out_channels, n, ho, wo))
            .expect("shape product matches")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        Ok(out)
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Result<Array4<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: conv backward without forward".into()))?;
        let (n, cout, ho, wo) = grad_out.dim();
        debug_assert_eq!((ho, wo), cache.out_hw);
        // [n, cout, ho, wo] → [cout, n·ho·wo]
        let g_mat = grad_out
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned()
            .into_shape((cout, n * ho * wo))
            .expect("shape product matches");
        for (g, dst) in g_mat
            .axis_iter(Axis(0))
            .zip(self.bias.grad.iter_mut())
        {
            *dst = g.sum();
        }
        let grad_w = g_mat.dot(&cache.cols.t());
        self.weight.grad =
            grad_w.into_shape(self.weight.value.raw_dim()).expect("same element count");
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let w_mat = self
            .weight
            .value
            .view()
            .into_shape((self.out_channels, k))
            .expect("weight is standard layout");
        let g_cols = w_mat.t().dot(&g_mat);
        Ok(col2im(
            &g_cols,
            cache.x_dim,
            self.kernel.0,
            self.kernel.1,
            self.stride,
            self.pad,
        ))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    prefix: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    momentum: f64,
    eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Array4<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            gamma: Param::new(
                format!("{prefix}.gamma"),
                ParamKind::Bias,
                ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            ),
            beta: Param::new(
                format!("{prefix}.beta"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[channels])),
            ),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn state_names(&self) -> (String, String) {
        (
            format!("{}.running_mean", self.prefix),
            format!("{}.running_var", self.prefix),
        )
    }

    fn forward(&mut self, x: Array4<f64>, mode: ForwardMode) -> Result<Array4<f64>> {
        let (n, c, h, w) = x.dim();
        let count = (n * h * w) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if mode.batch_stats() {
            for ch in 0..c {
                let view = x.index_axis(Axis(1), ch);
                let m = view.sum() / count;
                mean[ch] = m;
                var[ch] = view.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / count;
            }
            if mode == ForwardMode::Train {
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] =
                        (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
                }
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean[ch];
                var[ch] = self.running_var[ch];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x;
        for ch in 0..c {
            let (m, is) = (mean[ch], inv_std[ch]);
            xhat.index_axis_mut(Axis(1), ch).mapv_inplace(|v| (v - m) * is);
        }
        let mut out = xhat.clone();
        for ch in 0..c {
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| g * v + b);
        }
        self.cache = Some(BnCache { xhat, inv_std, batch_stats: mode.batch_stats() });
        Ok(out)
    }

    fn backward(&mut self, grad_out: Array4<f64>) -> Result<Array4<f64>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: bn backward without forward".into()))?;
        let (n, c, h, w) = grad_out.dim();
        let count = (n * h * w) as f64;
        let mut dx = grad_out;
        for ch in 0..c {
            let xhat = cache.xhat.index_axis(Axis(1), ch);
            let dy = dx.index_axis(Axis(1), ch).to_owned();
            let dbeta: f64 = dy.sum();
            let dgamma: f64 = dy.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum();
            self.beta.grad[ch] = dbeta;
            self.gamma.grad[ch] = dgamma;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            let mut target = dx.index_axis_mut(Axis(1), ch);
            if cache.batch_stats {
                let scale = g * is / count;
                for (d, (&dyv, &xh)) in target.iter_mut().zip(dy.iter().zip(xhat.iter())) {
                    *d = scale * (count * dyv - dbeta - xh * dgamma);
                }
            } else {
                for (d, &dyv) in target.iter_mut().zip(dy.iter()) {
                    *d = g * is * dyv;
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct Relu {
    mask: Option<Array4<f64>>,
}

impl Relu {
    pub fn new() -> Self {
        Self { mask: None }
    }

    fn forward(&mut self, mut x: Array4<f64>) -> Array4<f64> {
        let mask = x.mapv(|v| (v > 0.0) as u8 as f64);
        x.zip_mut_with(&mask, |v, &m| *v *= m);
        self.mask = Some(mask);
        x
    }

    fn backward(&mut self, mut grad: Array4<f64>) -> Result<Array4<f64>> {
        let mask = self
            .mask
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: relu backward without forward".into()))?;
        grad.zip_mut_with(&mask, |v, &m| *v *= m);
        Ok(grad)
    }
}

/// Non-overlapping 2×2 mean pooling (trailing odd row/column dropped).
#[derive(Debug, Clone)]
pub struct AvgPool2 {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl AvgPool2 {
    pub fn new() -> Self {
        Self { in_dim: None }
    }

    fn forward(&mut self, x: Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        self.in_dim = Some(x.dim());
        let (ho, wo) = (h / 2, w / 2);
        Array4::from_shape_fn((n, c, ho, wo), |(ni, ci, i, j)| {
            (x[[ni, ci, 2 * i, 2 * j]]
                + x[[ni, ci, 2 * i, 2 * j + 1]]
                + x[[ni, ci, 2 * i + 1, 2 * j]]
                + x[[ni, ci, 2 * i + 1, 2 * j + 1]])
                / 4.0
        })
    }

    fn backward(&mut self, grad: Array4<f64>) -> Result<Array4<f64>> {
        let dim = self
            .in_dim
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: pool backward without forward".into()))?;
        let mut dx = Array4::zeros(dim);
        let (n, c, ho, wo) = grad.dim();
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..ho {
                    for j in 0..wo {
                        let g = grad[[ni, ci, i, j]] / 4.0;
                        dx[[ni, ci, 2 * i, 2 * j]] += g;
                        dx[[ni, ci, 2 * i, 2 * j + 1]] += g;
                        dx[[ni, ci, 2 * i + 1, 2 * j]] += g;
                        dx[[ni, ci, 2 * i + 1, 2 * j + 1]] += g;
                    }
                }
            }
        }
        Ok(dx)
    }
}

/// Mean over the spatial extent: [n, c, h, w] → [n, c].
#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self { in_dim: None }
    }

    fn forward(&mut self, x: Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.in_dim = Some(x.dim());
        let scale = 1.0 / (h * w) as f64;
        Array2::from_shape_fn((n, c), |(ni, ci)| {
            x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).sum() * scale
        })
    }

    fn backward(&mut self, grad: Array2<f64>) -> Result<Array4<f64>> {
        let dim = self
            .in_dim
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: gap backward without forward".into()))?;
        let (_, _, h, w) = dim;
        let scale = 1.0 / (h * w) as f64;
        Ok(Array4::from_shape_fn(dim, |(ni, ci, _, _)| {
            grad[[ni, ci]] * scale
        }))
    }
}

/// Inverted dropout on flattened features; identity when inactive.
#[derive(Debug, Clone)]
pub struct Dropout {
    rate: f64,
    mask: Option<Array2<f64>>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        Self { rate, mask: None }
    }

    fn forward(
        &mut self,
        mut x: Array2<f64>,
        mode: ForwardMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Array2<f64>> {
        if !(mode.dropout_active() && self.rate > 0.0) {
            self.mask = None;
            return Ok(x);
        }
        let rng = rng.ok_or_else(|| {
            Error::InvalidConfig("stochastic forward pass requires a generator".into())
        })?;
        let keep = 1.0 - self.rate;
        let mask = Array2::from_shape_fn(x.dim(), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.zip_mut_with(&mask, |v, &m| *v *= m);
        self.mask = Some(mask);
        Ok(x)
    }

    fn backward(&mut self, mut grad: Array2<f64>) -> Result<Array2<f64>> {
        if let Some(mask) = self.mask.take() {
            grad.zip_mut_with(&mask, |v, &m| *v *= m);
        }
        Ok(grad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(prefix: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / in_dim as f64).sqrt();
        let weight = ArrayD::from_shape_fn(IxDyn(&[out_dim, in_dim]), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal) * std
        });
        Self {
            weight: Param::new(format!("{prefix}.weight"), ParamKind::Weight, weight),
            bias: Param::new(
                format!("{prefix}.bias"),
                ParamKind::Bias,
                ArrayD::zeros(IxDyn(&[out_dim])),
            ),
            input: None,
        }
    }

    fn forward(&mut self, x: Array2<f64>) -> Result<Array2<f64>> {
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight is 2-d");
        if x.ncols() != w.ncols() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} features", w.ncols()),
                got: format!("{}", x.ncols()),
            });
        }
        let mut out = x.dot(&w.t());
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, b) in row.iter_mut().zip(self.bias.value.iter()) {
                *v += b;
            }
        }
        self.input = Some(x);
        Ok(out)
    }

    fn backward(&mut self, grad: Array2<f64>) -> Result<Array2<f64>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::InvalidConfig("internal: linear backward without forward".into()))?;
        let w = self
            .weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight is 2-d");
        let dw = grad.t().dot(&x);
        let dx = grad.dot(&w);
        for (dst, g) in self.bias.grad.iter_mut().zip(grad.t().rows()) {
            *dst = g.sum();
        }
        self.weight.grad = dw.into_dyn();
        Ok(dx)
    }
}

/// Residual unit: conv-bn-relu-conv-bn plus a shortcut (optionally projected
/// through a strided 1×1 conv and norm), then a final relu.
#[derive(Debug, Clone)]
pub struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    relu1: Relu,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    relu2: Relu,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let downsample = if stride != 1 || in_channels != out_channels {
            Some((
                Conv2d::new(
                    &format!("{prefix}.down"),
                    in_channels,
                    out_channels,
                    (1, 1),
                    stride,
                    0,
                    rng,
                ),
                BatchNorm2d::new(&format!("{prefix}.down_bn"), out_channels),
            ))
        } else {
            None
        };
        Self {
            conv1: Conv2d::new(&format!("{prefix}.conv1"), in_channels, out_channels, (3, 3), stride, 1, rng),
            bn1: BatchNorm2d::new(&format!("{prefix}.bn1"), out_channels),
            relu1: Relu::new(),
            conv2: Conv2d::new(&format!("{prefix}.conv2"), out_channels, out_channels, (3, 3), 1, 1, rng),
            bn2: BatchNorm2d::new(&format!("{prefix}.bn2"), out_channels),
            relu2: Relu::new(),
            downsample,
        }
    }

    fn forward(&mut self, x: Array4<f64>, mode: ForwardMode) -> Result<Array4<f64>> {
        let shortcut = if let Some((conv, bn)) = self.downsample.as_mut() {
            bn.forward(conv.forward(x.clone())?, mode)?
        } else {
            x.clone()
        };
        let h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)?, mode)?);
        let h = self.bn2.forward(self.conv2.forward(h)?, mode)?;
        Ok(self.relu2.forward(h + &shortcut))
    }

    fn backward(&mut self, grad: Array4<f64>) -> Result<Array4<f64>> {
        let g = self.relu2.backward(grad)?;
        let g_shortcut = g.clone();
        let g_main = self
            .conv1
            .backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(g)?)?)?)?)?;
        let g_short = if let Some((conv, bn)) = self.downsample.as_mut() {
            conv.backward(bn.backward(g_shortcut)?)?
        } else {
            g_shortcut
        };
        Ok(g_main + &g_short)
    }
}

/// One stage of a network. Forward threads the activation through; backward
/// runs the reverse order.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    Bn(BatchNorm2d),
    Relu(Relu),
    Pool(AvgPool2),
    Gap(GlobalAvgPool),
    Drop(Dropout),
    Fc(Linear),
    Block(Box<BasicBlock>),
}

impl Layer {
    pub fn forward(
        &mut self,
        x: Activation,
        mode: ForwardMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Activation> {
        Ok(match self {
            Self::Conv(l) => Activation::Map(l.forward(x.into_map()?)?),
            Self::Bn(l) => Activation::Map(l.forward(x.into_map()?, mode)?),
            Self::Relu(l) => Activation::Map(l.forward(x.into_map()?)),
            Self::Pool(l) => Activation::Map(l.forward(x.into_map()?)),
            Self::Gap(l) => Activation::Vec2(l.forward(x.into_map()?)),
            Self::Drop(l) => Activation::Vec2(l.forward(x.into_vec2()?, mode, rng)?),
            Self::Fc(l) => Activation::Vec2(l.forward(x.into_vec2()?)?),
            Self::Block(l) => Activation::Map(l.forward(x.into_map()?, mode)?),
        })
    }

    pub fn backward(&mut self, grad: Activation) -> Result<Activation> {
        Ok(match self {
            Self::Conv(l) => Activation::Map(l.backward(grad.into_map()?)?),
            Self::Bn(l) => Activation::Map(l.backward(grad.into_map()?)?),
            Self::Relu(l) => Activation::Map(l.backward(grad.into_map()?)?),
            Self::Pool(l) => Activation::Map(l.backward(grad.into_map()?)?),
            Self::Gap(l) => Activation::Map(l.backward(grad.into_vec2()?)?),
            Self::Drop(l) => Activation::Vec2(l.backward(grad.into_vec2()?)?),
            Self::Fc(l) => Activation::Vec2(l.backward(grad.into_vec2()?)?),
            Self::Block(l) => Activation::Map(l.backward(grad.into_map()?)?),
        })
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Self::Conv(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Self::Bn(l) => {
                f(&l.gamma);
                f(&l.beta);
            }
            Self::Fc(l) => {
                f(&l.weight);
                f(&l.bias);
            }
            Self::Block(l) => {
                Layer::visit_block(l, &mut |p| f(p), &mut |_| {});
            }
            _ => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Self::Conv(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Self::Bn(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Self::Fc(l) => {
                f(&mut l.weight);
                f(&mut l.bias);
            }
            Self::Block(l) => {
                Layer::visit_block_mut(l, &mut |p| f(p), &mut |_, _| {});
            }
            _ => {}
        }
    }

    /// Visits non-parameter state (batch-norm running statistics) as
    /// (name, tensor) pairs, in a stable order.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &ArrayD<f64>)) {
        match self {
            Self::Bn(l) => {
                let (m, v) = l.state_names();
                f(&m, &l.running_mean);
                f(&v, &l.running_var);
            }
            Self::Block(l) => {
                Layer::visit_block(l, &mut |_| {}, &mut |bn| {
                    let (m, v) = bn.state_names();
                    f(&m, &bn.running_mean);
                    f(&v, &bn.running_var);
                });
            }
            _ => {}
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        match self {
            Self::Bn(l) => {
                let (m, v) = l.state_names();
                f(&m, &mut l.running_mean);
                f(&v, &mut l.running_var);
            }
            Self::Block(l) => {
                Layer::visit_block_mut(l, &mut |_| {}, &mut |names, buf| {
                    f(names, buf);
                });
            }
            _ => {}
        }
    }

    fn visit_block(
        b: &BasicBlock,
        on_param: &mut dyn FnMut(&Param),
        on_bn: &mut dyn FnMut(&BatchNorm2d),
    ) {
        on_param(&b.conv1.weight);
        on_param(&b.conv1.bias);
        on_param(&b.bn1.gamma);
        on_param(&b.bn1.beta);
        on_bn(&b.bn1);
        on_param(&b.conv2.weight);
        on_param(&b.conv2.bias);
        on_param(&b.bn2.gamma);
        on_param(&b.bn2.beta);
        on_bn(&b.bn2);
        if let Some((conv, bn)) = &b.downsample {
            on_param(&conv.weight);
            on_param(&conv.bias);
            on_param(&bn.gamma);
            on_param(&bn.beta);
            on_bn(bn);
        }
    }

    fn visit_block_mut(
        b: &mut BasicBlock,
        on_param: &mut dyn FnMut(&mut Param),
        on_buffer: &mut dyn FnMut(&str, &mut ArrayD<f64>),
    ) {
        let visit_bn_buffers =
            |bn: &mut BatchNorm2d, on_buffer: &mut dyn FnMut(&str, &mut ArrayD<f64>)| {
                let (m, v) = bn.state_names();
                on_buffer(&m, &mut bn.running_mean);
                on_buffer(&v, &mut bn.running_var);
            };
        on_param(&mut b.conv1.weight);
        on_param(&mut b.conv1.bias);
        on_param(&mut b.bn1.gamma);
        on_param(&mut b.bn1.beta);
        visit_bn_buffers(&mut b.bn1, on_buffer);
        on_param(&mut b.conv2.weight);
        on_param(&mut b.conv2.bias);
        on_param(&mut b.bn2.gamma);
        on_param(&mut b.bn2.beta);
        visit_bn_buffers(&mut b.bn2, on_buffer);
        if let Some((conv, bn)) = &mut b.downsample {
            on_param(&mut conv.weight);
            on_param(&mut conv.bias);
            on_param(&mut bn.gamma);
            on_param(&mut bn.beta);
            visit_bn_buffers(bn, on_buffer);
        }
    }

    pub fn is_block(&self) -> bool {
        matches!(self, Self::Block(_))
    }
}
