//! Sequential layer stack over flat parameter and statistics vectors, with
//! hand-written reverse-mode gradients.
//!
//! Activations are `B × width` matrices. Spatial layers use channel-major rows
//! (`[c][y][x]`). Normalization layers compute statistics per channel over
//! each ghost sub-batch independently in training mode and use running
//! statistics in evaluation mode.

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};
use rand::Rng;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
/// Weight of the newest batch statistics in the running averages.
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics over `ghost` contiguous sub-batches.
    Train { ghost: usize },
    /// Running statistics; rows are processed independently.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Linear { inputs: usize, outputs: usize },
    Norm { channels: usize, spatial: usize },
    Relu { width: usize },
    /// 3×3 convolution with zero padding 1.
    Conv { in_channels: usize, out_channels: usize, height: usize, width: usize, stride: usize },
    AvgPool { channels: usize, spatial: usize },
}

impl LayerKind {
    fn conv_out(height: usize, width: usize, stride: usize) -> (usize, usize) {
        ((height + 2 - 3) / stride + 1, (width + 2 - 3) / stride + 1)
    }

    pub fn input_width(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, .. } => inputs,
            LayerKind::Norm { channels, spatial } | LayerKind::AvgPool { channels, spatial } => channels * spatial,
            LayerKind::Relu { width } => width,
            LayerKind::Conv { in_channels, height, width, .. } => in_channels * height * width,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            LayerKind::Linear { outputs, .. } => outputs,
            LayerKind::Norm { channels, spatial } => channels * spatial,
            LayerKind::Relu { width } => width,
            LayerKind::Conv { out_channels, height, width, stride, .. } => {
                let (h, w) = Self::conv_out(height, width, stride);
                out_channels * h * w
            }
            LayerKind::AvgPool { channels, .. } => channels,
        }
    }

    fn param_count(&self) -> usize {
        match *self {
            LayerKind::Linear { inputs, outputs } => outputs * inputs + outputs,
            LayerKind::Norm { channels, .. } => 2 * channels,
            LayerKind::Conv { in_channels, out_channels, .. } => out_channels * in_channels * 9 + out_channels,
            LayerKind::Relu { .. } | LayerKind::AvgPool { .. } => 0,
        }
    }

    fn stat_count(&self) -> usize {
        match *self {
            LayerKind::Norm { channels, .. } => 2 * channels,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    kind: LayerKind,
    params: usize,
    stats: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    slots: Vec<Slot>,
    backbone_layers: usize,
    param_count: usize,
    stat_count: usize,
}

/// Per-norm-layer cache: normalized activations and inverse std per (sub-batch, channel).
#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array2<f64>,
    ghost: Option<usize>,
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `acts[i]` is the input of layer `i`; the last entry is the output.
    acts: Vec<Array2<f64>>,
    norms: Vec<Option<NormCache>>,
    conv_cols: Vec<Option<Array2<f64>>>,
    /// Updated running statistics (training mode only).
    pub stats: Option<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn layers_run(&self) -> usize {
        self.acts.len() - 1
    }
}

impl Network {
    pub fn new(layers: Vec<LayerKind>, backbone_layers: usize) -> Result<Self> {
        if layers.is_empty() || backbone_layers > layers.len() {
            return Err(Error::config("network needs layers and a backbone boundary inside them"));
        }
        let mut slots = Vec::with_capacity(layers.len());
        let (mut params, mut stats) = (0, 0);
        for (i, kind) in layers.into_iter().enumerate() {
            if let Some(prev) = slots.last().map(|s: &Slot| s.kind.output_width()) {
                if prev != kind.input_width() {
                    return Err(Error::config(format!(
                        "layer {i} expects width {} but receives {prev}",
                        kind.input_width()
                    )));
                }
            }
            let slot = Slot { params, stats, kind };
            params += slot.kind.param_count();
            stats += slot.kind.stat_count();
            slots.push(slot);
        }
        Ok(Self { slots, backbone_layers, param_count: params, stat_count: stats })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn stat_count(&self) -> usize {
        self.stat_count
    }

    pub fn input_dim(&self) -> usize {
        self.slots[0].kind.input_width()
    }

    pub fn output_dim(&self) -> usize {
        self.slots.last().unwrap().kind.output_width()
    }

    pub fn backbone_layers(&self) -> usize {
        self.backbone_layers
    }

    pub fn layer_count(&self) -> usize {
        self.slots.len()
    }

    pub fn feature_dim(&self) -> usize {
        if self.backbone_layers == 0 {
            self.input_dim()
        } else {
            self.slots[self.backbone_layers - 1].kind.output_width()
        }
    }

    /// Uniform(±1/√fan_in) weights and biases, unit scale and zero shift in
    /// normalization layers; running means zero and variances one.
    pub fn init(&self, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let mut params = vec![0.0; self.param_count];
        let mut stats = vec![0.0; self.stat_count];
        for slot in &self.slots {
            let p = &mut params[slot.params..slot.params + slot.kind.param_count()];
            match slot.kind {
                LayerKind::Linear { inputs: fan_in, .. } | LayerKind::Conv { in_channels: fan_in, .. } => {
                    let fan_in = if matches!(slot.kind, LayerKind::Conv { .. }) { fan_in * 9 } else { fan_in };
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    p.iter_mut().for_each(|v| *v = rng.random_range(-bound..bound));
                }
                LayerKind::Norm { channels, .. } => {
                    p[..channels].fill(1.0);
                    stats[slot.stats + channels..slot.stats + 2 * channels].fill(1.0);
                }
                _ => {}
            }
        }
        (params, stats)
    }

    /// Runs the first `layers` layers.
    pub fn forward(
        &self,
        params: &[f64],
        stats: &[f64],
        input: ArrayView2<'_, f64>,
        mode: NormMode,
        layers: usize,
    ) -> Result<Trace> {
        if params.len() != self.param_count || stats.len() != self.stat_count {
            return Err(Error::shape(format!(
                "network takes {} parameters and {} statistics, got {} and {}",
                self.param_count,
                self.stat_count,
                params.len(),
                stats.len()
            )));
        }
        if input.ncols() != self.input_dim() {
            return Err(Error::shape(format!("input width {} != {}", input.ncols(), self.input_dim())));
        }
        let rows = input.nrows();
        if let NormMode::Train { ghost } = mode {
            if ghost == 0 || !rows.is_multiple_of(ghost) {
                return Err(Error::config(format!("batch of {rows} cannot be split into {ghost} ghost sub-batches")));
            }
        }
        let mut new_stats = matches!(mode, NormMode::Train { .. }).then(|| stats.to_vec());
        let mut acts = vec![input.to_owned()];
        let mut norms = Vec::new();
        let mut conv_cols = Vec::new();
        for slot in &self.slots[..layers] {
            let x = acts.last().unwrap();
            let p = &params[slot.params..slot.params + slot.kind.param_count()];
            let (y, norm, cols) = match slot.kind {
                LayerKind::Linear { inputs, outputs } => {
                    let w = ArrayView2::from_shape((outputs, inputs), &p[..outputs * inputs]).unwrap();
                    let b = ArrayView1::from(&p[outputs * inputs..]);
                    (x.dot(&w.t()) + &b, None, None)
                }
                LayerKind::Relu { .. } => (x.mapv(|v| v.max(0.0)), None, None),
                LayerKind::AvgPool { channels, spatial } => {
                    let y = x.to_shape((rows, channels, spatial)).unwrap().mean_axis(Axis(2)).unwrap();
                    (y, None, None)
                }
                LayerKind::Norm { channels, spatial } => {
                    let running = &stats[slot.stats..slot.stats + 2 * channels];
                    let updated = new_stats.as_mut().map(|s| &mut s[slot.stats..slot.stats + 2 * channels]);
                    let (y, cache) = norm_forward(x, p, running, updated, channels, spatial, mode);
                    (y, Some(cache), None)
                }
                LayerKind::Conv { in_channels, out_channels, height, width, stride } => {
                    let cols = im2col(x, in_channels, height, width, stride);
                    let w = ArrayView2::from_shape((out_channels, in_channels * 9), &p[..out_channels * in_channels * 9]).unwrap();
                    let b = ArrayView1::from(&p[out_channels * in_channels * 9..]);
                    // cols: (rows·positions) × (in·9)
                    let out = cols.dot(&w.t()) + &b;
                    let (oh, ow) = LayerKind::conv_out(height, width, stride);
                    let positions = oh * ow;
                    let mut y = Array2::zeros((rows, out_channels * positions));
                    for r in 0..rows {
                        let block = out.slice(s![r * positions..(r + 1) * positions, ..]);
                        let mut dst = y.row_mut(r).into_shape_with_order((out_channels, positions)).unwrap();
                        dst.assign(&block.t());
                    }
                    (y, None, Some(cols))
                }
            };
            norms.push(norm);
            conv_cols.push(cols);
            acts.push(y);
        }
        Ok(Trace { acts, norms, conv_cols, stats: new_stats })
    }

    /// Backpropagates `grad` (gradient w.r.t. the trace output) down to the
    /// input; returns the parameter gradient and the input gradient.
    pub fn backward(&self, params: &[f64], trace: &Trace, grad: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
        let mut gparams = vec![0.0; self.param_count];
        let mut g = grad;
        for i in (0..trace.layers_run()).rev() {
            let slot = &self.slots[i];
            let x = &trace.acts[i];
            let rows = x.nrows();
            let n = slot.kind.param_count();
            let p = &params[slot.params..slot.params + n];
            let gp = &mut gparams[slot.params..slot.params + n];
            g = match slot.kind {
                LayerKind::Linear { inputs, outputs } => {
                    let w = ArrayView2::from_shape((outputs, inputs), &p[..outputs * inputs]).unwrap();
                    let gw = g.t().dot(x);
                    gp[..outputs * inputs].copy_from_slice(gw.as_slice().unwrap());
                    let gb = g.sum_axis(Axis(0));
                    gp[outputs * inputs..].copy_from_slice(gb.as_slice().unwrap());
                    g.dot(&w)
                }
                LayerKind::Relu { .. } => {
                    ndarray::Zip::from(&mut g).and(x).for_each(|gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    g
                }
                LayerKind::AvgPool { channels, spatial } => {
                    let mut gx = Array2::zeros((rows, channels * spatial));
                    for r in 0..rows {
                        for c in 0..channels {
                            let v = g[[r, c]] / spatial as f64;
                            gx.slice_mut(s![r, c * spatial..(c + 1) * spatial]).fill(v);
                        }
                    }
                    gx
                }
                LayerKind::Norm { channels, spatial } => {
                    let cache = trace.norms[i].as_ref().expect("norm cache");
                    norm_backward(&g, p, gp, cache, channels, spatial)
                }
                LayerKind::Conv { in_channels, out_channels, height, width, stride } => {
                    let cols = trace.conv_cols[i].as_ref().expect("conv cache");
                    let (oh, ow) = LayerKind::conv_out(height, width, stride);
                    let positions = oh * ow;
                    let mut gout = Array2::zeros((rows * positions, out_channels));
                    for r in 0..rows {
                        let src = g.row(r).into_shape_with_order((out_channels, positions)).unwrap();
                        gout.slice_mut(s![r * positions..(r + 1) * positions, ..]).assign(&src.t());
                    }
                    let kw = out_channels * in_channels * 9;
                    let w = ArrayView2::from_shape((out_channels, in_channels * 9), &p[..kw]).unwrap();
                    let gw = gout.t().dot(cols);
                    gp[..kw].copy_from_slice(gw.as_standard_layout().as_slice().unwrap());
                    let gb = gout.sum_axis(Axis(0));
                    gp[kw..].copy_from_slice(gb.as_slice().unwrap());
                    let gcols = gout.dot(&w);
                    col2im(&gcols, rows, in_channels, height, width, stride)
                }
            };
        }
        (gparams, g)
    }
}

fn norm_forward(
    x: &Array2<f64>,
    p: &[f64],
    running: &[f64],
    updated: Option<&mut [f64]>,
    channels: usize,
    spatial: usize,
    mode: NormMode,
) -> (Array2<f64>, NormCache) {
    let rows = x.nrows();
    let (gamma, beta) = p.split_at(channels);
    let mut xhat = Array2::zeros(x.raw_dim());
    match mode {
        NormMode::Eval => {
            let inv_std: Vec<f64> = running[channels..].iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
            for r in 0..rows {
                for c in 0..channels {
                    for sp in 0..spatial {
                        let j = c * spatial + sp;
                        xhat[[r, j]] = (x[[r, j]] - running[c]) * inv_std[c];
                    }
                }
            }
            let inv = Array2::from_shape_vec((1, channels), inv_std).unwrap();
            let y = affine(&xhat, gamma, beta, spatial);
            (y, NormCache { xhat, inv_std: inv, ghost: None })
        }
        NormMode::Train { ghost } => {
            let per = rows / ghost;
            let count = (per * spatial) as f64;
            let mut inv_std = Array2::zeros((ghost, channels));
            let mut mean_acc = vec![0.0; channels];
            let mut var_acc = vec![0.0; channels];
            for g in 0..ghost {
                let block = x.slice(s![g * per..(g + 1) * per, ..]);
                for c in 0..channels {
                    let vals = block.slice(s![.., c * spatial..(c + 1) * spatial]);
                    let mean = vals.sum() / count;
                    let var = vals.fold(0.0, |a, v| a + (v - mean) * (v - mean)) / count;
                    let istd = 1.0 / (var + NORM_EPS).sqrt();
                    inv_std[[g, c]] = istd;
                    mean_acc[c] += mean;
                    var_acc[c] += if count > 1.0 { var * count / (count - 1.0) } else { var };
                    for r in g * per..(g + 1) * per {
                        for sp in 0..spatial {
                            let j = c * spatial + sp;
                            xhat[[r, j]] = (x[[r, j]] - mean) * istd;
                        }
                    }
                }
            }
            if let Some(out) = updated {
                for c in 0..channels {
                    out[c] = (1.0 - NORM_MOMENTUM) * running[c] + NORM_MOMENTUM * mean_acc[c] / ghost as f64;
                    out[channels + c] = (1.0 - NORM_MOMENTUM) * running[channels + c]
                        + NORM_MOMENTUM * var_acc[c] / ghost as f64;
                }
            }
            let y = affine(&xhat, gamma, beta, spatial);
            (y, NormCache { xhat, inv_std, ghost: Some(ghost) })
        }
    }
}

fn affine(xhat: &Array2<f64>, gamma: &[f64], beta: &[f64], spatial: usize) -> Array2<f64> {
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            let c = j / spatial;
            *v = gamma[c] * *v + beta[c];
        }
    }
    y
}

fn norm_backward(
    g: &Array2<f64>,
    p: &[f64],
    gp: &mut [f64],
    cache: &NormCache,
    channels: usize,
    spatial: usize,
) -> Array2<f64> {
    let rows = g.nrows();
    let gamma = &p[..channels];
    let (ggamma, gbeta) = gp.split_at_mut(channels);
    for r in 0..rows {
        for c in 0..channels {
            for sp in 0..spatial {
                let j = c * spatial + sp;
                ggamma[c] += g[[r, j]] * cache.xhat[[r, j]];
                gbeta[c] += g[[r, j]];
            }
        }
    }
    let mut gx = Array2::zeros(g.raw_dim());
    match cache.ghost {
        None => {
            for r in 0..rows {
                for c in 0..channels {
                    for sp in 0..spatial {
                        let j = c * spatial + sp;
                        gx[[r, j]] = g[[r, j]] * gamma[c] * cache.inv_std[[0, c]];
                    }
                }
            }
        }
        Some(ghost) => {
            let per = rows / ghost;
            let count = (per * spatial) as f64;
            for gi in 0..ghost {
                for c in 0..channels {
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for r in gi * per..(gi + 1) * per {
                        for sp in 0..spatial {
                            let j = c * spatial + sp;
                            let d = g[[r, j]] * gamma[c];
                            sum_d += d;
                            sum_dx += d * cache.xhat[[r, j]];
                        }
                    }
                    let istd = cache.inv_std[[gi, c]];
                    for r in gi * per..(gi + 1) * per {
                        for sp in 0..spatial {
                            let j = c * spatial + sp;
                            let d = g[[r, j]] * gamma[c];
                            gx[[r, j]] = istd / count * (count * d - sum_d - cache.xhat[[r, j]] * sum_dx);
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Unfolds 3×3 patches (padding 1) into a `(rows·positions) × (channels·9)` matrix.
fn im2col(x: &Array2<f64>, channels: usize, height: usize, width: usize, stride: usize) -> Array2<f64> {
    let (oh, ow) = LayerKind::conv_out(height, width, stride);
    let rows = x.nrows();
    let mut cols = Array2::zeros((rows * oh * ow, channels * 9));
    for r in 0..rows {
        let img = x.row(r);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dst: ArrayViewMut1<'_, f64> = cols.row_mut((r * oh + oy) * ow + ox);
                for c in 0..channels {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width {
                                dst[c * 9 + ky * 3 + kx] = img[(c * height + iy as usize) * width + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &Array2<f64>,
    rows: usize,
    channels: usize,
    height: usize,
    width: usize,
    stride: usize,
) -> Array2<f64> {
    let (oh, ow) = LayerKind::conv_out(height, width, stride);
    let mut x = Array2::zeros((rows, channels * height * width));
    for r in 0..rows {
        for oy in 0..oh {
            for ox in 0..ow {
                let src = cols.row((r * oh + oy) * ow + ox);
                for c in 0..channels {
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy >= 0 && ix >= 0 && (iy as usize) < height && (ix as usize) < width {
                                x[[r, (c * height + iy as usize) * width + ix as usize]] += src[c * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
