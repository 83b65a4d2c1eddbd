//! Small fully convolutional feature extractor.
//!
//! Each layer is a square convolution with `kernel / 2` edge-replicate
//! padding followed by ReLU. Convolutions run as im2col plus one matrix
//! product; weights are stored as `out × (k·k·in)` with `(ky, kx, ci)`
//! column order.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KerlError, Result};
use crate::nn::{uniform_matrix, Linear, ParamGroup};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Side of the square network input in pixels.
    pub input_size: usize,
    pub layers: Vec<ConvSpec>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn conv(channels: usize, stride: usize) -> ConvSpec {
    ConvSpec {
        channels,
        kernel: 3,
        stride,
    }
}

impl BackboneConfig {
    /// 64×64 input, three stride-2 blocks, 8×8×64 output.
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            input_size: 64,
            layers: vec![conv(16, 2), conv(32, 2), conv(64, 2)],
        }
    }

    /// Geometry stand-in for a 448-pixel, 16× stride, 512-channel extractor.
    /// No weights ship with it.
    pub fn full_scale() -> Self {
        Self {
            in_channels: 3,
            input_size: 448,
            layers: vec![conv(64, 2), conv(128, 2), conv(256, 2), conv(512, 2)],
        }
    }

    pub fn total_stride(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.channels)
    }

    /// Output side for a square input of side `input`.
    pub fn output_side(&self, input: usize) -> usize {
        self.layers
            .iter()
            .fold(input, |n, l| conv_out(n, l.kernel, l.stride))
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.layers.is_empty() {
            return Err(KerlError::Invalid("backbone needs input channels and at least one layer".into()));
        }
        if self
            .layers
            .iter()
            .any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0)
        {
            return Err(KerlError::Invalid("conv layers need positive channels, kernel and stride".into()));
        }
        let mut side = self.input_size;
        for (i, l) in self.layers.iter().enumerate() {
            if side + 2 * (l.kernel / 2) < l.kernel {
                return Err(KerlError::Invalid(format!("layer {i} kernel exceeds its padded input")));
            }
            side = conv_out(side, l.kernel, l.stride);
        }
        if side == 0 {
            return Err(KerlError::Invalid("backbone output is empty".into()));
        }
        Ok(())
    }
}

fn conv_out(n: usize, kernel: usize, stride: usize) -> usize {
    let padded = n + 2 * (kernel / 2);
    if padded < kernel {
        0
    } else {
        (padded - kernel) / stride + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub convs: Vec<Linear>,
}

impl BackboneParams {
    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut convs = Vec::with_capacity(cfg.layers.len());
        for l in &cfg.layers {
            let fan_in = l.kernel * l.kernel * cin;
            let bound = (6.0 / fan_in as f64).sqrt();
            convs.push(Linear {
                w: uniform_matrix(l.channels, fan_in, bound, rng),
                b: ndarray::Array1::zeros(l.channels),
            });
            cin = l.channels;
        }
        Ok(Self { convs })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            convs: self
                .convs
                .iter()
                .map(|c| Linear::zeros(c.input_dim(), c.output_dim()))
                .collect(),
        }
    }
}

impl ParamGroup for BackboneParams {
    fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            c.push_tensors(&format!("backbone.conv{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.push_tensors_mut(&format!("backbone.conv{i}"), &mut out);
        }
        out
    }
}

struct Geometry {
    in_h: usize,
    in_w: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    /// Source row/column for an output position and kernel offset.
    fn source(&self, o: usize, k: usize, len: usize) -> usize {
        let pad = self.kernel / 2;
        (o * self.stride + k).saturating_sub(pad).min(len - 1)
    }
}

fn im2col(x: &[f64], g: &Geometry) -> Array2<f64> {
    let width = g.kernel * g.kernel * g.cin;
    let mut cols = Array2::<f64>::zeros((g.out_h * g.out_w, width));
    let buf = cols.as_slice_mut().expect("fresh array");
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut buf[(oy * g.out_w + ox) * width..][..width];
            for ky in 0..g.kernel {
                let iy = g.source(oy, ky, g.in_h);
                for kx in 0..g.kernel {
                    let ix = g.source(ox, kx, g.in_w);
                    let src = &x[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    row[(ky * g.kernel + kx) * g.cin..][..g.cin].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, g: &Geometry) -> Vec<f64> {
    let width = g.kernel * g.kernel * g.cin;
    let mut dx = vec![0.0; g.in_h * g.in_w * g.cin];
    let buf = dcols.as_slice().expect("standard layout");
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &buf[(oy * g.out_w + ox) * width..][..width];
            for ky in 0..g.kernel {
                let iy = g.source(oy, ky, g.in_h);
                for kx in 0..g.kernel {
                    let ix = g.source(ox, kx, g.in_w);
                    let dst = &mut dx[(iy * g.in_w + ix) * g.cin..][..g.cin];
                    for (d, s) in dst.iter_mut().zip(&row[(ky * g.kernel + kx) * g.cin..][..g.cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    dx
}

struct LayerCache {
    geometry: Geometry,
    cols: Array2<f64>,
    /// Post-ReLU output, `out_h·out_w × channels`.
    out: Array2<f64>,
}

pub struct BackboneTrace {
    layers: Vec<LayerCache>,
}

impl BackboneTrace {
    /// Final feature map, `H' × W' × d`.
    pub fn output(&self) -> Array3<f64> {
        let last = self.layers.last().expect("at least one layer");
        let g = &last.geometry;
        last.out
            .clone()
            .into_shape_with_order((g.out_h, g.out_w, last.out.ncols()))
            .expect("contiguous output")
    }

    /// Parameter gradients and `dL/dimage` from `dL/dfeatures`.
    pub fn backward(&self, params: &BackboneParams, d_out: &Array3<f64>) -> Result<(BackboneParams, Array3<f64>)> {
        let last = &self.layers.last().expect("at least one layer").geometry;
        let d = params.convs.last().expect("at least one layer").output_dim();
        if d_out.dim() != (last.out_h, last.out_w, d) {
            return Err(KerlError::Shape(format!(
                "feature gradient is {:?}, expected {:?}",
                d_out.dim(),
                (last.out_h, last.out_w, d)
            )));
        }
        let mut grads = params.zeros_like();
        let mut dy = d_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((last.out_h * last.out_w, d))
            .expect("contiguous gradient");
        for (i, cache) in self.layers.iter().enumerate().rev() {
            dy.zip_mut_with(&cache.out, |g, &o| {
                if o <= 0.0 {
                    *g = 0.0;
                }
            });
            let dcols = params.convs[i].backward_rows(cache.cols.view(), dy.view(), &mut grads.convs[i]);
            let g = &cache.geometry;
            dy = Array2::from_shape_vec((g.in_h * g.in_w, g.cin), col2im(&dcols, g)).expect("sized by geometry");
        }
        let g = &self.layers[0].geometry;
        let dx = dy.into_shape_with_order((g.in_h, g.in_w, g.cin)).expect("sized by geometry");
        Ok((grads, dx))
    }
}

pub fn backbone_forward(image: &Array3<f64>, params: &BackboneParams, cfg: &BackboneConfig) -> Result<BackboneTrace> {
    if params.convs.len() != cfg.layers.len() {
        return Err(KerlError::Shape(format!(
            "{} conv parameter sets for {} layers",
            params.convs.len(),
            cfg.layers.len()
        )));
    }
    let (mut h, mut w, mut cin) = image.dim();
    if cin != cfg.in_channels {
        return Err(KerlError::Shape(format!("image has {cin} channels, backbone expects {}", cfg.in_channels)));
    }
    let mut x = image.as_standard_layout().iter().copied().collect::<Vec<_>>();
    let mut layers = Vec::with_capacity(cfg.layers.len());
    for (spec, conv) in cfg.layers.iter().zip(&params.convs) {
        if conv.input_dim() != spec.kernel * spec.kernel * cin || conv.output_dim() != spec.channels {
            return Err(KerlError::Shape("conv parameters do not match the layer spec".into()));
        }
        let geometry = Geometry {
            in_h: h,
            in_w: w,
            cin,
            kernel: spec.kernel,
            stride: spec.stride,
            out_h: conv_out(h, spec.kernel, spec.stride),
            out_w: conv_out(w, spec.kernel, spec.stride),
        };
        if geometry.out_h == 0 || geometry.out_w == 0 {
            return Err(KerlError::Shape(format!("a {h}x{w} input is too small for this backbone")));
        }
        let cols = im2col(&x, &geometry);
        let mut out = conv.forward_rows(cols.view());
        out.mapv_inplace(|v| v.max(0.0));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(KerlError::NonFinite {
                context: "backbone activations".into(),
            });
        }
        x = out.as_slice().expect("fresh array").to_vec();
        (h, w, cin) = (geometry.out_h, geometry.out_w, spec.channels);
        layers.push(LayerCache { geometry, cols, out });
    }
    Ok(BackboneTrace { layers })
}
