//! Deterministic CPU inference.
//!
//! Every call allocates its own scratch buffers, so a [`Model`] can be
//! shared across threads without locking.

use image::RgbImage;

use crate::error::NnError;
use crate::model::{Conv2d, Layer, Model};
use crate::resample::{resize_plane, Alignment};
use crate::tensor::Tensor;

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationResult {
    pub probs: Vec<f32>,
    pub logits: Vec<f32>,
    /// Final convolution activation `[K, H, W]`, exactly as fed to the pool.
    pub feature_maps: Tensor,
    pub top_label: usize,
    pub top_confidence: f32,
}

impl ClassificationResult {
    pub fn confidence(&self, class_index: usize) -> Option<f32> {
        self.probs.get(class_index).copied()
    }
}

/// Resizes an RGB frame to `target x target` and maps channels to `[-1, 1]`.
pub fn preprocess(image: &RgbImage, target: usize) -> Result<Tensor, NnError> {
    let (w, h) = image.dimensions();
    if w == 0 || h == 0 {
        return Err(NnError::EmptyImage {
            width: w,
            height: h,
        });
    }
    if target == 0 {
        return Err(NnError::Shape("target size must be positive".into()));
    }
    let (w, h) = (w as usize, h as usize);
    let mut planes: Vec<Vec<f32>> = (0..3).map(|_| Vec::with_capacity(w * h)).collect();
    for px in image.pixels() {
        for (c, plane) in planes.iter_mut().enumerate() {
            plane.push(px.0[c] as f32 / 255.0);
        }
    }
    let mut data = Vec::with_capacity(3 * target * target);
    for plane in &planes {
        let resized = resize_plane(plane, h, w, target, target, Alignment::HalfPixel);
        data.extend(resized.into_iter().map(|v| (v - 0.5) / 0.5));
    }
    Ok(Tensor::from_parts_unchecked(vec![3, target, target], data))
}

/// Max-subtracted softmax. The output sums to one within `1e-6`.
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>, NnError> {
    if logits.is_empty() {
        return Err(NnError::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite);
    }
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| (e / total) as f32).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn forward(model: &Model, input: &Tensor) -> Result<ClassificationResult, NnError> {
    let side = model.input_size();
    if input.shape() != [3, side, side] {
        return Err(NnError::Shape(format!(
            "model expects [3, {side}, {side}], got {:?}",
            input.shape()
        )));
    }

    let mut act = input.data().to_vec();
    let (mut channels, mut height, mut width) = (3usize, side, side);
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(conv) => {
                let (out, oh, ow) = conv2d(conv, &act, height, width);
                act = out;
                channels = conv.out_channels;
                height = oh;
                width = ow;
            }
            Layer::Relu6 => act.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0)),
            Layer::GlobalAvgPool | Layer::Linear => break,
        }
    }
    if act.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite);
    }
    let feature_maps = Tensor::from_parts_unchecked(vec![channels, height, width], act);

    let plane = height * width;
    let pooled: Vec<f64> = feature_maps
        .data()
        .chunks_exact(plane)
        .map(|ch| ch.iter().map(|&v| v as f64).sum::<f64>() / plane as f64)
        .collect();

    let head = model.head_weights().data();
    let logits: Vec<f32> = model
        .head_bias()
        .iter()
        .enumerate()
        .map(|(c, &b)| {
            let row = &head[c * channels..(c + 1) * channels];
            let dot: f64 = row.iter().zip(&pooled).map(|(&w, &p)| w as f64 * p).sum();
            (b as f64 + dot) as f32
        })
        .collect();
    let probs = softmax(&logits)?;
    let top_label = argmax(&probs);
    Ok(ClassificationResult {
        top_confidence: probs[top_label],
        top_label,
        probs,
        logits,
        feature_maps,
    })
}

/// Direct convolution over a `[C, H, W]` buffer. Each kernel tap is applied
/// as a strided row update over the valid output range.
fn conv2d(conv: &Conv2d, input: &[f32], height: usize, width: usize) -> (Vec<f32>, usize, usize) {
    let oh = conv.output_side(height).expect("validated geometry");
    let ow = conv.output_side(width).expect("validated geometry");
    let k = conv.kernel;
    let (s, p) = (conv.stride, conv.padding);
    let in_per_group = conv.in_channels / conv.groups;
    let out_per_group = conv.out_channels / conv.groups;
    let in_plane = height * width;
    let out_plane = oh * ow;

    // Valid output index range for a kernel offset along one axis.
    let valid = |offset: usize, in_len: usize, out_len: usize| -> (usize, usize) {
        let first = if offset >= p { 0 } else { (p - offset).div_ceil(s) };
        // out * s + offset - p <= in_len - 1
        let last_excl = if in_len + p > offset {
            ((in_len - 1 + p - offset) / s + 1).min(out_len)
        } else {
            0
        };
        (first.min(last_excl), last_excl)
    };

    let mut out = vec![0.0f32; conv.out_channels * out_plane];
    for oc in 0..conv.out_channels {
        let group = oc / out_per_group;
        let dst = &mut out[oc * out_plane..(oc + 1) * out_plane];
        dst.fill(conv.bias[oc]);
        for icg in 0..in_per_group {
            let ic = group * in_per_group + icg;
            let src = &input[ic * in_plane..(ic + 1) * in_plane];
            let wbase = (oc * in_per_group + icg) * k * k;
            for ky in 0..k {
                let (y0, y1) = valid(ky, height, oh);
                for kx in 0..k {
                    let w = conv.weight[wbase + ky * k + kx];
                    if w == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid(kx, width, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let row = &src[iy * width..(iy + 1) * width];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            drow[ox] += w * row[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
    (out, oh, ow)
}
