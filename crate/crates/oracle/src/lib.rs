//! Naive reference computations.
//!
//! Everything here is written as plain index loops in `f64` and shares no
//! code with the kernels in `bm-core`; only the model's parameter layout is
//! read through its public accessors.

use bm_core::model::{Layer, Model};
use bm_core::Tensor;

/// Bilinear sample position for output index `i`.
fn source_pos(i: usize, src: usize, dst: usize, align_corners: bool) -> f64 {
    if align_corners {
        if dst == 1 {
            0.0
        } else {
            i as f64 * (src as f64 - 1.0) / (dst as f64 - 1.0)
        }
    } else {
        let p = (i as f64 + 0.5) * (src as f64 / dst as f64) - 0.5;
        p.max(0.0).min(src as f64 - 1.0)
    }
}

/// Per-pixel bilinear interpolation of a row-major plane.
pub fn resize_plane(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize, align_corners: bool) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        let py = source_pos(y, sh, dh, align_corners);
        let y0 = py.floor() as usize;
        let y1 = if y0 + 1 < sh { y0 + 1 } else { y0 };
        let fy = py - y0 as f64;
        for x in 0..dw {
            let px = source_pos(x, sw, dw, align_corners);
            let x0 = px.floor() as usize;
            let x1 = if x0 + 1 < sw { x0 + 1 } else { x0 };
            let fx = px - x0 as f64;
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            out[y * dw + x] = v00 * (1.0 - fx) * (1.0 - fy)
                + v01 * fx * (1.0 - fy)
                + v10 * (1.0 - fx) * fy
                + v11 * fx * fy;
        }
    }
    out
}

/// Reference preprocessing: half-pixel bilinear resize, then `(v - 0.5) / 0.5`.
pub fn preprocess(image: &image::RgbImage, target: usize) -> Vec<f64> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut out = Vec::new();
    for c in 0..3 {
        let plane: Vec<f64> = (0..h * w)
            .map(|i| image.get_pixel((i % w) as u32, (i / w) as u32).0[c] as f64 / 255.0)
            .collect();
        for v in resize_plane(&plane, h, w, target, target, false) {
            out.push((v - 0.5) / 0.5);
        }
    }
    out
}

/// Output of the reference forward pass.
#[derive(Debug, Clone)]
pub struct Reference {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// `[K][H][W]` flattened.
    pub features: Vec<f64>,
    pub feature_shape: (usize, usize, usize),
}

/// Textbook forward pass: every output pixel sums its receptive field.
pub fn forward(model: &Model, input: &[f64]) -> Reference {
    let mut act = input.to_vec();
    let mut c = 3;
    let mut h = model.input_size();
    let mut w = model.input_size();
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(conv) => {
                let k = conv.kernel;
                let oh = (h + 2 * conv.padding - k) / conv.stride + 1;
                let ow = (w + 2 * conv.padding - k) / conv.stride + 1;
                let cin_g = conv.in_channels / conv.groups;
                let cout_g = conv.out_channels / conv.groups;
                let mut out = vec![0.0; conv.out_channels * oh * ow];
                for oc in 0..conv.out_channels {
                    let g = oc / cout_g;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut sum = conv.bias[oc] as f64;
                            for j in 0..cin_g {
                                let ic = g * cin_g + j;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let wv = conv.weight[((oc * cin_g + j) * k + ky) * k + kx] as f64;
                                        sum += wv * act[(ic * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                            out[(oc * oh + oy) * ow + ox] = sum;
                        }
                    }
                }
                act = out;
                c = conv.out_channels;
                h = oh;
                w = ow;
            }
            Layer::Relu6 => {
                for v in act.iter_mut() {
                    *v = v.clamp(0.0, 6.0);
                }
            }
            Layer::GlobalAvgPool | Layer::Linear => break,
        }
    }
    let mut pooled = vec![0.0; c];
    for k in 0..c {
        for i in 0..h * w {
            pooled[k] += act[k * h * w + i];
        }
        pooled[k] /= (h * w) as f64;
    }
    let head = model.head_weights().data();
    let mut logits = Vec::new();
    for (cls, &b) in model.head_bias().iter().enumerate() {
        let mut z = b as f64;
        for k in 0..c {
            z += head[cls * c + k] as f64 * pooled[k];
        }
        logits.push(z);
    }
    Reference {
        probs: softmax(&logits),
        logits,
        features: act,
        feature_shape: (c, h, w),
    }
}

/// Closed-form `exp(x_i) / sum_j exp(x_j)` without max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let total: f64 = logits.iter().map(|z| z.exp()).sum();
    logits.iter().map(|z| z.exp() / total).collect()
}

/// `bias[c] + sum_k W[c][k] * F[k][y][x]` by triple loop, `[C][H][W]` flattened.
pub fn position_scores(features: &Tensor, head: &Tensor, bias: &[f32]) -> Vec<f64> {
    let s = features.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let classes = head.shape()[0];
    let mut out = vec![0.0; classes * h * w];
    for c in 0..classes {
        for y in 0..h {
            for x in 0..w {
                let mut v = bias[c] as f64;
                for ch in 0..k {
                    v += head.at(&[c, ch]) as f64 * features.at(&[ch, y, x]) as f64;
                }
                out[(c * h + y) * w + x] = v;
            }
        }
    }
    out
}

pub mod leaderboard;
pub mod corpus;
