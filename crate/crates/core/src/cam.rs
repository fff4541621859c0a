//! Class activation maps over the final convolution layer.
//!
//! With a pool-then-linear head, the logit for class `c` is the spatial
//! mean of `bias[c] + sum_k W[c, k] * F[k, y, x]`. [`per_position_scores`]
//! computes that inner term at every position, [`compute_cam`] drops the
//! spatially constant bias.

use std::io::Cursor;

use image::{ImageFormat, Rgb, RgbImage, Rgba, RgbaImage};

use crate::error::NnError;
use crate::resample::{resize_plane, Alignment};
use crate::tensor::Tensor;

/// Per-position class scores `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionScores(pub Tensor);

impl PositionScores {
    /// Spatial mean of one class slice.
    pub fn mean(&self, class_index: usize) -> f32 {
        let (_, h, w) = self.0.chw().expect("scores are rank 3");
        let plane = h * w;
        let slice = &self.0.data()[class_index * plane..(class_index + 1) * plane];
        (slice.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamGrid {
    pub height: usize,
    pub width: usize,
    /// Row-major `height * width` values.
    pub values: Vec<f32>,
    pub class_index: usize,
    pub normalized: bool,
}

impl CamGrid {
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f32 {
        (self.values.iter().map(|&v| v as f64).sum::<f64>() / self.values.len() as f64) as f32
    }
}

/// A dense scalar overlay at frame resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

fn check_head(feature_maps: &Tensor, head_weights: &Tensor) -> Result<(usize, usize, usize, usize), NnError> {
    let (k, h, w) = feature_maps.chw()?;
    let (c, cols) = head_weights.rows_cols()?;
    if cols != k {
        return Err(NnError::Dimension(format!(
            "head has {cols} columns but feature maps have {k} channels"
        )));
    }
    Ok((c, k, h, w))
}

/// Weighted channel sum at every position for one head row.
fn weighted_plane(feature_maps: &[f32], row: &[f32], plane: usize, offset: f64) -> Vec<f32> {
    let mut acc = vec![offset; plane];
    for (ch, &weight) in feature_maps.chunks_exact(plane).zip(row) {
        let weight = weight as f64;
        for (a, &f) in acc.iter_mut().zip(ch) {
            *a += weight * f as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn per_position_scores(
    feature_maps: &Tensor,
    head_weights: &Tensor,
    head_bias: &[f32],
) -> Result<PositionScores, NnError> {
    let (c, k, h, w) = check_head(feature_maps, head_weights)?;
    if head_bias.len() != c {
        return Err(NnError::Dimension(format!(
            "{} bias entries for {c} classes",
            head_bias.len()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * plane);
    for (class, &bias) in head_bias.iter().enumerate() {
        let row = &head_weights.data()[class * k..(class + 1) * k];
        data.extend(weighted_plane(feature_maps.data(), row, plane, bias as f64));
    }
    Ok(PositionScores(Tensor::from_parts_unchecked(vec![c, h, w], data)))
}

/// Unnormalized CAM for one class (no bias term).
pub fn compute_cam(feature_maps: &Tensor, head_weights: &Tensor, class_index: usize) -> Result<CamGrid, NnError> {
    let (c, k, h, w) = check_head(feature_maps, head_weights)?;
    if class_index >= c {
        return Err(NnError::ClassIndex {
            index: class_index,
            classes: c,
        });
    }
    let row = &head_weights.data()[class_index * k..(class_index + 1) * k];
    Ok(CamGrid {
        height: h,
        width: w,
        values: weighted_plane(feature_maps.data(), row, h * w, 0.0),
        class_index,
        normalized: false,
    })
}

/// Min-max scales into `[0, 1]`; a constant grid becomes all zeros.
pub fn normalize_cam(grid: &CamGrid) -> CamGrid {
    let min = grid.values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = grid.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let range = max - min;
    let values = if range > 0.0 && range.is_finite() {
        grid.values
            .iter()
            .map(|&v| ((v - min) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; grid.values.len()]
    };
    CamGrid {
        values,
        normalized: true,
        ..grid.clone()
    }
}

/// Align-corners bilinear upsampling to frame resolution.
pub fn upsample_bilinear(grid: &CamGrid, out_h: usize, out_w: usize) -> Result<Heatmap, NnError> {
    if out_h == 0 || out_w == 0 {
        return Err(NnError::Dimension(format!(
            "output size {out_h}x{out_w} has a zero dimension"
        )));
    }
    Ok(Heatmap {
        height: out_h,
        width: out_w,
        values: resize_plane(
            &grid.values,
            grid.height,
            grid.width,
            out_h,
            out_w,
            Alignment::AlignCorners,
        ),
    })
}

const BLUE: [f32; 3] = [0.0, 0.0, 255.0];
const YELLOW: [f32; 3] = [255.0, 255.0, 0.0];
const RED: [f32; 3] = [255.0, 0.0, 0.0];

/// Three-stop gradient: blue at 0, yellow at 0.5, red at 1.
pub fn colormap(value: f32) -> [f32; 3] {
    let v = value.clamp(0.0, 1.0);
    let (from, to, t) = if v <= 0.5 {
        (BLUE, YELLOW, v / 0.5)
    } else {
        (YELLOW, RED, (v - 0.5) / 0.5)
    };
    [0, 1, 2].map(|i| from[i] + (to[i] - from[i]) * t)
}

/// Blends the colormapped overlay onto `base`.
///
/// Opacity at a pixel is `alpha * min(1, 2 * value)`: cold regions stay
/// see-through, everything from the yellow midpoint upwards is fully
/// coloured at `alpha = 1`.
pub fn render_heatmap(overlay: &Heatmap, base: &RgbImage, alpha: f32) -> Result<RgbaImage, NnError> {
    let (w, h) = base.dimensions();
    if overlay.width != w as usize || overlay.height != h as usize {
        return Err(NnError::Dimension(format!(
            "overlay {}x{} does not match frame {w}x{h}",
            overlay.width, overlay.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NnError::Dimension(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(RgbaImage::from_fn(w, h, |x, y| {
        let v = overlay.values[y as usize * overlay.width + x as usize].clamp(0.0, 1.0);
        let weight = alpha * (2.0 * v).min(1.0);
        let color = colormap(v);
        let Rgb(px) = *base.get_pixel(x, y);
        let mix = |i: usize| -> u8 {
            let out = px[i] as f32 * (1.0 - weight) + color[i] * weight;
            out.round().clamp(0.0, 255.0) as u8
        };
        Rgba([mix(0), mix(1), mix(2), 255])
    }))
}

pub fn encode_png(image: &RgbaImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, ImageFormat::Png)
        .expect("in-memory PNG encoding cannot fail");
    buf.into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, values: Vec<f32>) -> CamGrid {
        CamGrid {
            height: h,
            width: w,
            values,
            class_index: 0,
            normalized: false,
        }
    }

    #[test]
    fn scalar_position_score() {
        let f = Tensor::new(vec![1, 1, 1], vec![3.0]).unwrap();
        let w = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let s = per_position_scores(&f, &w, &[0.0]).unwrap();
        assert_eq!(s.0.data(), &[6.0]);
    }

    #[test]
    fn zero_features_give_bias_everywhere() {
        let f = Tensor::zeros(vec![4, 3, 3]);
        let w = Tensor::from_fn(vec![2, 4], |i| i as f32);
        let s = per_position_scores(&f, &w, &[0.5, -1.5]).unwrap();
        assert!(s.0.data()[..9].iter().all(|&v| v == 0.5));
        assert!(s.0.data()[9..].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn dimension_errors() {
        let f = Tensor::zeros(vec![4, 3, 3]);
        let w = Tensor::zeros(vec![2, 5]);
        assert!(per_position_scores(&f, &w, &[0.0, 0.0]).is_err());
        let w = Tensor::zeros(vec![2, 4]);
        assert!(per_position_scores(&f, &w, &[0.0]).is_err());
        assert_eq!(
            compute_cam(&f, &w, 2).unwrap_err(),
            NnError::ClassIndex { index: 2, classes: 2 }
        );
    }

    #[test]
    fn cam_plus_bias_is_position_score() {
        let f = Tensor::from_fn(vec![3, 2, 2], |i| (i as f32 * 0.37).sin());
        let w = Tensor::from_fn(vec![2, 3], |i| i as f32 - 2.5);
        let bias = [0.25, -0.75];
        let s = per_position_scores(&f, &w, &bias).unwrap();
        for c in 0..2 {
            let cam = compute_cam(&f, &w, c).unwrap();
            for (i, v) in cam.values.iter().enumerate() {
                assert!((v + bias[c] - s.0.data()[c * 4 + i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn equal_channels_give_constant_grid() {
        let f = Tensor::from_fn(vec![3, 4, 4], |_| 1.5);
        let w = Tensor::from_fn(vec![1, 3], |i| i as f32);
        let cam = compute_cam(&f, &w, 0).unwrap();
        assert!(cam.values.iter().all(|&v| v == cam.values[0]));
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_cam(&grid(2, 2, vec![1.0, 2.0, 3.0, 5.0]));
        assert_eq!(n.values, vec![0.0, 0.25, 0.5, 1.0]);
        assert!(n.normalized);
        let c = normalize_cam(&grid(2, 2, vec![4.0; 4]));
        assert_eq!(c.values, vec![0.0; 4]);
        assert_eq!(normalize_cam(&n), n);
    }

    #[test]
    fn upsample_examples() {
        let constant = CamGrid { normalized: true, ..grid(7, 7, vec![0.5; 49]) };
        let up = upsample_bilinear(&constant, 224, 224).unwrap();
        assert!(up.values.iter().all(|&v| v == 0.5));

        let g = CamGrid { normalized: true, ..grid(2, 2, vec![0.0, 1.0, 0.0, 1.0]) };
        let up = upsample_bilinear(&g, 2, 3).unwrap();
        assert_eq!(up.values[1], 0.5);
        assert_eq!(up.values[4], 0.5);
        assert!(upsample_bilinear(&g, 0, 3).is_err());
    }

    #[test]
    fn colormap_stops() {
        assert_eq!(colormap(0.0), BLUE);
        assert_eq!(colormap(0.5), YELLOW);
        assert_eq!(colormap(1.0), RED);
        assert_eq!(colormap(0.25), [127.5, 127.5, 127.5]);
    }

    #[test]
    fn render_examples() {
        let base = RgbImage::from_fn(4, 2, |x, y| Rgb([x as u8 * 40, y as u8 * 90, 7]));
        let overlay = |v: f32| Heatmap {
            height: 2,
            width: 4,
            values: vec![v; 8],
        };

        let out = render_heatmap(&overlay(0.8), &base, 0.0).unwrap();
        for (a, b) in out.pixels().zip(base.pixels()) {
            assert_eq!(&a.0[..3], &b.0[..]);
            assert_eq!(a.0[3], 255);
        }
        let red = render_heatmap(&overlay(1.0), &base, 1.0).unwrap();
        assert!(red.pixels().all(|p| p.0 == [255, 0, 0, 255]));
        let yellow = render_heatmap(&overlay(0.5), &base, 1.0).unwrap();
        assert!(yellow.pixels().all(|p| p.0 == [255, 255, 0, 255]));

        let wrong = Heatmap { height: 3, width: 4, values: vec![0.0; 12] };
        assert!(render_heatmap(&wrong, &base, 0.5).is_err());
    }

    #[test]
    fn png_has_signature() {
        let png = encode_png(&RgbaImage::new(3, 3));
        assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    }
}
