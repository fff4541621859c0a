//! Separable bilinear resampling of single-channel `f32` planes.

/// Where output sample centres land in the source grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Pixel centres at `i + 0.5`; used for image preprocessing.
    HalfPixel,
    /// First and last samples coincide with the source corners; used for CAM overlays.
    AlignCorners,
}

#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f32,
}

fn taps(src: usize, dst: usize, align: Alignment) -> Vec<Tap> {
    (0..dst)
        .map(|i| {
            let pos = match align {
                Alignment::HalfPixel => {
                    ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64)
                }
                Alignment::AlignCorners => {
                    if dst == 1 {
                        0.0
                    } else {
                        i as f64 * (src - 1) as f64 / (dst - 1) as f64
                    }
                }
            };
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            Tap {
                lo,
                hi,
                frac: (pos - lo as f64) as f32,
            }
        })
        .collect()
}

/// Resizes a row-major `src_h x src_w` plane to `dst_h x dst_w`.
///
/// Every output value is a convex combination of at most four source
/// values and is clamped to their range.
pub fn resize_plane(
    src: &[f32],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
    align: Alignment,
) -> Vec<f32> {
    assert_eq!(src.len(), src_h * src_w, "plane size mismatch");
    assert!(src_h > 0 && src_w > 0 && dst_h > 0 && dst_w > 0, "empty plane");
    let xs = taps(src_w, dst_w, align);
    let ys = taps(src_h, dst_h, align);
    let mut out = Vec::with_capacity(dst_h * dst_w);
    for ty in &ys {
        let top = &src[ty.lo * src_w..(ty.lo + 1) * src_w];
        let bottom = &src[ty.hi * src_w..(ty.hi + 1) * src_w];
        for tx in &xs {
            let (a, b, c, d) = (top[tx.lo], top[tx.hi], bottom[tx.lo], bottom[tx.hi]);
            let upper = a * (1.0 - tx.frac) + b * tx.frac;
            let lower = c * (1.0 - tx.frac) + d * tx.frac;
            let v = upper * (1.0 - ty.frac) + lower * ty.frac;
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            out.push(v.clamp(lo, hi));
        }
    }
    out
}
