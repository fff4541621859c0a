//! Deterministic model builders for demos, fixtures and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Conv2d, Layer, Model};
use crate::tensor::Tensor;

/// Side length of the BMNet-Tiny input.
pub const TINY_INPUT: usize = 56;
/// Channel widths of the three BMNet-Tiny convolutions.
pub const TINY_CHANNELS: [usize; 3] = [8, 16, 32];

fn conv(in_channels: usize, out_channels: usize) -> Conv2d {
    let mut c = Conv2d {
        in_channels,
        out_channels,
        kernel: 3,
        stride: 2,
        padding: 1,
        groups: 1,
        weight: Vec::new(),
        bias: vec![0.0; out_channels],
    };
    c.weight = vec![0.0; c.weight_len()];
    c
}

fn default_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("class-{i}")).collect()
}

/// Three stride-2 3x3 convolutions with relu6, then pool and head.
fn stack(input: usize, widths: &[usize], convs: impl FnMut(usize, usize) -> Conv2d, head: Tensor, bias: Vec<f32>, labels: Vec<String>) -> Model {
    let mut convs = convs;
    let mut layers = Vec::new();
    let mut prev = 3;
    for &w in widths {
        layers.push(Layer::Conv2d(convs(prev, w)));
        layers.push(Layer::Relu6);
        prev = w;
    }
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear);
    Model::new(layers, head, bias, labels, input).expect("testkit builds valid models")
}

/// BMNet-Tiny with every weight and bias zero.
pub fn zero_tiny(num_classes: usize) -> Model {
    stack(
        TINY_INPUT,
        &TINY_CHANNELS,
        conv,
        Tensor::zeros(vec![num_classes, 32]),
        vec![0.0; num_classes],
        default_labels(num_classes),
    )
}

/// BMNet-Tiny with seeded uniform weights scaled by fan-in.
pub fn random_tiny(seed: u64, num_classes: usize) -> Model {
    random_model(seed, TINY_INPUT, &TINY_CHANNELS, default_labels(num_classes))
}

/// A randomly initialised model of the BMNet-Tiny family with arbitrary
/// input size, channel widths and labels.
pub fn random_model(seed: u64, input: usize, widths: &[usize], labels: Vec<String>) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = labels.len();
    let last = *widths.last().expect("at least one convolution");
    let mut make = |inc: usize, outc: usize| {
        let mut c = conv(inc, outc);
        let bound = (6.0 / (inc * 9) as f32).sqrt();
        c.weight.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        c.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        c
    };
    let convs: Vec<Conv2d> = {
        let mut prev = 3;
        widths
            .iter()
            .map(|&w| {
                let c = make(prev, w);
                prev = w;
                c
            })
            .collect()
    };
    let bound = (6.0 / last as f32).sqrt();
    let head = Tensor::from_fn(vec![classes, last], |_| rng.random_range(-bound..bound));
    let bias = (0..classes).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut it = convs.into_iter();
    stack(input, widths, |_, _| it.next().unwrap(), head, bias, labels)
}

/// BMNet-Tiny whose logits depend only on frame brightness.
///
/// The backbone routes the mean of the three input channels at each
/// stride-2 sample point into feature channel 0, offset by `+1`, so a
/// uniform frame with normalised grey level `g` pools to `g + 1`. Class
/// `c` then scores `gains[c] * (g + 1) + biases[c]`.
pub fn brightness_model(labels: &[&str], gains: &[f32], biases: &[f32]) -> Model {
    brightness_model_sized(TINY_INPUT, labels, gains, biases)
}

/// [`brightness_model`] for an arbitrary input side.
pub fn brightness_model_sized(input: usize, labels: &[&str], gains: &[f32], biases: &[f32]) -> Model {
    assert_eq!(labels.len(), gains.len());
    assert_eq!(labels.len(), biases.len());
    let mut idx = 0;
    let mut convs = |inc: usize, outc: usize| {
        let mut c = conv(inc, outc);
        let center = 4; // (1, 1) in a 3x3 kernel
        if idx == 0 {
            for ic in 0..inc {
                c.weight[ic * 9 + center] = 1.0 / 3.0;
            }
            c.bias[0] = 1.0;
        } else {
            c.weight[center] = 1.0;
        }
        idx += 1;
        c
    };
    let classes = labels.len();
    let head = Tensor::from_fn(vec![classes, 32], |i| if i % 32 == 0 { gains[i / 32] } else { 0.0 });
    stack(
        input,
        &TINY_CHANNELS,
        &mut convs,
        head,
        biases.to_vec(),
        labels.iter().map(|s| s.to_string()).collect(),
    )
}

/// A uniform grey RGB frame.
pub fn grey_frame(side: u32, level: u8) -> image::RgbImage {
    image::RgbImage::from_pixel(side, side, image::Rgb([level, level, level]))
}

/// A seeded noise frame.
pub fn noise_frame(seed: u64, width: u32, height: u32) -> image::RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    image::RgbImage::from_fn(width, height, |_, _| image::Rgb(rng.random()))
}
