//! The BMNet container format.
//!
//! ```text
//! "BMN1" | u32 LE header length | UTF-8 header | f32 LE blob
//! ```
//!
//! The header is line oriented. Every line is `key=value`; blank lines and
//! lines starting with `#` are ignored:
//!
//! ```text
//! input_size=56
//! label=doctor
//! label=bear
//! layer=conv2d in=3 out=8 kernel=3 stride=2 padding=1 groups=1 weight=0+864 bias=864+32
//! layer=relu6
//! layer=gap
//! layer=linear in=32 out=2 weight=...+256 bias=...+8
//! ```
//!
//! Tensor references are `offset+length` in bytes, relative to the start of
//! the blob. The blob holds the tensors back to back in header order and
//! must end exactly where the last tensor ends.

use std::collections::HashMap;

use crate::error::NnError;
use crate::model::{Conv2d, Layer, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BMN1";

#[derive(Debug, Clone, Copy)]
struct BlobRef {
    offset: usize,
    len: usize,
}

/// Serializes a model. Used to produce fixtures and demo models.
pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut header = String::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |values: &[f32], blob: &mut Vec<u8>| -> String {
        let offset = blob.len();
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        format!("{offset}+{}", values.len() * 4)
    };

    header.push_str(&format!("input_size={}\n", model.input_size()));
    for label in model.labels() {
        header.push_str(&format!("label={label}\n"));
    }
    for layer in model.layers() {
        match layer {
            Layer::Conv2d(c) => {
                let w = push(&c.weight, &mut blob);
                let b = push(&c.bias, &mut blob);
                header.push_str(&format!(
                    "layer=conv2d in={} out={} kernel={} stride={} padding={} groups={} weight={w} bias={b}\n",
                    c.in_channels, c.out_channels, c.kernel, c.stride, c.padding, c.groups
                ));
            }
            Layer::Relu6 => header.push_str("layer=relu6\n"),
            Layer::GlobalAvgPool => header.push_str("layer=gap\n"),
            Layer::Linear => {
                let (classes, channels) = model
                    .head_weights()
                    .rows_cols()
                    .expect("validated head is a matrix");
                let w = push(model.head_weights().data(), &mut blob);
                let b = push(model.head_bias(), &mut blob);
                header.push_str(&format!(
                    "layer=linear in={channels} out={classes} weight={w} bias={b}\n"
                ));
            }
        }
    }

    let mut out = Vec::with_capacity(8 + header.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&blob);
    out
}

/// Parses and validates a BMNet file. Nothing is returned unless every
/// invariant of [`Model`] holds.
pub fn decode_model(bytes: &[u8]) -> Result<Model, NnError> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(NnError::Header("missing BMN1 magic".into()));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let header_end = 8usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| NnError::Header("header length exceeds file size".into()))?;
    let header = std::str::from_utf8(&bytes[8..header_end])
        .map_err(|_| NnError::Header("header is not valid UTF-8".into()))?;
    let blob = &bytes[header_end..];

    let mut input_size = None;
    let mut labels = Vec::new();
    let mut layers = Vec::new();
    let mut head: Option<(usize, usize, BlobRef, BlobRef)> = None;
    let mut blob_end = 0usize;

    for (lineno, line) in header.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| NnError::Header(format!("line {}: expected key=value", lineno + 1)))?;
        match key {
            "input_size" => {
                input_size = Some(parse_usize(value.trim(), "input_size")?);
            }
            "label" => labels.push(value.to_string()),
            "layer" => {
                let mut parts = value.split_whitespace();
                let kind = parts
                    .next()
                    .ok_or_else(|| NnError::Header(format!("line {}: empty layer", lineno + 1)))?;
                let attrs = parse_attrs(parts)?;
                match kind {
                    "conv2d" => {
                        let weight_ref = blob_ref(&attrs, "weight")?;
                        let bias_ref = blob_ref(&attrs, "bias")?;
                        let mut conv = Conv2d {
                            in_channels: attr(&attrs, "in")?,
                            out_channels: attr(&attrs, "out")?,
                            kernel: attr(&attrs, "kernel")?,
                            stride: attr(&attrs, "stride")?,
                            padding: attr(&attrs, "padding")?,
                            groups: attr(&attrs, "groups")?,
                            weight: Vec::new(),
                            bias: Vec::new(),
                        };
                        if conv.groups == 0 {
                            return Err(NnError::Header("groups must be positive".into()));
                        }
                        conv.weight =
                            read_floats(blob, weight_ref, conv.weight_len(), "conv weight")?;
                        conv.bias = read_floats(blob, bias_ref, conv.out_channels, "conv bias")?;
                        blob_end = blob_end.max(weight_ref.offset + weight_ref.len);
                        blob_end = blob_end.max(bias_ref.offset + bias_ref.len);
                        layers.push(Layer::Conv2d(conv));
                    }
                    "relu6" => layers.push(Layer::Relu6),
                    "gap" => layers.push(Layer::GlobalAvgPool),
                    "linear" => {
                        if head.is_some() {
                            return Err(NnError::Architecture("more than one linear layer".into()));
                        }
                        let w = blob_ref(&attrs, "weight")?;
                        let b = blob_ref(&attrs, "bias")?;
                        blob_end = blob_end.max(w.offset + w.len).max(b.offset + b.len);
                        head = Some((attr(&attrs, "in")?, attr(&attrs, "out")?, w, b));
                        layers.push(Layer::Linear);
                    }
                    other => return Err(NnError::UnsupportedLayer(other.to_string())),
                }
            }
            other => {
                return Err(NnError::Header(format!(
                    "line {}: unknown key `{other}`",
                    lineno + 1
                )))
            }
        }
    }

    let input_size = input_size.ok_or_else(|| NnError::Header("missing input_size".into()))?;
    let (channels, classes, w_ref, b_ref) =
        head.ok_or_else(|| NnError::Architecture("missing linear head".into()))?;
    let head_weights = read_floats(blob, w_ref, classes * channels, "head weight")?;
    let head_bias = read_floats(blob, b_ref, classes, "head bias")?;
    if blob.len() != blob_end {
        return Err(NnError::ByteLength {
            name: "blob".into(),
            expected: blob_end,
            found: blob.len(),
        });
    }
    if classes == 0 || channels == 0 {
        return Err(NnError::Architecture("empty linear head".into()));
    }

    Model::new(
        layers,
        Tensor::new(vec![classes, channels], head_weights)?,
        head_bias,
        labels,
        input_size,
    )
}

fn parse_usize(s: &str, what: &str) -> Result<usize, NnError> {
    s.parse()
        .map_err(|_| NnError::Header(format!("`{what}` is not an unsigned integer: `{s}`")))
}

fn parse_attrs<'a>(parts: impl Iterator<Item = &'a str>) -> Result<HashMap<&'a str, &'a str>, NnError> {
    parts
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| NnError::Header(format!("bad layer attribute `{p}`")))
        })
        .collect()
}

fn attr(attrs: &HashMap<&str, &str>, key: &str) -> Result<usize, NnError> {
    let raw = attrs
        .get(key)
        .ok_or_else(|| NnError::Header(format!("layer is missing `{key}`")))?;
    parse_usize(raw, key)
}

fn blob_ref(attrs: &HashMap<&str, &str>, key: &str) -> Result<BlobRef, NnError> {
    let raw = attrs
        .get(key)
        .ok_or_else(|| NnError::Header(format!("layer is missing `{key}`")))?;
    let (offset, len) = raw
        .split_once('+')
        .ok_or_else(|| NnError::Header(format!("`{key}` must be offset+length")))?;
    let r = BlobRef {
        offset: parse_usize(offset, key)?,
        len: parse_usize(len, key)?,
    };
    if !r.offset.is_multiple_of(4) {
        return Err(NnError::Header(format!("`{key}` offset is not 4-byte aligned")));
    }
    Ok(r)
}

fn read_floats(blob: &[u8], r: BlobRef, count: usize, name: &str) -> Result<Vec<f32>, NnError> {
    let expected = count * 4;
    if r.len != expected {
        return Err(NnError::ByteLength {
            name: name.into(),
            expected,
            found: r.len,
        });
    }
    let available = blob.len().saturating_sub(r.offset).min(r.len);
    if available < r.len {
        return Err(NnError::ByteLength {
            name: name.into(),
            expected,
            found: available,
        });
    }
    let values: Vec<f32> = blob[r.offset..r.offset + r.len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit;

    #[test]
    fn round_trip_tiny() {
        let model = testkit::random_tiny(7, 4);
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.input_size(), 56);
        assert_eq!(back.feature_shape(), (32, 7, 7));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let bytes = encode_model(&testkit::random_tiny(1, 3));
        for cut in [1, 4, 100] {
            let err = decode_model(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(matches!(err, NnError::ByteLength { .. }), "{err}");
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_model(&testkit::random_tiny(1, 3));
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_model(&bytes).unwrap_err(),
            NnError::ByteLength { .. }
        ));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_model(b"XXXX").unwrap_err(), NnError::Header(_)));
        let mut bad = b"BMN1".to_vec();
        bad.extend_from_slice(&1000u32.to_le_bytes());
        bad.extend_from_slice(b"input_size=56");
        assert!(matches!(decode_model(&bad).unwrap_err(), NnError::Header(_)));
    }

    #[test]
    fn unsupported_layer_kind() {
        let bytes = with_header(&encode_model(&testkit::random_tiny(1, 3)), |h| {
            h.replacen("layer=relu6", "layer=batchnorm", 1)
        });
        assert_eq!(
            decode_model(&bytes).unwrap_err(),
            NnError::UnsupportedLayer("batchnorm".into())
        );
    }

    #[test]
    fn declared_length_mismatch() {
        let bytes = with_header(&encode_model(&testkit::random_tiny(1, 3)), |h| {
            h.replacen("bias=864+32", "bias=864+28", 1)
        });
        assert!(matches!(
            decode_model(&bytes).unwrap_err(),
            NnError::ByteLength { .. }
        ));
    }

    /// Rewrites the header text of an encoded model, keeping the blob.
    fn with_header(bytes: &[u8], f: impl Fn(&str) -> String) -> Vec<u8> {
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        let new_header = f(header);
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(new_header.len() as u32).to_le_bytes());
        out.extend_from_slice(new_header.as_bytes());
        out.extend_from_slice(&bytes[8 + len..]);
        out
    }
}
