//! `.kcm` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KCR1"                      magic, last byte is the format version
//! u32                         header length in bytes
//! header                      UTF-8 `key=value` lines describing the model
//! f32 * total_params          per learnable layer: kernel/weights, then bias
//! u32                         CRC32 of every byte after the magic
//! ```
//!
//! Header keys, in order: `input=HxWxC`, `classes=K`, one `class=<name>` per
//! class, then one `layer=<kind> [key=value ...]` per layer.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::layers::Padding;
use crate::tensor::{Real, Tensor};

use super::{LayerSpec, ModelConfig, SequentialModel};

pub const MAGIC: &[u8; 4] = b"KCR1";
const VERSION: u8 = MAGIC[3];

fn encode_header(config: &ModelConfig, class_names: &[String]) -> Result<String> {
    let [h, w, c] = config.input_shape;
    let mut out = String::new();
    let _ = writeln!(out, "input={h}x{w}x{c}");
    let _ = writeln!(out, "classes={}", config.num_classes);
    for name in class_names {
        if name.contains('\n') || name.contains('\r') {
            return Err(Error::InvalidArgument(format!("class name {name:?} contains a line break")));
        }
        let _ = writeln!(out, "class={name}");
    }
    for spec in &config.layers {
        let line = match *spec {
            LayerSpec::Rescaling { scale } => format!("rescaling scale={scale}"),
            LayerSpec::Conv2D { filters, kernel, stride, padding } => format!(
                "conv2d filters={filters} kernel={}x{} stride={stride} padding={}",
                kernel.0,
                kernel.1,
                match padding {
                    Padding::Same => "same",
                    Padding::Valid => "valid",
                }
            ),
            LayerSpec::MaxPool2D { pool, stride } => format!("maxpool2d pool={pool} stride={stride}"),
            LayerSpec::ReLU => "relu".to_string(),
            LayerSpec::Flatten => "flatten".to_string(),
            LayerSpec::Dense { units } => format!("dense units={units}"),
            LayerSpec::Dropout { rate } => format!("dropout rate={rate}"),
            LayerSpec::Softmax => "softmax".to_string(),
        };
        let _ = writeln!(out, "layer={line}");
    }
    Ok(out)
}

fn header_err(msg: impl Into<String>) -> Error {
    CheckpointError::Header(msg.into()).into()
}

fn parse_num<N: std::str::FromStr>(s: &str, what: &str) -> Result<N> {
    s.parse().map_err(|_| header_err(format!("bad {what}: {s:?}")))
}

fn parse_pair(s: &str, what: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('x').ok_or_else(|| header_err(format!("bad {what}: {s:?}")))?;
    Ok((parse_num(a, what)?, parse_num(b, what)?))
}

fn parse_layer(line: &str) -> Result<LayerSpec> {
    let mut tokens = line.split(' ');
    let kind = tokens.next().unwrap_or_default();
    let mut opts = std::collections::HashMap::new();
    for t in tokens {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| header_err(format!("bad layer option {t:?}")))?;
        opts.insert(k, v);
    }
    let get = |key: &str| {
        opts.get(key)
            .copied()
            .ok_or_else(|| header_err(format!("{kind} layer missing {key}")))
    };
    Ok(match kind {
        "rescaling" => LayerSpec::Rescaling { scale: parse_num(get("scale")?, "scale")? },
        "conv2d" => LayerSpec::Conv2D {
            filters: parse_num(get("filters")?, "filters")?,
            kernel: parse_pair(get("kernel")?, "kernel")?,
            stride: parse_num(get("stride")?, "stride")?,
            padding: match get("padding")? {
                "same" => Padding::Same,
                "valid" => Padding::Valid,
                other => return Err(header_err(format!("unknown padding {other:?}"))),
            },
        },
        "maxpool2d" => LayerSpec::MaxPool2D {
            pool: parse_num(get("pool")?, "pool")?,
            stride: parse_num(get("stride")?, "stride")?,
        },
        "relu" => LayerSpec::ReLU,
        "flatten" => LayerSpec::Flatten,
        "dense" => LayerSpec::Dense { units: parse_num(get("units")?, "units")? },
        "dropout" => LayerSpec::Dropout { rate: parse_num(get("rate")?, "rate")? },
        "softmax" => LayerSpec::Softmax,
        other => return Err(header_err(format!("unknown layer kind {other:?}"))),
    })
}

fn decode_header(text: &str) -> Result<(ModelConfig, Vec<String>)> {
    let mut input = None;
    let mut classes = None;
    let mut names = Vec::new();
    let mut layers = Vec::new();
    for line in text.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| header_err(format!("line without '=': {line:?}")))?;
        match key {
            "input" => {
                let parts: Vec<&str> = value.split('x').collect();
                let &[h, w, c] = parts.as_slice() else {
                    return Err(header_err(format!("bad input shape {value:?}")));
                };
                input = Some([parse_num(h, "input")?, parse_num(w, "input")?, parse_num(c, "input")?]);
            }
            "classes" => classes = Some(parse_num::<usize>(value, "classes")?),
            "class" => names.push(value.to_string()),
            "layer" => layers.push(parse_layer(value)?),
            other => return Err(header_err(format!("unknown key {other:?}"))),
        }
    }
    let config = ModelConfig {
        input_shape: input.ok_or_else(|| header_err("missing input"))?,
        layers,
        num_classes: classes.ok_or_else(|| header_err("missing classes"))?,
    };
    if names.len() != config.num_classes {
        return Err(header_err(format!(
            "{} class names for {} classes",
            names.len(),
            config.num_classes
        )));
    }
    Ok((config, names))
}

/// Serializes a model to checkpoint bytes. Parameters are stored as `f32`.
pub fn to_bytes<T: Real>(model: &SequentialModel<T>) -> Result<Vec<u8>> {
    let header = encode_header(&model.config, &model.class_names)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * model.total_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[MAGIC.len()..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses checkpoint bytes into an `f32` model.
pub fn from_bytes(bytes: &[u8]) -> Result<SequentialModel<f32>> {
    if bytes.len() < 3 || &bytes[..3] != &MAGIC[..3] {
        return Err(CheckpointError::BadMagic.into());
    }
    if bytes.len() < 4 {
        return Err(CheckpointError::Truncated("missing version byte".into()).into());
    }
    if bytes[3] != VERSION {
        return Err(CheckpointError::Version {
            found: bytes[3] as char,
            expected: VERSION as char,
        }
        .into());
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::Truncated(format!("{} bytes", bytes.len())).into());
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&body[4..]);

    // Parse as far as possible first so a short file reports truncation
    // rather than a checksum failure.
    let parsed = body
        .get(8..8 + header_len)
        .ok_or_else(|| Error::from(CheckpointError::Truncated("header cut short".into())))
        .and_then(|h| std::str::from_utf8(h).map_err(|_| header_err("header is not UTF-8")))
        .and_then(decode_header)
        .and_then(|(config, names)| {
            let model = SequentialModel::<f32>::build(config, 0)?.with_class_names(names)?;
            Ok(model)
        });

    if stored != computed {
        if let Ok(model) = &parsed {
            let expected = 12 + header_len + 4 * model.total_params();
            if bytes.len() < expected {
                return Err(CheckpointError::Truncated(format!(
                    "{} bytes, expected {expected}",
                    bytes.len()
                ))
                .into());
            }
        }
        if let Err(Error::Checkpoint(CheckpointError::Truncated(msg))) = parsed {
            return Err(CheckpointError::Truncated(msg).into());
        }
        return Err(CheckpointError::Checksum { stored, computed }.into());
    }

    let mut model = parsed.map_err(|e| match e {
        Error::Checkpoint(_) => e,
        other => header_err(other.to_string()),
    })?;
    let payload = &body[8 + header_len..];
    let expected = 4 * model.total_params();
    if payload.len() != expected {
        return Err(CheckpointError::Truncated(format!(
            "parameter payload is {} bytes, expected {expected}",
            payload.len()
        ))
        .into());
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for p in model.params_mut() {
        let values: Vec<f32> = floats.by_ref().take(p.value.len()).collect();
        p.value = Tensor::new(p.value.dims().to_vec(), values)
            .map_err(|_| header_err("non-finite parameter value"))?;
    }
    Ok(model)
}

pub fn save<T: Real>(model: &SequentialModel<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<SequentialModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn small() -> SequentialModel<f32> {
        SequentialModel::build(ModelConfig::with_head(&[4, 8], 16, [12, 12, 1], 3), 9)
            .unwrap()
            .with_class_names(vec!["ب".into(), "ت".into(), "class two".into()])
            .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let bytes = to_bytes(&m).unwrap();
        assert_eq!(&bytes[..4], b"KCR1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.class_names(), m.class_names());
        let mut rng = Rng::new(2);
        let x = Tensor::from_fn([3, 12, 12, 1], |_| (rng.uniform() * 255.0) as f32).unwrap();
        let a = m.predict(&x).unwrap();
        let b = back.predict(&x).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn header_layout() {
        let bytes = to_bytes(&small()).unwrap();
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        assert!(header.starts_with("input=12x12x1\nclasses=3\nclass=ب\n"));
        assert!(header.contains("layer=conv2d filters=4 kernel=3x3 stride=1 padding=same\n"));
        assert!(header.contains("layer=dropout rate=0.2\n"));
        assert_eq!(bytes.len(), 8 + len + 4 * small().total_params() + 4);
    }

    #[test]
    fn every_single_byte_corruption_is_caught() {
        let bytes = to_bytes(&small()).unwrap();
        for i in (4..bytes.len()).step_by(7) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(from_bytes(&bad).is_err(), "byte {i} flip went unnoticed");
        }
        let mut bad = bytes.clone();
        let mid = bytes.len() - 40;
        bad[mid] ^= 0x10;
        assert!(matches!(
            from_bytes(&bad),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));
    }

    #[test]
    fn magic_version_truncation() {
        let bytes = to_bytes(&small()).unwrap();
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"PK\x03\x04");
        assert!(matches!(from_bytes(&wrong), Err(Error::Checkpoint(CheckpointError::BadMagic))));
        let mut v2 = bytes.clone();
        v2[3] = b'2';
        assert!(matches!(
            from_bytes(&v2),
            Err(Error::Checkpoint(CheckpointError::Version { found: '2', .. }))
        ));
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(
            from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
        assert!(matches!(
            from_bytes(&bytes[..6]),
            Err(Error::Checkpoint(CheckpointError::Truncated(_)))
        ));
    }

    #[test]
    fn rejects_line_breaks_in_class_names() {
        let m = small().with_class_names(vec!["a\nb".into(), "c".into(), "d".into()]).unwrap();
        assert!(to_bytes(&m).is_err());
    }
}
