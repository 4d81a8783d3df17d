//! Convolution weights for blocks 1–4 of VGG19 and the `VGGW` container.
//!
//! Layout of a weight file:
//!
//! ```text
//! "VGGW" | version: u32 LE | header_len: u64 LE | JSON manifest (header_len bytes) | payload
//! ```
//!
//! The manifest is an array of `{name, dtype, shape, offset, byte_length}`
//! entries. Offsets are relative to the start of the payload and are
//! multiples of 64; tensors are little-endian `f32`, row-major, kernels in
//! `[out, in, kh, kw]` order. Each conv layer contributes two entries,
//! `<layer>/kernel` and `<layer>/bias`. Unknown entries are ignored.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::seeded_rng;

pub const MAGIC: &[u8; 4] = b"VGGW";
pub const FORMAT_VERSION: u32 = 1;
pub const PAYLOAD_ALIGN: u64 = 64;

/// `(name, in_channels, out_channels)` for every conv layer through block 4.
pub const VGG19_PLAN: [(&str, usize, usize); 12] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvWeights {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out, in, 3, 3]`, row-major.
    pub kernel: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, 3, 3]
    }
}

/// The twelve conv layers of VGG19 blocks 1–4, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkWeights {
    layers: Vec<ConvWeights>,
}

impl NetworkWeights {
    /// Validates `layers` against [`VGG19_PLAN`].
    pub fn new(layers: Vec<ConvWeights>) -> Result<Self> {
        if layers.len() != VGG19_PLAN.len() {
            return Err(Error::CorruptWeights(format!(
                "expected {} conv layers, got {}",
                VGG19_PLAN.len(),
                layers.len()
            )));
        }
        for (layer, &(name, cin, cout)) in layers.iter().zip(VGG19_PLAN.iter()) {
            if layer.name != name {
                return Err(Error::MissingLayer(name.to_string()));
            }
            let expected = vec![cout, cin, 3, 3];
            let found = vec![layer.out_channels, layer.in_channels, 3, 3];
            if expected != found || layer.kernel.len() != cout * cin * 9 {
                return Err(Error::ShapeMismatch {
                    layer: name.to_string(),
                    expected,
                    found,
                });
            }
            if layer.bias.len() != cout {
                return Err(Error::ShapeMismatch {
                    layer: format!("{name}/bias"),
                    expected: vec![cout],
                    found: vec![layer.bias.len()],
                });
            }
            if !layer.kernel.iter().chain(&layer.bias).all(|v| v.is_finite()) {
                return Err(Error::NonFinite("network weights"));
            }
        }
        Ok(NetworkWeights { layers })
    }

    pub fn layers(&self) -> &[ConvWeights] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&ConvWeights> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// He-initialized weights: kernels `N(0, 2/(in·9))`, zero biases.
pub fn random_weights(seed: u64) -> NetworkWeights {
    let mut rng = seeded_rng(seed);
    let layers = VGG19_PLAN
        .iter()
        .map(|&(name, cin, cout)| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            ConvWeights {
                name: name.to_string(),
                in_channels: cin,
                out_channels: cout,
                kernel: (0..cout * cin * 9)
                    .map(|_| normal.sample(&mut rng) as f32)
                    .collect(),
                bias: vec![0.0; cout],
            }
        })
        .collect();
    NetworkWeights::new(layers).expect("plan-shaped weights")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub byte_length: u64,
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|e| Error::CorruptWeights(format!("truncated {what}: {e}")))
}

/// Parses a `VGGW` stream.
pub fn read_weights(mut reader: impl Read) -> Result<NetworkWeights> {
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::CorruptWeights(format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    read_exact(&mut reader, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::CorruptWeights(format!(
            "unsupported version {version}"
        )));
    }
    let mut dword = [0u8; 8];
    read_exact(&mut reader, &mut dword, "header length")?;
    let header_len = u64::from_le_bytes(dword);
    if header_len > 1 << 26 {
        return Err(Error::CorruptWeights(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header = vec![0u8; header_len as usize];
    read_exact(&mut reader, &mut header, "manifest")?;
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&header)
        .map_err(|e| Error::CorruptWeights(format!("manifest: {e}")))?;
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::CorruptWeights(format!("payload: {e}")))?;

    let by_name: HashMap<&str, &ManifestEntry> =
        entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let tensor = |name: &str, layer: &str, expected: Vec<usize>| -> Result<Vec<f32>> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| Error::MissingLayer(layer.to_string()))?;
        if entry.shape != expected {
            return Err(Error::ShapeMismatch {
                layer: layer.to_string(),
                expected,
                found: entry.shape.clone(),
            });
        }
        if entry.dtype != "f32" {
            return Err(Error::CorruptWeights(format!(
                "{name}: unsupported dtype {}",
                entry.dtype
            )));
        }
        let count: usize = entry.shape.iter().product();
        if entry.byte_length != (count * 4) as u64 {
            return Err(Error::CorruptWeights(format!(
                "{name}: byte_length {} does not match shape {:?}",
                entry.byte_length, entry.shape
            )));
        }
        if entry.offset % PAYLOAD_ALIGN != 0 {
            return Err(Error::CorruptWeights(format!(
                "{name}: offset {} is not {PAYLOAD_ALIGN}-byte aligned",
                entry.offset
            )));
        }
        let start = entry.offset as usize;
        let bytes = payload
            .get(start..start + count * 4)
            .ok_or_else(|| Error::CorruptWeights(format!("{name}: payload out of range")))?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::CorruptWeights(format!("{name}: non-finite value")));
        }
        Ok(values)
    };

    let layers = VGG19_PLAN
        .iter()
        .map(|&(name, cin, cout)| {
            Ok(ConvWeights {
                name: name.to_string(),
                in_channels: cin,
                out_channels: cout,
                kernel: tensor(&format!("{name}/kernel"), name, vec![cout, cin, 3, 3])?,
                bias: tensor(&format!("{name}/bias"), name, vec![cout])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkWeights::new(layers)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<NetworkWeights> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(BufReader::new(file))
}

/// A named tensor to serialize.
pub struct RawTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f32],
}

/// Writes arbitrary tensors in the `VGGW` container. The manifest is padded
/// with trailing spaces so the payload starts on a 64-byte boundary.
pub fn write_tensors(tensors: &[RawTensor<'_>], mut writer: impl Write) -> std::io::Result<()> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        let byte_length = (t.values.len() * 4) as u64;
        entries.push(ManifestEntry {
            name: t.name.clone(),
            dtype: "f32".into(),
            shape: t.shape.clone(),
            offset,
            byte_length,
        });
        offset = (offset + byte_length).div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN;
    }
    let mut header = serde_json::to_vec(&entries).map_err(std::io::Error::other)?;
    let prefix = 16u64;
    let unpadded = prefix + header.len() as u64;
    let padded = unpadded.div_ceil(PAYLOAD_ALIGN) * PAYLOAD_ALIGN;
    header.resize(header.len() + (padded - unpadded) as usize, b' ');

    writer.write_all(MAGIC)?;
    writer.write_all(&FORMAT_VERSION.to_le_bytes())?;
    writer.write_all(&(header.len() as u64).to_le_bytes())?;
    writer.write_all(&header)?;
    let mut written = 0u64;
    for (t, e) in tensors.iter().zip(&entries) {
        writer.write_all(&vec![0u8; (e.offset - written) as usize])?;
        for v in t.values {
            writer.write_all(&v.to_le_bytes())?;
        }
        written = e.offset + e.byte_length;
    }
    Ok(())
}

pub fn write_weights(weights: &NetworkWeights, writer: impl Write) -> std::io::Result<()> {
    let tensors: Vec<RawTensor<'_>> = weights
        .layers()
        .iter()
        .flat_map(|l| {
            [
                RawTensor {
                    name: format!("{}/kernel", l.name),
                    shape: l.kernel_shape(),
                    values: &l.kernel,
                },
                RawTensor {
                    name: format!("{}/bias", l.name),
                    shape: vec![l.out_channels],
                    values: &l.bias,
                },
            ]
        })
        .collect();
    write_tensors(&tensors, writer)
}

pub fn save_weights(weights: &NetworkWeights, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_weights(weights, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}
