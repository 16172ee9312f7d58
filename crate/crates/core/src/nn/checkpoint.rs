//! Versioned little-endian checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size   field
//! 0       8      magic "VSEGCKPT"
//! 8       4      format version (u32, currently 1)
//! 12      1      scalar width in bytes (4 = f32, 8 = f64)
//! 13      3      reserved, zero
//! 16      4      input channels (u32)
//! 20      4      layer count L (u32)
//! 24      24*L   layer table, six u32 per layer:
//!                  conv        0, kernel, in, out, stride, pad
//!                  batch_norm  1, channels, 0, 0, 0, 0
//!                  relu        2, 0, 0, 0, 0, 0
//!                  max_pool    3, 0, 0, 0, 0, 0
//!                  upsample    4, 0, 0, 0, 0, 0
//!                  crop_concat 5, source, 0, 0, 0, 0
//! ..      8      iteration counter (u64)
//! ..      56     sample RNG: ChaCha8 seed (32 bytes), stream (u64), word position (u128)
//! ..             parameter blobs, layer by layer:
//!                  conv        weight (out*in*k*k scalars, OIHW), bias (out scalars)
//!                  batch_norm  initialized flag (u8), gamma, beta, running mean,
//!                              running variance (channels scalars each)
//! ..      1      optimizer flag (u8); when 1, momentum buffers follow in
//!                the order of `Network::parameters`, with the same lengths
//! ```
//!
//! Nothing may follow the last field.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::NnError;

use super::network::{BatchNormParams, LayerParams, LayerSpec, Network, NetworkSpec};
use super::scalar::Scalar;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"VSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub iteration: u64,
    pub rng: RngState,
    /// Momentum buffers, aligned with `Network::parameters`.
    pub velocity: Option<Vec<Vec<T>>>,
}

fn fmt_err(msg: impl Into<String>) -> NnError {
    NnError::Format(msg.into())
}

fn io_err(e: std::io::Error) -> NnError {
    fmt_err(format!("truncated or unreadable data: {e}"))
}

fn write_scalars<T: Scalar>(out: &mut Vec<u8>, xs: &[T]) {
    for &x in xs {
        x.write_le(out);
    }
}

fn read_scalars<T: Scalar>(cur: &mut &[u8], n: usize) -> Result<Vec<T>, NnError> {
    let w = T::TAG as usize;
    if cur.len() < n * w {
        return Err(fmt_err(format!("expected {n} scalars, only {} bytes left", cur.len())));
    }
    let (head, rest) = cur.split_at(n * w);
    *cur = rest;
    Ok(head.chunks_exact(w).map(T::read_le).collect())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.network.spec();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(FORMAT_VERSION).unwrap();
        out.extend_from_slice(&[T::TAG, 0, 0, 0]);
        out.write_u32::<LittleEndian>(spec.input_channels as u32).unwrap();
        out.write_u32::<LittleEndian>(spec.layers.len() as u32).unwrap();
        for l in &spec.layers {
            let row: [usize; 6] = match *l {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    stride,
                    pad,
                } => [0, kernel, in_channels, out_channels, stride, pad],
                LayerSpec::BatchNorm { channels } => [1, channels, 0, 0, 0, 0],
                LayerSpec::Relu => [2, 0, 0, 0, 0, 0],
                LayerSpec::MaxPool => [3, 0, 0, 0, 0, 0],
                LayerSpec::Upsample => [4, 0, 0, 0, 0, 0],
                LayerSpec::CropConcat { source } => [5, source, 0, 0, 0, 0],
            };
            for v in row {
                out.write_u32::<LittleEndian>(v as u32).unwrap();
            }
        }
        out.write_u64::<LittleEndian>(self.iteration).unwrap();
        out.extend_from_slice(&self.rng.seed);
        out.write_u64::<LittleEndian>(self.rng.stream).unwrap();
        out.write_u128::<LittleEndian>(self.rng.word_pos).unwrap();
        for p in self.network.layer_params() {
            match p {
                LayerParams::Conv { weight, bias } => {
                    write_scalars(&mut out, weight.as_slice());
                    write_scalars(&mut out, bias);
                }
                LayerParams::BatchNorm(b) => {
                    out.push(u8::from(b.initialized));
                    for v in [&b.gamma, &b.beta, &b.running_mean, &b.running_var] {
                        write_scalars(&mut out, v);
                    }
                }
                LayerParams::Stateless => {}
            }
        }
        match &self.velocity {
            Some(vel) => {
                out.push(1);
                for v in vel {
                    write_scalars(&mut out, v);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        std::io::Read::read_exact(&mut cur, &mut magic).map_err(io_err)?;
        if &magic != MAGIC {
            return Err(fmt_err("bad magic header"));
        }
        let version = cur.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != FORMAT_VERSION {
            return Err(fmt_err(format!("unsupported format version {version}")));
        }
        let tag = cur.read_u8().map_err(io_err)?;
        if tag != T::TAG {
            return Err(fmt_err(format!(
                "file stores {}-byte scalars, loader expects {}-byte",
                tag,
                T::TAG
            )));
        }
        let mut reserved = [0u8; 3];
        std::io::Read::read_exact(&mut cur, &mut reserved).map_err(io_err)?;
        let input_channels = cur.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let n_layers = cur.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        if n_layers > 1 << 16 {
            return Err(fmt_err(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mut row = [0usize; 6];
            for v in &mut row {
                *v = cur.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            }
            layers.push(match row[0] {
                0 => LayerSpec::Conv {
                    kernel: row[1],
                    in_channels: row[2],
                    out_channels: row[3],
                    stride: row[4],
                    pad: row[5],
                },
                1 => LayerSpec::BatchNorm { channels: row[1] },
                2 => LayerSpec::Relu,
                3 => LayerSpec::MaxPool,
                4 => LayerSpec::Upsample,
                5 => LayerSpec::CropConcat { source: row[1] },
                k => return Err(fmt_err(format!("layer {i}: unknown kind {k}"))),
            });
        }
        let spec = NetworkSpec { input_channels, layers };
        spec.channel_plan()?;
        let iteration = cur.read_u64::<LittleEndian>().map_err(io_err)?;
        let mut seed = [0u8; 32];
        std::io::Read::read_exact(&mut cur, &mut seed).map_err(io_err)?;
        let stream = cur.read_u64::<LittleEndian>().map_err(io_err)?;
        let word_pos = cur.read_u128::<LittleEndian>().map_err(io_err)?;

        let mut params = Vec::with_capacity(n_layers);
        for l in &spec.layers {
            params.push(match *l {
                LayerSpec::Conv {
                    kernel,
                    in_channels,
                    out_channels,
                    ..
                } => {
                    let shape = [out_channels, in_channels, kernel, kernel];
                    let w = read_scalars::<T>(&mut cur, shape.iter().product())?;
                    LayerParams::Conv {
                        weight: Tensor::from_vec(shape, w)?,
                        bias: read_scalars(&mut cur, out_channels)?,
                    }
                }
                LayerSpec::BatchNorm { channels } => {
                    let initialized = match cur.read_u8().map_err(io_err)? {
                        0 => false,
                        1 => true,
                        f => return Err(fmt_err(format!("bad batch-norm flag {f}"))),
                    };
                    LayerParams::BatchNorm(BatchNormParams {
                        initialized,
                        gamma: read_scalars(&mut cur, channels)?,
                        beta: read_scalars(&mut cur, channels)?,
                        running_mean: read_scalars(&mut cur, channels)?,
                        running_var: read_scalars(&mut cur, channels)?,
                    })
                }
                _ => LayerParams::Stateless,
            });
        }
        let network = Network::from_parts(spec, params)?;
        let velocity = match cur.read_u8().map_err(io_err)? {
            0 => None,
            1 => {
                let lens: Vec<usize> = network.parameters().iter().map(|p| p.len()).collect();
                Some(
                    lens.into_iter()
                        .map(|n| read_scalars(&mut cur, n))
                        .collect::<Result<Vec<_>, _>>()?,
                )
            }
            f => return Err(fmt_err(format!("bad optimizer flag {f}"))),
        };
        if !cur.is_empty() {
            return Err(fmt_err(format!("{} trailing bytes", cur.len())));
        }
        Ok(Self {
            network,
            iteration,
            rng: RngState { seed, stream, word_pos },
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes()).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        let bytes = std::fs::read(path).map_err(|source| NnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}
