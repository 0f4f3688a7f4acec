//! Groupwise asymmetric 4-bit quantization.
//!
//! Each group of `g` consecutive values is mapped to codes `0..=15` with
//! `value ≈ zero_point + code · scale`, where `zero_point` is the group minimum
//! and `scale = (max − min) / 15`. Codes are rounded half-to-even.
//!
//! # Dump format
//!
//! All integers and floats little-endian:
//!
//! ```text
//! magic  b"BKVQ"
//! u32    version (1)
//! u32    entry count
//! u32    head dimension
//! u32    group size g
//! per entry:
//!   u64  token position
//!   key groups, then value groups; per group:
//!     f32 scale, f32 zero_point,
//!     ceil(len/2) bytes of packed codes (low nibble = even element)
//! ```
//!
//! Scale and zero point are kept as `f64` in memory and narrowed to `f32` in
//! the dump, so a dump round trip may move reconstructed values by the `f32`
//! rounding of those two parameters.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Vector;

pub const MAX_CODE: u8 = 15;
pub const DEFAULT_GROUP_SIZE: usize = 64;
const MAGIC: &[u8; 4] = b"BKVQ";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    /// One code per element, each in `0..=15`.
    pub codes: Vec<u8>,
    pub scale: f64,
    pub zero_point: f64,
    pub group_size: usize,
}

impl QuantizedBlock {
    /// Largest reconstruction error this block can produce.
    pub fn max_error(&self) -> f64 {
        self.scale / 2.0
    }
}

pub fn quantize_group(values: &[f64], g: usize) -> Result<Vec<QuantizedBlock>> {
    ensure!(g >= 1, "group size must be at least 1");
    ensure!(
        values.iter().all(|x| x.is_finite()),
        "cannot quantize non-finite values"
    );
    Ok(values
        .chunks(g)
        .map(|chunk| {
            let min = chunk.iter().copied().fold(f64::INFINITY, f64::min);
            let max = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let scale = (max - min) / MAX_CODE as f64;
            let codes = chunk
                .iter()
                .map(|&x| {
                    if scale == 0.0 {
                        0
                    } else {
                        ((x - min) / scale)
                            .round_ties_even()
                            .clamp(0.0, MAX_CODE as f64) as u8
                    }
                })
                .collect();
            QuantizedBlock {
                codes,
                scale,
                zero_point: min,
                group_size: g,
            }
        })
        .collect())
}

pub fn dequantize(blocks: &[QuantizedBlock]) -> Result<Vector> {
    let mut out = Vec::with_capacity(blocks.iter().map(|b| b.codes.len()).sum());
    for b in blocks {
        for &c in &b.codes {
            ensure!(c <= MAX_CODE, "code {c} exceeds {MAX_CODE}");
            out.push(b.zero_point + c as f64 * b.scale);
        }
    }
    Vector::new(out)
}

/// Storage cost of a quantized element in bytes: 4 bits of code plus the two
/// `f32` group parameters amortized over `g` elements.
pub fn bytes_per_element(g: usize) -> f64 {
    0.5 + 8.0 / g as f64
}

/// One cached token in quantized form.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEntry {
    pub position: usize,
    pub key: Vec<QuantizedBlock>,
    pub value: Vec<QuantizedBlock>,
}

pub fn write_dump<W: Write>(
    mut w: W,
    entries: &[QuantizedEntry],
    head_dim: usize,
    g: usize,
) -> Result<()> {
    w.write_all(MAGIC)?;
    for x in [VERSION, entries.len() as u32, head_dim as u32, g as u32] {
        w.write_all(&x.to_le_bytes())?;
    }
    for e in entries {
        w.write_all(&(e.position as u64).to_le_bytes())?;
        for block in e.key.iter().chain(&e.value) {
            w.write_all(&(block.scale as f32).to_le_bytes())?;
            w.write_all(&(block.zero_point as f32).to_le_bytes())?;
            w.write_all(&pack_nibbles(&block.codes))?;
        }
    }
    Ok(())
}

/// Parse a dump. Returns `(entries, head_dim, g)`.
pub fn read_dump<R: Read>(mut r: R) -> Result<(Vec<QuantizedEntry>, usize, usize)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            line: 0,
            message: "bad magic in quantized dump".into(),
        });
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Parse {
            line: 0,
            message: format!("unsupported dump version {version}"),
        });
    }
    let count = read_u32(&mut r)? as usize;
    let head_dim = read_u32(&mut r)? as usize;
    let g = read_u32(&mut r)? as usize;
    ensure!(g >= 1, "dump declares group size 0");
    let group_lens: Vec<usize> = (0..head_dim.div_ceil(g))
        .map(|i| g.min(head_dim - i * g))
        .collect();
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pos = [0u8; 8];
        r.read_exact(&mut pos)?;
        let read_vector = |r: &mut R| -> Result<Vec<QuantizedBlock>> {
            group_lens
                .iter()
                .map(|&len| {
                    let scale = read_f32(r)? as f64;
                    let zero_point = read_f32(r)? as f64;
                    let mut packed = vec![0u8; len.div_ceil(2)];
                    r.read_exact(&mut packed)?;
                    Ok(QuantizedBlock {
                        codes: unpack_nibbles(&packed, len),
                        scale,
                        zero_point,
                        group_size: g,
                    })
                })
                .collect()
        };
        let key = read_vector(&mut r)?;
        let value = read_vector(&mut r)?;
        entries.push(QuantizedEntry {
            position: u64::from_le_bytes(pos) as usize,
            key,
            value,
        });
    }
    Ok((entries, head_dim, g))
}

pub fn pack_nibbles(codes: &[u8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| (pair[0] & 0x0f) | (pair.get(1).copied().unwrap_or(0) << 4))
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Vec<u8> {
    packed
        .iter()
        .flat_map(|b| [b & 0x0f, b >> 4])
        .take(len)
        .collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32<R: Read>(r: &mut R) -> Result<f32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(f32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn round_trip(values: &[f64], g: usize) -> Vector {
        dequantize(&quantize_group(values, g).unwrap()).unwrap()
    }

    #[test]
    fn constant_group_is_exact() {
        let v = [0.37; 10];
        let blocks = quantize_group(&v, 64).unwrap();
        assert_eq!(blocks[0].scale, 0.0);
        assert!(blocks[0].codes.iter().all(|&c| c == 0));
        assert_eq!(round_trip(&v, 64).as_slice(), &v);
    }

    #[test]
    fn two_point_group_is_exact() {
        for (lo, hi) in [(-1.5, 3.0), (-1.0, 1.0), (0.25, 4.0)] {
            let v = [lo, hi, hi, lo];
            let blocks = quantize_group(&v, 4).unwrap();
            assert_eq!(blocks[0].codes, vec![0, 15, 15, 0]);
            assert_eq!(round_trip(&v, 4).as_slice(), &v);
        }
    }

    #[test]
    fn evenly_spaced_error_bound() {
        let v: Vec<f64> = (0..64).map(|i| -1.0 + 2.0 * i as f64 / 63.0).collect();
        let r = round_trip(&v, 64);
        let bound = 2.0 / 30.0 + 1e-12;
        for (a, b) in v.iter().zip(r.iter()) {
            assert!((a - b).abs() <= bound, "{a} -> {b}");
        }
    }

    #[test]
    fn dequantize_affine() {
        let b = QuantizedBlock {
            codes: vec![0, 15],
            scale: 0.1,
            zero_point: 0.0,
            group_size: 2,
        };
        let v = dequantize(&[b]).unwrap();
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn dequantize_rejects_wide_code() {
        let b = QuantizedBlock {
            codes: vec![16],
            scale: 1.0,
            zero_point: 0.0,
            group_size: 1,
        };
        assert!(matches!(dequantize(&[b]), Err(Error::Contract(_))));
    }

    #[test]
    fn empty_and_bad_group() {
        assert!(quantize_group(&[], 4).unwrap().is_empty());
        assert!(quantize_group(&[1.0], 0).is_err());
    }

    #[test]
    fn ties_round_to_even() {
        // Codes land exactly on .5 boundaries: 0.5 -> 0, 1.5 -> 2, 2.5 -> 2.
        let v = [0.0, 0.5, 1.5, 2.5, 15.0];
        let blocks = quantize_group(&v, 5).unwrap();
        assert_eq!(blocks[0].scale, 1.0);
        assert_eq!(blocks[0].codes, vec![0, 0, 2, 2, 15]);
    }

    #[test]
    fn seeded_vector_within_half_step() {
        let mut rng = Rng::new(42);
        let v = rng.gaussian_vector(200, 1.0);
        let blocks = quantize_group(&v, 16).unwrap();
        let r = dequantize(&blocks).unwrap();
        for (i, (a, b)) in v.iter().zip(r.iter()).enumerate() {
            let step = blocks[i / 16].scale;
            assert!((a - b).abs() <= step / 2.0 + 1e-12);
        }
    }

    #[test]
    fn nibble_packing() {
        let codes = vec![1, 2, 3, 15, 7];
        let packed = pack_nibbles(&codes);
        assert_eq!(packed, vec![0x21, 0xf3, 0x07]);
        assert_eq!(unpack_nibbles(&packed, 5), codes);
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = Rng::new(3);
        let entries: Vec<QuantizedEntry> = (0..3)
            .map(|p| QuantizedEntry {
                position: p * 7,
                key: quantize_group(&rng.gaussian_vector(10, 1.0), 4).unwrap(),
                value: quantize_group(&rng.gaussian_vector(10, 1.0), 4).unwrap(),
            })
            .collect();
        let mut buf = Vec::new();
        write_dump(&mut buf, &entries, 10, 4).unwrap();
        assert_eq!(&buf[..4], b"BKVQ");
        let (back, d, g) = read_dump(buf.as_slice()).unwrap();
        assert_eq!((d, g), (10, 4));
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.position, b.position);
            for (x, y) in a.key.iter().zip(&b.key) {
                assert_eq!(x.codes, y.codes);
                assert_eq!(x.scale as f32 as f64, y.scale);
            }
        }
        assert!(read_dump(&b"NOPE"[..]).is_err());
    }

    proptest! {
        #[test]
        fn error_within_half_step(values in prop::collection::vec(-1e3f64..1e3, 1..200), g in 1usize..80) {
            let blocks = quantize_group(&values, g).unwrap();
            let r = dequantize(&blocks).unwrap();
            prop_assert_eq!(r.len(), values.len());
            for (i, (a, b)) in values.iter().zip(r.iter()).enumerate() {
                let blk = &blocks[i / g];
                prop_assert!(blk.codes.iter().all(|&c| c <= MAX_CODE));
                prop_assert!((a - b).abs() <= blk.scale / 2.0 + 1e-12 * (1.0 + a.abs()));
            }
        }

        #[test]
        fn requantize_is_fixed_point(values in prop::collection::vec(-10f64..10.0, 1..100), g in 1usize..40) {
            let first = quantize_group(&values, g).unwrap();
            let second = quantize_group(&dequantize(&first).unwrap(), g).unwrap();
            for (a, b) in first.iter().zip(&second) {
                prop_assert_eq!(&a.codes, &b.codes);
            }
        }
    }
}
