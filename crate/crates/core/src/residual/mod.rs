//! Block-DCT codec for rendering residuals.
//!
//! Each channel is padded by edge replication to a multiple of 8, split
//! into 8x8 blocks, transformed with an orthonormal DCT-II and quantized
//! with a frequency-dependent step. Coefficients are written
//! frequency-major (coefficient 0 of every block, then coefficient 1, ...)
//! and range coded with one adaptive model per channel.

use std::path::Path;

use crate::compress::{entropy_decode, entropy_encode, framed_len};
use crate::error::{Error, Result};
use crate::scene::SignedImage;

const MAGIC: &[u8; 4] = b"GSRS";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 1;

pub const MIN_QUALITY: u8 = 1;
pub const MAX_QUALITY: u8 = 10;
/// Default quality of the low-rate variant.
pub const QUALITY_LOW: u8 = 3;
/// Default quality of the high-rate variant.
pub const QUALITY_HIGH: u8 = 6;

pub type Block = [[f64; 8]; 8];

fn dct_matrix() -> &'static Block {
    static M: std::sync::OnceLock<Block> = std::sync::OnceLock::new();
    M.get_or_init(|| {
        let mut m = [[0.0; 8]; 8];
        for (k, row) in m.iter_mut().enumerate() {
            let a = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (n, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI / 16.0).cos();
            }
        }
        m
    })
}

/// Orthonormal 2-D DCT-II of an 8x8 block; `out[u][v]` is vertical frequency `u`.
pub fn dct8_forward(block: &Block) -> Block {
    let c = dct_matrix();
    let mut tmp = [[0.0; 8]; 8];
    for u in 0..8 {
        for x in 0..8 {
            tmp[u][x] = (0..8).map(|y| c[u][y] * block[y][x]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for u in 0..8 {
        for v in 0..8 {
            out[u][v] = (0..8).map(|x| tmp[u][x] * c[v][x]).sum();
        }
    }
    out
}

/// Inverse of [`dct8_forward`].
pub fn dct8_inverse(coeffs: &Block) -> Block {
    let c = dct_matrix();
    let mut tmp = [[0.0; 8]; 8];
    for y in 0..8 {
        for v in 0..8 {
            tmp[y][v] = (0..8).map(|u| c[u][y] * coeffs[u][v]).sum();
        }
    }
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            out[y][x] = (0..8).map(|v| tmp[y][v] * c[v][x]).sum();
        }
    }
    out
}

fn check_quality(q: u8) -> Result<()> {
    if !(MIN_QUALITY..=MAX_QUALITY).contains(&q) {
        return Err(Error::invalid(format!(
            "residual quality must be in {MIN_QUALITY}..={MAX_QUALITY}, got {q}"
        )));
    }
    Ok(())
}

/// Quantization step table for quality `q`: `base(u, v) * 2^((5 - q) / 2)` with
/// `base = 0.02 + 0.10 (u + v) / 14`.
pub fn quality_to_qstep(q: u8) -> Result<Block> {
    check_quality(q)?;
    let scale = 2f64.powf((5.0 - q as f64) / 2.0);
    let mut t = [[0.0; 8]; 8];
    for (u, row) in t.iter_mut().enumerate() {
        for (v, s) in row.iter_mut().enumerate() {
            *s = (0.02 + 0.10 * (u + v) as f64 / 14.0) * scale;
        }
    }
    Ok(t)
}

/// Codec settings; the block size is fixed at 8.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ResidualCodecConfig {
    pub quality: u8,
}

impl Default for ResidualCodecConfig {
    fn default() -> Self {
        ResidualCodecConfig { quality: QUALITY_HIGH }
    }
}

impl ResidualCodecConfig {
    pub fn new(quality: u8) -> Result<Self> {
        check_quality(quality)?;
        Ok(ResidualCodecConfig { quality })
    }
}

/// A coded residual image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualBitstream {
    width: usize,
    height: usize,
    quality: u8,
    /// Per channel: `u32 alphabet size` followed by one framed stream.
    planes: [Vec<u8>; 3],
}

impl ResidualBitstream {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn quality(&self) -> u8 {
        self.quality
    }

    pub fn total_bytes(&self) -> usize {
        HEADER_LEN + self.planes.iter().map(Vec::len).sum::<usize>()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.push(self.quality);
        for p in &self.planes {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("truncated residual header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("not a GSRS residual stream (bad magic)"));
        }
        if bytes[4] != VERSION {
            return Err(Error::format(format!("unsupported GSRS version {}", bytes[4])));
        }
        let width = u16::from_le_bytes([bytes[5], bytes[6]]) as usize;
        let height = u16::from_le_bytes([bytes[7], bytes[8]]) as usize;
        let quality = bytes[9];
        if width == 0 || height == 0 {
            return Err(Error::format(format!("bad residual dimensions {width}x{height}")));
        }
        check_quality(quality).map_err(|e| Error::format(e.to_string()))?;
        let mut pos = HEADER_LEN;
        let mut planes: [Vec<u8>; 3] = Default::default();
        for (c, plane) in planes.iter_mut().enumerate() {
            let rest = &bytes[pos..];
            if rest.len() < 4 {
                return Err(Error::format(format!("truncated residual plane {c}")));
            }
            let len = 4 + framed_len(&rest[4..])?;
            *plane = rest[..len].to_vec();
            pos += len;
        }
        if pos != bytes.len() {
            return Err(Error::format(format!("{} trailing bytes in residual stream", bytes.len() - pos)));
        }
        Ok(ResidualBitstream {
            width,
            height,
            quality,
            planes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
    }
}

fn zigzag(i: i64) -> u32 {
    ((i << 1) ^ (i >> 63)) as u32
}

fn unzigzag(s: u32) -> i64 {
    ((s >> 1) as i64) ^ -((s & 1) as i64)
}

fn padded(n: usize) -> usize {
    n.div_ceil(8) * 8
}

/// Codes `residual` at quality `q`.
pub fn encode_residual(residual: &SignedImage, q: u8) -> Result<ResidualBitstream> {
    check_quality(q)?;
    let (w, h) = residual.dims();
    if w == 0 || h == 0 || w > u16::MAX as usize || h > u16::MAX as usize {
        return Err(Error::invalid(format!("residual dimensions {w}x{h} unsupported")));
    }
    let steps = quality_to_qstep(q)?;
    let (pw, ph) = (padded(w), padded(h));
    let (bw, bh) = (pw / 8, ph / 8);
    let data = residual.data();
    let mut planes: [Vec<u8>; 3] = Default::default();
    for (c, plane) in planes.iter_mut().enumerate() {
        let nblocks = bw * bh;
        let mut symbols = vec![0u32; 64 * nblocks];
        for by in 0..bh {
            for bx in 0..bw {
                let mut block = [[0.0; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    let sy = (by * 8 + y).min(h - 1);
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = (bx * 8 + x).min(w - 1);
                        *v = data[(sy * w + sx) * 3 + c].clamp(-1.0, 1.0);
                    }
                }
                let coeffs = dct8_forward(&block);
                let b = by * bw + bx;
                for u in 0..8 {
                    for v in 0..8 {
                        let idx = (coeffs[u][v] / steps[u][v]).round() as i64;
                        symbols[(u * 8 + v) * nblocks + b] = zigzag(idx);
                    }
                }
            }
        }
        let alphabet = symbols.iter().max().map_or(1, |m| *m as usize + 1);
        plane.extend_from_slice(&(alphabet as u32).to_le_bytes());
        plane.extend(entropy_encode(&symbols, alphabet)?);
    }
    Ok(ResidualBitstream {
        width: w,
        height: h,
        quality: q,
        planes,
    })
}

/// Decodes a residual, cropping the padding and clamping to `[-1, 1]`.
pub fn decode_residual(bs: &ResidualBitstream) -> Result<SignedImage> {
    let (w, h) = (bs.width, bs.height);
    let steps = quality_to_qstep(bs.quality)?;
    let (bw, bh) = (padded(w) / 8, padded(h) / 8);
    let nblocks = bw * bh;
    let mut data = vec![0.0; w * h * 3];
    for (c, plane) in bs.planes.iter().enumerate() {
        if plane.len() < 4 {
            return Err(Error::format(format!("residual plane {c} is truncated")));
        }
        let alphabet = u32::from_le_bytes(plane[..4].try_into().unwrap()) as usize;
        if alphabet == 0 || alphabet > crate::compress::MAX_ALPHABET {
            return Err(Error::format(format!("residual plane {c} has alphabet {alphabet}")));
        }
        let symbols = entropy_decode(&plane[4..], 64 * nblocks, alphabet)
            .map_err(|e| e.context(format!("residual plane {c}")))?;
        for by in 0..bh {
            for bx in 0..bw {
                let b = by * bw + bx;
                let mut coeffs = [[0.0; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        coeffs[u][v] = unzigzag(symbols[(u * 8 + v) * nblocks + b]) as f64 * steps[u][v];
                    }
                }
                let block = dct8_inverse(&coeffs);
                for (y, row) in block.iter().enumerate() {
                    let sy = by * 8 + y;
                    if sy >= h {
                        break;
                    }
                    for (x, v) in row.iter().enumerate() {
                        let sx = bx * 8 + x;
                        if sx >= w {
                            break;
                        }
                        data[(sy * w + sx) * 3 + c] = v.clamp(-1.0, 1.0);
                    }
                }
            }
        }
    }
    SignedImage::new(w, h, data)
}

/// Decoded version of `residual` after coding at quality `q`.
pub fn requantize(residual: &SignedImage, q: u8) -> Result<SignedImage> {
    decode_residual(&encode_residual(residual, q)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_round_trips() {
        for i in [-5i64, -1, 0, 1, 7, -70000, 70000] {
            assert_eq!(unzigzag(zigzag(i)), i);
        }
        assert_eq!(zigzag(0), 0);
        assert_eq!(zigzag(-1), 1);
        assert_eq!(zigzag(1), 2);
    }

    #[test]
    fn step_table_shape() {
        let t = quality_to_qstep(5).unwrap();
        assert!((t[0][0] - 0.02).abs() < 1e-15);
        assert!((t[7][7] - 0.12).abs() < 1e-15);
        let t7 = quality_to_qstep(7).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                assert!((t7[u][v] - t[u][v] / 2.0).abs() < 1e-15);
            }
        }
        assert!(quality_to_qstep(0).is_err());
        assert!(quality_to_qstep(11).is_err());
    }

    #[test]
    fn header_errors() {
        let r = SignedImage::zeros(9, 5);
        let bytes = encode_residual(&r, 4).unwrap().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'J';
        assert!(matches!(ResidualBitstream::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[9] = 0;
        assert!(matches!(ResidualBitstream::from_bytes(&bad), Err(Error::Format(_))));
        assert!(ResidualBitstream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
