//! The `GSCC` container: per-attribute scalar quantization, SH vector
//! quantization and range-coded index streams.
//!
//! Layout (little-endian):
//!
//! ```text
//! "GSCC" u8 version
//! header: u32 n, u8 sh_degree, config, bbox (6 x f64), grids (2 x f64 each), u32 crc
//! codebook: u32 entries, u32 dim, entries x dim f32, u32 crc
//! streams: one [u32 len | payload | u32 crc] frame per attribute component
//! ```
//!
//! Rotations are quantized after dividing by their largest-magnitude
//! component, which makes the dominant component land exactly on a grid
//! endpoint. Decoding renormalises, and re-encoding a decoded cloud with the
//! same grids reproduces the same indices.

use rayon::prelude::*;

use super::entropy::{entropy_decode, entropy_encode, framed_len};
use super::kmeans::{fit_codebook, Codebook};
use super::quant::Grid;
use crate::error::{Error, Result};
use crate::scene::{canonical_quaternion, Aabb, Gaussian, GaussianCloud};

const MAGIC: &[u8; 4] = b"GSCC";
const VERSION: u8 = 1;
const OPACITY_EPS: f64 = 1e-4;

/// Rate knobs of the compressor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub pos_bits: u8,
    /// Bits for log-scale, rotation and logit-opacity components.
    pub scalar_bits: u8,
    pub dc_bits: u8,
    pub codebook_size: u32,
    pub kmeans_iters: u32,
    pub kmeans_seed: u64,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        CompressionConfig {
            pos_bits: 16,
            scalar_bits: 8,
            dc_bits: 8,
            codebook_size: 1024,
            kmeans_iters: 20,
            kmeans_seed: 0,
        }
    }
}

impl CompressionConfig {
    /// Near-lossless settings: 16 bits everywhere and one codebook entry per Gaussian.
    pub fn lossless_for(n: usize) -> Self {
        CompressionConfig {
            pos_bits: 16,
            scalar_bits: 16,
            dc_bits: 16,
            codebook_size: (n.max(1) as u32).next_power_of_two().min(1 << 16),
            ..Default::default()
        }
    }

    /// Alternative allocation with coarser scalars and a smaller codebook.
    pub fn alternate() -> Self {
        CompressionConfig {
            pos_bits: 12,
            scalar_bits: 6,
            dc_bits: 6,
            codebook_size: 256,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, bits) in [
            ("pos_bits", self.pos_bits),
            ("scalar_bits", self.scalar_bits),
            ("dc_bits", self.dc_bits),
        ] {
            if !(1..=16).contains(&bits) {
                return Err(Error::invalid(format!("{name} must be in 1..=16, got {bits}")));
            }
        }
        let k = self.codebook_size;
        if k == 0 || !k.is_power_of_two() || k > 1 << 16 {
            return Err(Error::invalid(format!(
                "codebook_size must be a power of two <= 65536, got {k}"
            )));
        }
        Ok(())
    }
}

/// Quantization ranges for every scalar attribute component.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantGrids {
    pub position: [Grid; 3],
    pub scale: [Grid; 3],
    pub rotation: [Grid; 4],
    pub opacity: Grid,
    pub dc: [Grid; 3],
}

impl QuantGrids {
    /// Grids spanning the attributes of `cloud`.
    pub fn fit(cloud: &GaussianCloud) -> QuantGrids {
        let gs = cloud.gaussians();
        QuantGrids {
            position: [0, 1, 2].map(|k| Grid::spanning(gs.iter().map(|g| g.position[k]))),
            scale: [0, 1, 2].map(|k| Grid::spanning(gs.iter().map(|g| g.scale[k].ln()))),
            rotation: [0, 1, 2, 3]
                .map(|k| Grid::spanning(gs.iter().map(|g| max_normalized(g.rotation)[k]))),
            opacity: Grid::spanning(gs.iter().map(|g| opacity_logit(g.opacity))),
            dc: [0, 1, 2].map(|c| Grid::spanning(gs.iter().map(|g| g.sh[c]))),
        }
    }

    fn all(&self) -> Vec<Grid> {
        let mut v = Vec::with_capacity(14);
        v.extend(self.position);
        v.extend(self.scale);
        v.extend(self.rotation);
        v.push(self.opacity);
        v.extend(self.dc);
        v
    }

    fn from_all(v: &[Grid]) -> QuantGrids {
        QuantGrids {
            position: [v[0], v[1], v[2]],
            scale: [v[3], v[4], v[5]],
            rotation: [v[6], v[7], v[8], v[9]],
            opacity: v[10],
            dc: [v[11], v[12], v[13]],
        }
    }
}

const GRID_COUNT: usize = 14;
const SCALAR_STREAMS: usize = 14;

fn opacity_logit(o: f64) -> f64 {
    let o = o.clamp(OPACITY_EPS, 1.0 - OPACITY_EPS);
    (o / (1.0 - o)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Canonical quaternion divided by its largest-magnitude component's absolute value.
fn max_normalized(q: [f64; 4]) -> [f64; 4] {
    let q = canonical_quaternion(q);
    let m = q.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    q.map(|v| v / m)
}

/// A compressed Gaussian cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedCloud {
    count: usize,
    sh_degree: usize,
    config: CompressionConfig,
    bbox: Aabb,
    grids: QuantGrids,
    codebook: Option<Codebook>,
    /// Framed entropy-coded streams in container order.
    streams: Vec<Vec<u8>>,
}

impl CompressedCloud {
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn config(&self) -> &CompressionConfig {
        &self.config
    }

    pub fn grids(&self) -> &QuantGrids {
        &self.grids
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    fn header_len(&self) -> usize {
        4 + 1 + 4 + 1 + (3 + 4 + 4) + 8 + 6 * 8 + GRID_COUNT * 16 + 4
    }

    fn codebook_len(&self) -> usize {
        8 + self.codebook.as_ref().map_or(0, |c| c.entries().len() * 4) + 4
    }

    /// Serialized size in bytes.
    pub fn total_bytes(&self) -> usize {
        self.header_len() + self.codebook_len() + self.streams.iter().map(Vec::len).sum::<usize>()
    }

    /// Bytes spent on each stream, in container order, plus header and codebook.
    pub fn stream_sizes(&self) -> Vec<(&'static str, usize)> {
        let mut out = vec![("header", self.header_len()), ("codebook", self.codebook_len())];
        for (name, s) in STREAM_NAMES.iter().zip(&self.streams) {
            out.push((name, s.len()));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.push(self.sh_degree as u8);
        let c = &self.config;
        out.extend_from_slice(&[c.pos_bits, c.scalar_bits, c.dc_bits]);
        out.extend_from_slice(&c.codebook_size.to_le_bytes());
        out.extend_from_slice(&c.kmeans_iters.to_le_bytes());
        out.extend_from_slice(&c.kmeans_seed.to_le_bytes());
        for v in self.bbox.min.iter().chain(&self.bbox.max) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for g in self.grids.all() {
            out.extend_from_slice(&g.lo.to_le_bytes());
            out.extend_from_slice(&g.hi.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[5..]);
        out.extend_from_slice(&crc.to_le_bytes());

        let start = out.len();
        let (entries, dim) = self
            .codebook
            .as_ref()
            .map_or((0, 0), |c| (c.len() as u32, c.dim() as u32));
        out.extend_from_slice(&entries.to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        if let Some(cb) = &self.codebook {
            for v in cb.entries() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());

        for s in &self.streams {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("not a GSCC container (bad magic)"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported GSCC version {version}")));
        }
        let count = r.u32()? as usize;
        let sh_degree = r.u8()? as usize;
        let config = CompressionConfig {
            pos_bits: r.u8()?,
            scalar_bits: r.u8()?,
            dc_bits: r.u8()?,
            codebook_size: r.u32()?,
            kmeans_iters: r.u32()?,
            kmeans_seed: r.u64()?,
        };
        let mut bbox = Aabb {
            min: [0.0; 3],
            max: [0.0; 3],
        };
        for k in 0..3 {
            bbox.min[k] = r.f64()?;
        }
        for k in 0..3 {
            bbox.max[k] = r.f64()?;
        }
        let mut grids = Vec::with_capacity(GRID_COUNT);
        for _ in 0..GRID_COUNT {
            grids.push(Grid {
                lo: r.f64()?,
                hi: r.f64()?,
            });
        }
        let header_end = r.pos;
        if crc32fast::hash(&bytes[5..header_end]) != r.u32()? {
            return Err(Error::format("header checksum mismatch"));
        }
        config
            .validate()
            .map_err(|e| Error::format(format!("bad config in header: {e}")))?;
        if sh_degree > crate::scene::MAX_SH_DEGREE {
            return Err(Error::format(format!("bad sh degree {sh_degree}")));
        }
        if grids.iter().any(|g| !(g.lo < g.hi) || !g.lo.is_finite() || !g.hi.is_finite()) {
            return Err(Error::format("degenerate quantization grid in header"));
        }
        let grids = QuantGrids::from_all(&grids);

        let cb_start = r.pos;
        let entries = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let values = entries
            .checked_mul(dim)
            .filter(|v| *v <= bytes.len())
            .ok_or_else(|| Error::format("codebook size overflow"))?;
        let mut cb = Vec::with_capacity(values);
        for _ in 0..values {
            cb.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64);
        }
        let cb_end = r.pos;
        if crc32fast::hash(&bytes[cb_start..cb_end]) != r.u32()? {
            return Err(Error::format("codebook checksum mismatch"));
        }
        let expected_dim = 3 * (crate::scene::sh_basis_count(sh_degree) - 1);
        let codebook = if sh_degree == 0 {
            if entries != 0 {
                return Err(Error::format("codebook present for sh degree 0"));
            }
            None
        } else {
            if dim != expected_dim || entries == 0 || entries > config.codebook_size as usize {
                return Err(Error::format(format!(
                    "codebook of {entries} x {dim} does not fit degree {sh_degree}"
                )));
            }
            Some(Codebook::new(dim, cb).map_err(|e| Error::format(e.to_string()))?)
        };

        let n_streams = SCALAR_STREAMS + usize::from(sh_degree > 0);
        let mut streams = Vec::with_capacity(n_streams);
        for i in 0..n_streams {
            let len = framed_len(&bytes[r.pos..])
                .map_err(|e| Error::format(format!("stream {}: {e}", STREAM_NAMES[i])))?;
            streams.push(r.take(len)?.to_vec());
        }
        if r.pos != bytes.len() {
            return Err(Error::format(format!(
                "{} trailing bytes after last stream",
                bytes.len() - r.pos
            )));
        }
        Ok(CompressedCloud {
            count,
            sh_degree,
            config,
            bbox,
            grids,
            codebook,
            streams,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
    }
}

const STREAM_NAMES: [&str; SCALAR_STREAMS + 1] = [
    "position.x",
    "position.y",
    "position.z",
    "scale.0",
    "scale.1",
    "scale.2",
    "rotation.w",
    "rotation.x",
    "rotation.y",
    "rotation.z",
    "opacity",
    "dc.r",
    "dc.g",
    "dc.b",
    "sh_index",
];

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("truncated GSCC container"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Higher-order SH coefficients of every Gaussian, row-major.
fn sh_rest(cloud: &GaussianCloud) -> Vec<f64> {
    cloud
        .gaussians()
        .iter()
        .flat_map(|g| g.sh[3..].iter().copied())
        .collect()
}

/// Fits grids and a codebook to `cloud`, then compresses it.
pub fn compress_cloud(cloud: &GaussianCloud, config: &CompressionConfig) -> Result<CompressedCloud> {
    config.validate()?;
    check_cloud(cloud)?;
    let grids = QuantGrids::fit(cloud);
    let codebook = if cloud.sh_degree() > 0 {
        let dim = cloud.sh_len() - 3;
        let book = fit_codebook(
            &sh_rest(cloud),
            dim,
            config.codebook_size as usize,
            config.kmeans_iters as usize,
            config.kmeans_seed,
        )?;
        Some(book.rounded_to_f32())
    } else {
        None
    };
    compress_with(cloud, config, &grids, codebook.as_ref())
}

fn check_cloud(cloud: &GaussianCloud) -> Result<()> {
    if cloud.is_empty() {
        return Err(Error::invalid("cannot compress an empty cloud"));
    }
    if let Some(v) = crate::scene::validate_cloud(cloud).first() {
        return Err(Error::invalid(format!("invalid cloud: {v}")));
    }
    Ok(())
}

/// Compresses `cloud` against fixed grids and codebook.
///
/// Values outside a grid are clamped. The codebook is used as stored, after
/// rounding to `f32`.
pub fn compress_with(
    cloud: &GaussianCloud,
    config: &CompressionConfig,
    grids: &QuantGrids,
    codebook: Option<&Codebook>,
) -> Result<CompressedCloud> {
    config.validate()?;
    check_cloud(cloud)?;
    let gs = cloud.gaussians();
    let codebook = match (cloud.sh_degree(), codebook) {
        (0, _) => None,
        (_, Some(cb)) if cb.dim() == cloud.sh_len() - 3 && cb.len() <= config.codebook_size as usize => {
            Some(cb.rounded_to_f32())
        }
        (_, Some(cb)) => {
            return Err(Error::invalid(format!(
                "codebook of {} x {} does not fit this cloud and config",
                cb.len(),
                cb.dim()
            )))
        }
        (_, None) => return Err(Error::invalid("a codebook is required for sh degree > 0")),
    };

    let column = |grid: &Grid, bits: u8, f: &(dyn Fn(&Gaussian) -> f64 + Sync)| -> Result<Vec<u8>> {
        let idx = gs
            .iter()
            .map(|g| grid.quantize(f(g), bits))
            .collect::<Result<Vec<u32>>>()?;
        entropy_encode(&idx, 1usize << bits)
    };
    let c = config;
    let mut streams = Vec::with_capacity(SCALAR_STREAMS + 1);
    for k in 0..3 {
        streams.push(column(&grids.position[k], c.pos_bits, &|g| g.position[k])?);
    }
    for k in 0..3 {
        streams.push(column(&grids.scale[k], c.scalar_bits, &|g| g.scale[k].ln())?);
    }
    for k in 0..4 {
        streams.push(column(&grids.rotation[k], c.scalar_bits, &|g| {
            max_normalized(g.rotation)[k]
        })?);
    }
    streams.push(column(&grids.opacity, c.scalar_bits, &|g| opacity_logit(g.opacity))?);
    for k in 0..3 {
        streams.push(column(&grids.dc[k], c.dc_bits, &|g| g.sh[k])?);
    }
    if let Some(cb) = &codebook {
        let dim = cb.dim();
        let rest = sh_rest(cloud);
        let idx: Vec<u32> = rest
            .par_chunks(dim * 64)
            .flat_map_iter(|chunk| cb.assign(chunk))
            .collect();
        streams.push(entropy_encode(&idx, cb.len())?);
    }
    let bbox = Aabb {
        min: [0, 1, 2].map(|k| grids.position[k].lo),
        max: [0, 1, 2].map(|k| grids.position[k].hi),
    };
    Ok(CompressedCloud {
        count: gs.len(),
        sh_degree: cloud.sh_degree(),
        config: *config,
        bbox,
        grids: *grids,
        codebook,
        streams,
    })
}

/// Reconstructs the lattice-point cloud.
pub fn decompress_cloud(cc: &CompressedCloud) -> Result<GaussianCloud> {
    let n = cc.count;
    let c = &cc.config;
    let g = &cc.grids;
    let mut streams = cc.streams.iter();
    let mut column = |grid: &Grid, bits: u8| -> Result<Vec<f64>> {
        let s = streams.next().ok_or_else(|| Error::format("missing stream"))?;
        let idx = entropy_decode(s, n, 1usize << bits)?;
        idx.into_iter().map(|i| grid.dequantize(i, bits)).collect()
    };
    let pos: Vec<Vec<f64>> = (0..3).map(|k| column(&g.position[k], c.pos_bits)).collect::<Result<_>>()?;
    let scale: Vec<Vec<f64>> = (0..3).map(|k| column(&g.scale[k], c.scalar_bits)).collect::<Result<_>>()?;
    let rot: Vec<Vec<f64>> = (0..4).map(|k| column(&g.rotation[k], c.scalar_bits)).collect::<Result<_>>()?;
    let opacity = column(&g.opacity, c.scalar_bits)?;
    let dc: Vec<Vec<f64>> = (0..3).map(|k| column(&g.dc[k], c.dc_bits)).collect::<Result<_>>()?;
    let sh_index = match &cc.codebook {
        Some(cb) => {
            let s = streams.next().ok_or_else(|| Error::format("missing sh index stream"))?;
            Some(entropy_decode(s, n, cb.len())?)
        }
        None => None,
    };
    let sh_len = 3 * crate::scene::sh_basis_count(cc.sh_degree);
    let gaussians = (0..n)
        .map(|i| {
            let mut sh = Vec::with_capacity(sh_len);
            sh.extend([dc[0][i], dc[1][i], dc[2][i]]);
            if let (Some(cb), Some(idx)) = (&cc.codebook, &sh_index) {
                sh.extend_from_slice(cb.entry(idx[i] as usize));
            }
            Gaussian {
                position: [pos[0][i], pos[1][i], pos[2][i]],
                scale: [scale[0][i].exp(), scale[1][i].exp(), scale[2][i].exp()],
                rotation: canonical_quaternion([rot[0][i], rot[1][i], rot[2][i], rot[3][i]]),
                opacity: sigmoid(opacity[i]),
                sh,
            }
        })
        .collect();
    GaussianCloud::new(gaussians, cc.sh_degree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{synth_cloud, validate_cloud};

    #[test]
    fn config_validation() {
        assert!(CompressionConfig::default().validate().is_ok());
        let bad = [
            CompressionConfig { pos_bits: 0, ..Default::default() },
            CompressionConfig { dc_bits: 17, ..Default::default() },
            CompressionConfig { codebook_size: 1000, ..Default::default() },
            CompressionConfig { codebook_size: 1 << 17, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn max_normalized_has_unit_dominant_component() {
        let v = max_normalized([0.1, -0.9, 0.3, 0.2]);
        assert_eq!(v[1], -1.0);
        assert!(v[0] > 0.0);
    }

    #[test]
    fn total_bytes_matches_serialization() {
        for degree in 0..=3 {
            let cloud = synth_cloud(2, 300, 1.0, degree).unwrap();
            let cc = compress_cloud(&cloud, &CompressionConfig::default()).unwrap();
            let bytes = cc.to_bytes();
            assert_eq!(bytes.len(), cc.total_bytes());
            let back = CompressedCloud::from_bytes(&bytes).unwrap();
            assert_eq!(back, cc);
            let sizes: usize = cc.stream_sizes().iter().map(|s| s.1).sum();
            assert_eq!(sizes, cc.total_bytes());
        }
    }

    #[test]
    fn decompressed_cloud_is_valid() {
        let cloud = synth_cloud(9, 400, 2.0, 3).unwrap();
        let cc = compress_cloud(&cloud, &CompressionConfig::alternate()).unwrap();
        let out = decompress_cloud(&cc).unwrap();
        assert_eq!(out.len(), cloud.len());
        assert!(validate_cloud(&out).is_empty());
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let e = compress_cloud(&GaussianCloud::empty(1), &CompressionConfig::default());
        assert!(matches!(e, Err(Error::InvalidArgument(_))));
    }
}
