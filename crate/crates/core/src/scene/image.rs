use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use crate::error::{Error, Result};

/// RGB image with row-major interleaved values clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

/// RGB image of signed values clamped to `[-1, 1]`, e.g. a rendering residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

fn check_len(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image dimensions must be at least 1x1"));
    }
    if len != width * height * 3 {
        return Err(Error::invalid(format!(
            "image buffer has {len} values, expected {}",
            width * height * 3
        )));
    }
    Ok(())
}

fn clamp(v: f64, lo: f64, hi: f64) -> f64 {
    // NaN maps to the lower bound so that the range invariant always holds.
    if v.is_nan() {
        lo
    } else {
        v.clamp(lo, hi)
    }
}

macro_rules! image_common {
    ($ty:ident, $lo:expr, $hi:expr) => {
        impl $ty {
            /// Builds an image, clamping every value into range.
            pub fn new(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
                check_len(width, height, data.len())?;
                for v in &mut data {
                    *v = clamp(*v, $lo, $hi);
                }
                Ok($ty { width, height, data })
            }

            pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
                let rgb = rgb.map(|v| clamp(v, $lo, $hi));
                let data = (0..width * height).flat_map(|_| rgb).collect();
                $ty { width, height, data }
            }

            pub fn zeros(width: usize, height: usize) -> Self {
                Self::filled(width, height, [0.0; 3])
            }

            pub fn width(&self) -> usize {
                self.width
            }

            pub fn height(&self) -> usize {
                self.height
            }

            pub fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }

            pub fn data(&self) -> &[f64] {
                &self.data
            }

            pub fn into_data(self) -> Vec<f64> {
                self.data
            }

            pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
                let i = (y * self.width + x) * 3;
                [self.data[i], self.data[i + 1], self.data[i + 2]]
            }

            /// Copies the `w x h` window whose top-left corner is `(x0, y0)`.
            pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
                if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
                    return Err(Error::invalid(format!(
                        "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                        self.width, self.height
                    )));
                }
                let mut data = Vec::with_capacity(w * h * 3);
                for y in y0..y0 + h {
                    let start = (y * self.width + x0) * 3;
                    data.extend_from_slice(&self.data[start..start + w * 3]);
                }
                Ok($ty { width: w, height: h, data })
            }

            pub fn ensure_same_dims(&self, w: usize, h: usize) -> Result<()> {
                if (self.width, self.height) != (w, h) {
                    return Err(Error::invalid(format!(
                        "dimension mismatch: {}x{} vs {w}x{h}",
                        self.width, self.height
                    )));
                }
                Ok(())
            }
        }
    };
}

image_common!(Image, 0.0, 1.0);
image_common!(SignedImage, -1.0, 1.0);

impl Image {
    /// `self - other`, the residual between two images.
    pub fn residual(&self, other: &Image) -> Result<SignedImage> {
        other.ensure_same_dims(self.width, self.height)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        SignedImage::new(self.width, self.height, data)
    }

    /// `clamp(self + residual, 0, 1)`.
    pub fn add_residual(&self, residual: &SignedImage) -> Result<Image> {
        residual.ensure_same_dims(self.width, self.height)?;
        let data = self.data.iter().zip(residual.data()).map(|(a, r)| a + r).collect();
        Image::new(self.width, self.height, data)
    }

    /// Values snapped to the nearest of 256 levels, as stored by [`save_image`].
    pub fn quantized_8bit(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_u8(v) as f64 / 255.0).collect(),
        }
    }
}

impl SignedImage {
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn to_u8(v: f64) -> u8 {
    (clamp(v, 0.0, 1.0) * 255.0).round() as u8
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("ppm")
    )
}

/// Writes an 8-bit RGB PNG, or binary PPM when the extension is `.ppm`.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|&v| to_u8(v)).collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    if is_ppm(path) {
        use std::io::Write;
        write!(out, "P6\n{} {}\n255\n", image.width, image.height)
            .and_then(|_| out.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
        return out.flush().map_err(|e| Error::io(path, e));
    }
    let mut encoder = png::Encoder::new(out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Reads an 8-bit PNG (RGB, RGBA or grey) or a binary/ASCII PPM.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    if is_ppm(path) {
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        return parse_ppm(&buf).map_err(|e| e.context(path.display().to_string()));
    }
    let fmt_err = |e: png::DecodingError| Error::format(format!("{}: {e}", path.display()));
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(fmt_err)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fmt_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let px = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => {
            return Err(Error::format(format!(
                "{}: unsupported png colour type {other:?}",
                path.display()
            )))
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for p in px.chunks_exact(channels) {
        if channels >= 3 {
            data.extend(p[..3].iter().map(|&v| v as f64 / 255.0));
        } else {
            data.extend([p[0] as f64 / 255.0; 3]);
        }
    }
    Image::new(w, h, data)
}

fn parse_ppm(buf: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("truncated ppm header"));
        }
        Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |s: String| s.parse::<usize>().map_err(|_| Error::format(format!("bad ppm field {s:?}")));
    let w = num(token()?)?;
    let h = num(token()?)?;
    let maxval = num(token()?)?;
    if maxval != 255 {
        return Err(Error::format(format!("only 8-bit ppm supported, maxval {maxval}")));
    }
    let data: Vec<f64> = match magic.as_str() {
        "P6" => {
            let body = &buf[(pos + 1).min(buf.len())..];
            if body.len() < w * h * 3 {
                return Err(Error::format("truncated ppm body"));
            }
            body[..w * h * 3].iter().map(|&v| v as f64 / 255.0).collect()
        }
        "P3" => (0..w * h * 3)
            .map(|_| Ok(num(token()?)? as f64 / 255.0))
            .collect::<Result<_>>()?,
        other => return Err(Error::format(format!("unsupported ppm magic {other:?}"))),
    };
    Image::new(w, h, data)
}

/// Loads two images that must share dimensions.
pub fn load_image_pair(a: impl AsRef<Path>, b: impl AsRef<Path>) -> Result<(Image, Image)> {
    let ia = load_image(&a)?;
    let ib = load_image(&b)?;
    ib.ensure_same_dims(ia.width, ia.height).map_err(|e| {
        e.context(format!("{} vs {}", a.as_ref().display(), b.as_ref().display()))
    })?;
    Ok((ia, ib))
}
