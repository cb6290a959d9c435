//! Image containers: 8-bit PNG with the sRGB transfer for display, PFM
//! and Radiance HDR for linear float data (PFM round-trips bit-exactly).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::IoError;

/// Linear-light RGB image with optional alpha, row-major from the top.
#[derive(Clone, Debug)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    /// RGB triples in linear light.
    pub rgb: Vec<f32>,
    /// Per-pixel coverage in `[0, 1]`; 1 when the source had no alpha.
    pub alpha: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize) -> Self {
        ImageF {
            width,
            height,
            rgb: vec![0.0; width * height * 3],
            alpha: vec![1.0; width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&rgb);
    }

    /// Composites onto a constant background using the alpha channel.
    pub fn composited(&self, bg: [f32; 3]) -> ImageF {
        let mut out = self.clone();
        for p in 0..self.width * self.height {
            let a = self.alpha[p];
            for c in 0..3 {
                out.rgb[3 * p + c] = self.rgb[3 * p + c] * a + bg[c] * (1.0 - a);
            }
        }
        out.alpha.fill(1.0);
        out
    }
}

#[inline]
pub fn srgb_encode(v: f32) -> f32 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
pub fn srgb_decode(v: f32) -> f32 {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// Writes a linear image as 8-bit sRGB PNG (with alpha when provided).
pub fn write_png(path: &Path, img: &ImageF, with_alpha: bool) -> Result<(), IoError> {
    let (w, h) = (img.width as u32, img.height as u32);
    if with_alpha {
        let mut buf = image::RgbaImage::new(w, h);
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.pixel(x, y);
                let a = img.alpha[y * img.width + x];
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgba([
                        (srgb_encode(p[0]) * 255.0).round() as u8,
                        (srgb_encode(p[1]) * 255.0).round() as u8,
                        (srgb_encode(p[2]) * 255.0).round() as u8,
                        (a.clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        buf.save(path)
            .map_err(|e| IoError::Image(path.into(), e.to_string()))
    } else {
        let mut buf = image::RgbImage::new(w, h);
        for y in 0..img.height {
            for x in 0..img.width {
                let p = img.pixel(x, y);
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (srgb_encode(p[0]) * 255.0).round() as u8,
                        (srgb_encode(p[1]) * 255.0).round() as u8,
                        (srgb_encode(p[2]) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        buf.save(path)
            .map_err(|e| IoError::Image(path.into(), e.to_string()))
    }
}

/// Reads a PNG into linear light (sRGB decoded; alpha passed through).
pub fn read_png(path: &Path) -> Result<ImageF, IoError> {
    let dyn_img = image::open(path).map_err(|e| IoError::Image(path.into(), e.to_string()))?;
    let rgba = dyn_img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let mut out = ImageF::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = rgba.get_pixel(x as u32, y as u32);
            out.set_pixel(
                x,
                y,
                [
                    srgb_decode(p[0] as f32 / 255.0),
                    srgb_decode(p[1] as f32 / 255.0),
                    srgb_decode(p[2] as f32 / 255.0),
                ],
            );
            out.alpha[y * w + x] = p[3] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Writes a 3-channel (`PF`) or 1-channel (`Pf`) PFM. PFM scanlines run
/// bottom-to-top; the in-memory layout is top-down, so rows are flipped.
/// Little-endian is signalled by the negative scale.
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f32]) -> Result<(), IoError> {
    let channels = data.len() / (width * height);
    if channels != 1 && channels != 3 {
        return Err(IoError::Image(path.into(), format!("{channels} channels")));
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| IoError::file(path, e))?);
    let tag = if channels == 3 { "PF" } else { "Pf" };
    write!(f, "{tag}\n{width} {height}\n-1.0\n").map_err(|e| IoError::file(path, e))?;
    for y in (0..height).rev() {
        let row = &data[y * width * channels..(y + 1) * width * channels];
        let mut bytes = Vec::with_capacity(row.len() * 4);
        for v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(|e| IoError::file(path, e))?;
    }
    Ok(())
}

/// Reads a PFM; returns `(width, height, channels, data)` top-down.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>), IoError> {
    let mut f = BufReader::new(File::open(path).map_err(|e| IoError::file(path, e))?);
    let mut header = String::new();
    for _ in 0..3 {
        let mut line = String::new();
        f.read_line(&mut line).map_err(|e| IoError::file(path, e))?;
        header.push_str(&line);
    }
    let mut it = header.split_whitespace();
    let tag = it
        .next()
        .ok_or_else(|| IoError::parse(path, "missing tag"))?;
    let channels = match tag {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(IoError::parse(path, &format!("bad PFM tag {other}"))),
    };
    let width: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::parse(path, "bad width"))?;
    let height: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::parse(path, "bad height"))?;
    let scale: f32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| IoError::parse(path, "bad scale"))?;
    let little_endian = scale < 0.0;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)
        .map_err(|e| IoError::file(path, e))?;
    let need = width * height * channels * 4;
    if raw.len() < need {
        return Err(IoError::parse(path, "truncated PFM payload"));
    }
    let mut data = vec![0f32; width * height * channels];
    for y in 0..height {
        let src_row = height - 1 - y;
        for i in 0..width * channels {
            let off = (src_row * width * channels + i) * 4;
            let b = [raw[off], raw[off + 1], raw[off + 2], raw[off + 3]];
            data[y * width * channels + i] = if little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
    }
    Ok((width, height, channels, data))
}

/// Writes a Radiance HDR (RGBE, uncompressed scanlines).
pub fn write_hdr(path: &Path, width: usize, height: usize, rgb: &[f32]) -> Result<(), IoError> {
    let mut f = BufWriter::new(File::create(path).map_err(|e| IoError::file(path, e))?);
    write!(
        f,
        "#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {height} +X {width}\n"
    )
    .map_err(|e| IoError::file(path, e))?;
    let mut buf = Vec::with_capacity(width * height * 4);
    for p in 0..width * height {
        buf.extend_from_slice(&float_to_rgbe([rgb[3 * p], rgb[3 * p + 1], rgb[3 * p + 2]]));
    }
    f.write_all(&buf).map_err(|e| IoError::file(path, e))
}

fn float_to_rgbe(rgb: [f32; 3]) -> [u8; 4] {
    let max = rgb[0].max(rgb[1]).max(rgb[2]);
    if max < 1e-32 {
        return [0, 0, 0, 0];
    }
    let exp = max.log2().floor() as i32 + 1;
    let scale = 256.0 / (2.0f32).powi(exp);
    [
        (rgb[0] * scale).min(255.0) as u8,
        (rgb[1] * scale).min(255.0) as u8,
        (rgb[2] * scale).min(255.0) as u8,
        (exp + 128) as u8,
    ]
}

fn rgbe_to_float(rgbe: [u8; 4]) -> [f32; 3] {
    if rgbe[3] == 0 {
        return [0.0; 3];
    }
    let scale = (2.0f32).powi(rgbe[3] as i32 - 128 - 8);
    [
        rgbe[0] as f32 * scale,
        rgbe[1] as f32 * scale,
        rgbe[2] as f32 * scale,
    ]
}

/// Reads a Radiance HDR; supports uncompressed and new-style RLE
/// scanlines. Returns `(width, height, rgb)`.
pub fn read_hdr(path: &Path) -> Result<(usize, usize, Vec<f32>), IoError> {
    let mut f = BufReader::new(File::open(path).map_err(|e| IoError::file(path, e))?);
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)
        .map_err(|e| IoError::file(path, e))?;
    // Header ends at the first empty line; the next line holds dimensions.
    let mut pos = 0usize;
    let mut lines: Vec<String> = Vec::new();
    while pos < raw.len() {
        let end = raw[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| IoError::parse(path, "unterminated header"))?;
        let line = String::from_utf8_lossy(&raw[pos..end]).to_string();
        pos = end + 1;
        if line.is_empty() && !lines.is_empty() {
            break;
        }
        lines.push(line);
    }
    if lines.first().map(|l| l.starts_with("#?")) != Some(true) {
        return Err(IoError::parse(path, "missing #? signature"));
    }
    // Dimension line.
    let end = raw[pos..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|e| pos + e)
        .ok_or_else(|| IoError::parse(path, "missing dimensions"))?;
    let dims = String::from_utf8_lossy(&raw[pos..end]).to_string();
    pos = end + 1;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "-Y" || parts[2] != "+X" {
        return Err(IoError::parse(path, &format!("unsupported layout {dims}")));
    }
    let height: usize = parts[1]
        .parse()
        .map_err(|_| IoError::parse(path, "bad height"))?;
    let width: usize = parts[3]
        .parse()
        .map_err(|_| IoError::parse(path, "bad width"))?;
    let mut rgb = vec![0f32; width * height * 3];
    let data = &raw[pos..];
    let mut off = 0usize;
    for y in 0..height {
        if data.len() < off + 4 {
            return Err(IoError::parse(path, "truncated scanline"));
        }
        let head = [data[off], data[off + 1], data[off + 2], data[off + 3]];
        let new_rle = head[0] == 2
            && head[1] == 2
            && ((head[2] as usize) << 8 | head[3] as usize) == width
            && (8..32768).contains(&width);
        let mut scan = vec![0u8; width * 4];
        if new_rle {
            off += 4;
            // Four separately RLE-coded component planes.
            for c in 0..4 {
                let mut x = 0usize;
                while x < width {
                    if off >= data.len() {
                        return Err(IoError::parse(path, "truncated RLE"));
                    }
                    let count = data[off] as usize;
                    off += 1;
                    if count > 128 {
                        let run = count - 128;
                        if off >= data.len() || x + run > width {
                            return Err(IoError::parse(path, "bad RLE run"));
                        }
                        let v = data[off];
                        off += 1;
                        for _ in 0..run {
                            scan[x * 4 + c] = v;
                            x += 1;
                        }
                    } else {
                        if off + count > data.len() || x + count > width {
                            return Err(IoError::parse(path, "bad RLE literal"));
                        }
                        for _ in 0..count {
                            scan[x * 4 + c] = data[off];
                            off += 1;
                            x += 1;
                        }
                    }
                }
            }
        } else {
            if data.len() < off + width * 4 {
                return Err(IoError::parse(path, "truncated flat scanline"));
            }
            scan.copy_from_slice(&data[off..off + width * 4]);
            off += width * 4;
        }
        for x in 0..width {
            let px = rgbe_to_float([
                scan[x * 4],
                scan[x * 4 + 1],
                scan[x * 4 + 2],
                scan[x * 4 + 3],
            ]);
            rgb[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&px);
        }
    }
    Ok((width, height, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("irvox_img_tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn pfm_round_trip_is_bitwise_exact() {
        let (w, h) = (7usize, 5usize);
        let data: Vec<f32> = (0..w * h * 3)
            .map(|i| ((i as f32) * 0.731).sin() * 3.7)
            .collect();
        let p = tmp("rt.pfm");
        write_pfm(&p, w, h, &data).unwrap();
        let (rw, rh, c, back) = read_pfm(&p).unwrap();
        assert_eq!((rw, rh, c), (w, h, 3));
        assert_eq!(data, back);
        // Grayscale variant.
        let gray: Vec<f32> = (0..w * h).map(|i| i as f32 * 0.25).collect();
        let p = tmp("rt_gray.pfm");
        write_pfm(&p, w, h, &gray).unwrap();
        let (_, _, c, back) = read_pfm(&p).unwrap();
        assert_eq!(c, 1);
        assert_eq!(gray, back);
    }

    #[test]
    fn png_round_trip_is_stable_after_first_quantization() {
        let mut img = ImageF::new(9, 4);
        for y in 0..4 {
            for x in 0..9 {
                img.set_pixel(x, y, [x as f32 / 8.0, y as f32 / 3.0, 0.21]);
            }
        }
        let p1 = tmp("a.png");
        write_png(&p1, &img, false).unwrap();
        let once = read_png(&p1).unwrap();
        let p2 = tmp("b.png");
        write_png(&p2, &once, false).unwrap();
        let twice = read_png(&p2).unwrap();
        // Quantization is idempotent.
        assert_eq!(once.rgb, twice.rgb);
    }

    #[test]
    fn hdr_round_trip_within_rgbe_precision() {
        let (w, h) = (16usize, 8usize);
        let data: Vec<f32> = (0..w * h * 3)
            .map(|i| ((i as f32 * 0.17).sin().abs() + 0.01) * 10.0)
            .collect();
        let p = tmp("rt.hdr");
        write_hdr(&p, w, h, &data).unwrap();
        let (rw, rh, back) = read_hdr(&p).unwrap();
        assert_eq!((rw, rh), (w, h));
        // RGBE shares one 8-bit exponentiated mantissa per pixel, so the
        // error bound scales with the largest channel of that pixel.
        for p in 0..w * h {
            let pix = &data[3 * p..3 * p + 3];
            let max_c = pix.iter().fold(0.0f32, |m, &v| m.max(v));
            let step = max_c / 128.0;
            for c in 0..3 {
                let (a, b) = (pix[c], back[3 * p + c]);
                assert!((a - b).abs() <= step + 1e-6, "{a} vs {b} (step {step})");
            }
        }
    }

    #[test]
    fn srgb_transfer_is_inverse() {
        for i in 0..=1000 {
            let v = i as f32 / 1000.0;
            let rt = srgb_decode(srgb_encode(v));
            assert!((rt - v).abs() < 1e-5);
        }
    }

    #[test]
    fn compositing_blends_alpha() {
        let mut img = ImageF::new(1, 1);
        img.set_pixel(0, 0, [0.25, 0.5, 0.75]);
        img.alpha[0] = 0.0;
        let out = img.composited([1.0, 1.0, 1.0]);
        assert_eq!(out.pixel(0, 0), [1.0, 1.0, 1.0]);
    }
}
