//! Attribute images and silhouette masks, with PFM/PGM/PPM file I/O.
//!
//! Pixel data is stored row-major, top row first, three channels per
//! pixel. On disk attribute images are Portable Float Maps (`PF`,
//! little-endian, bottom-up rows); silhouettes are binary PGM (`P5`,
//! 255 = foreground). A PPM export exists for visual inspection only.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid {format} file: {msg}")]
    Format {
        path: String,
        format: &'static str,
        msg: String,
    },
    #[error("bilinear sample at ({x:.2}, {y:.2}) has no foreground neighbor")]
    AllBackgroundSample { x: f64, y: f64 },
    #[error("sample coordinates ({x:.2}, {y:.2}) outside a {w}x{h} image")]
    SampleOutOfImage { x: f64, y: f64, w: usize, h: usize },
}

/// Which vertex attribute an image encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrKind {
    Position,
    Normal,
}

impl std::fmt::Display for AttrKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttrKind::Position => write!(f, "position"),
            AttrKind::Normal => write!(f, "normal"),
        }
    }
}

/// Which mesh an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Owner {
    Garment,
    Body,
}

impl std::fmt::Display for Owner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Owner::Garment => write!(f, "garment"),
            Owner::Body => write!(f, "body"),
        }
    }
}

/// H x W x 3 image of encoded vertex attributes in [0, 1]. Background
/// pixels are exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeImage {
    pub width: usize,
    pub height: usize,
    /// Row-major, top row first, RGB interleaved.
    pub data: Vec<f64>,
    pub view: String,
    pub kind: AttrKind,
    pub owner: Owner,
}

impl AttributeImage {
    pub fn zeros(
        width: usize,
        height: usize,
        view: impl Into<String>,
        kind: AttrKind,
        owner: Owner,
    ) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
            view: view.into(),
            kind,
            owner,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, value: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = value[0];
        self.data[i + 1] = value[1];
        self.data[i + 2] = value[2];
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Boolean foreground mask matching a rendered view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Silhouette {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub view: String,
}

impl Silhouette {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn coverage_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Bilinear interpolation at sub-pixel coordinates, where pixel centers
/// sit at half-integer positions. Weights are renormalized over the
/// foreground neighbors; sampling an all-background neighborhood is an
/// error, as is sampling outside the image.
pub fn sample_image_bilinear(
    image: &AttributeImage,
    mask: &Silhouette,
    x: f64,
    y: f64,
) -> Result<[f64; 3], ImageError> {
    let (w, h) = (image.width, image.height);
    if x < 0.0 || y < 0.0 || x > w as f64 || y > h as f64 {
        return Err(ImageError::SampleOutOfImage { x, y, w, h });
    }
    // Shift so pixel centers are at integer coordinates, then clamp the
    // 2x2 neighborhood to the image.
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let tx = fx - x0 as f64;
    let ty = fy - y0 as f64;

    let neighbors = [
        (x0, y0, (1.0 - tx) * (1.0 - ty)),
        (x1, y0, tx * (1.0 - ty)),
        (x0, y1, (1.0 - tx) * ty),
        (x1, y1, tx * ty),
    ];
    let mut value = [0.0; 3];
    let mut weight_sum = 0.0;
    for (px, py, wgt) in neighbors {
        if wgt == 0.0 || !mask.get(px, py) {
            continue;
        }
        let p = image.pixel(px, py);
        for c in 0..3 {
            value[c] += wgt * p[c];
        }
        weight_sum += wgt;
    }
    if weight_sum <= 0.0 {
        return Err(ImageError::AllBackgroundSample { x, y });
    }
    for c in &mut value {
        *c /= weight_sum;
    }
    Ok(value)
}

/// Writes an attribute image as a 3-channel PFM (little-endian, scale
/// -1.0, rows bottom-up). Values are stored as f32.
pub fn write_pfm(image: &AttributeImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(32 + image.data.len() * 4);
    bytes.extend_from_slice(format!("PF\n{} {}\n-1.0\n", image.width, image.height).as_bytes());
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            for v in image.pixel(x, y) {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    write_file(path, &bytes)
}

/// Reads a 3-channel PFM written by [`write_pfm`]. View/kind/owner labels
/// are not stored in the file and must be supplied by the caller.
pub fn read_pfm(
    path: impl AsRef<Path>,
    view: impl Into<String>,
    kind: AttrKind,
    owner: Owner,
) -> Result<AttributeImage, ImageError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|source| ImageError::Io {
        path: path_str.clone(),
        source,
    })?;
    let bad = |msg: &str| ImageError::Format {
        path: path_str.clone(),
        format: "PFM",
        msg: msg.to_string(),
    };

    let mut cursor = 0usize;
    let mut token = || -> Result<String, ImageError> {
        while cursor < bytes.len() && bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        let start = cursor;
        while cursor < bytes.len() && !bytes[cursor].is_ascii_whitespace() {
            cursor += 1;
        }
        if start == cursor {
            return Err(ImageError::Format {
                path: path_str.clone(),
                format: "PFM",
                msg: "truncated header".into(),
            });
        }
        let tok = String::from_utf8_lossy(&bytes[start..cursor]).into_owned();
        // Consume the single whitespace that terminates the token.
        cursor += 1;
        Ok(tok)
    };

    if token()? != "PF" {
        return Err(bad("expected `PF` magic"));
    }
    let width: usize = token()?.parse().map_err(|_| bad("invalid width"))?;
    let height: usize = token()?.parse().map_err(|_| bad("invalid height"))?;
    let scale: f64 = token()?.parse().map_err(|_| bad("invalid scale"))?;
    if scale >= 0.0 {
        return Err(bad("big-endian PFM is not supported"));
    }
    let expected = width * height * 3 * 4;
    if bytes.len() < cursor + expected {
        return Err(bad("pixel payload is truncated"));
    }
    let mut image = AttributeImage::zeros(width, height, view, kind, owner);
    let mut offset = cursor;
    for y in (0..height).rev() {
        for x in 0..width {
            let mut px = [0.0f64; 3];
            for v in &mut px {
                let raw: [u8; 4] = bytes[offset..offset + 4].try_into().unwrap();
                *v = f32::from_le_bytes(raw) as f64;
                offset += 4;
            }
            image.set_pixel(x, y, px);
        }
    }
    Ok(image)
}

/// Writes a silhouette as binary PGM with 255 = foreground.
pub fn write_pgm(mask: &Silhouette, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(32 + mask.mask.len());
    bytes.extend_from_slice(format!("P5\n{} {}\n255\n", mask.width, mask.height).as_bytes());
    bytes.extend(mask.mask.iter().map(|&m| if m { 255u8 } else { 0u8 }));
    write_file(path, &bytes)
}

/// Reads a binary PGM silhouette; any nonzero byte is foreground.
pub fn read_pgm(path: impl AsRef<Path>, view: impl Into<String>) -> Result<Silhouette, ImageError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ImageError::Io {
            path: path_str.clone(),
            source,
        })?;
    let bad = |msg: &str| ImageError::Format {
        path: path_str.clone(),
        format: "PGM",
        msg: msg.to_string(),
    };
    let header = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some("P5") {
        return Err(bad("expected `P5` magic"));
    }
    let width: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("invalid width"))?;
    let height: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| bad("invalid height"))?;
    let _maxval = parts.next().ok_or_else(|| bad("missing maxval"))?;
    // Payload starts after the third header newline.
    let mut newlines = 0;
    let mut offset = 0;
    for (i, b) in bytes.iter().enumerate() {
        if *b == b'\n' {
            newlines += 1;
            if newlines == 3 {
                offset = i + 1;
                break;
            }
        }
    }
    if bytes.len() < offset + width * height {
        return Err(bad("pixel payload is truncated"));
    }
    let mask = bytes[offset..offset + width * height]
        .iter()
        .map(|&b| b != 0)
        .collect();
    Ok(Silhouette {
        width,
        height,
        mask,
        view: view.into(),
    })
}

/// Writes an 8-bit PPM preview (values x255, clamped). Inspection only;
/// nothing reads this format back.
pub fn write_ppm(image: &AttributeImage, path: impl AsRef<Path>) -> Result<(), ImageError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(32 + image.data.len());
    bytes.extend_from_slice(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes());
    for v in &image.data {
        bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    write_file(path, &bytes)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ImageError> {
    let mut file = std::fs::File::create(path).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })?;
    file.write_all(bytes).map_err(|source| ImageError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkered(w: usize, h: usize) -> (AttributeImage, Silhouette) {
        let mut img = AttributeImage::zeros(w, h, "front", AttrKind::Position, Owner::Garment);
        let mut mask = vec![false; w * h];
        for y in 0..h {
            for x in 0..w {
                if (x + y) % 2 == 0 {
                    img.set_pixel(x, y, [x as f64 / w as f64, y as f64 / h as f64, 0.25]);
                    mask[y * w + x] = true;
                }
            }
        }
        (
            img,
            Silhouette {
                width: w,
                height: h,
                mask,
                view: "front".into(),
            },
        )
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (img, _) = checkered(7, 5);
        let path = dir.path().join("img.pfm");
        write_pfm(&img, &path).unwrap();
        let back = read_pfm(&path, "front", AttrKind::Position, Owner::Garment).unwrap();
        assert_eq!(back.width, 7);
        assert_eq!(back.height, 5);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((*a as f32 - *b as f32).abs() == 0.0);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mask) = checkered(6, 4);
        let path = dir.path().join("mask.pgm");
        write_pgm(&mask, &path).unwrap();
        let back = read_pgm(&path, "front").unwrap();
        assert_eq!(back.mask, mask.mask);
    }

    #[test]
    fn bilinear_at_pixel_center_returns_pixel() {
        let (img, mask) = checkered(8, 8);
        // Pixel (2, 4) is foreground; its center is (2.5, 4.5).
        let v = sample_image_bilinear(&img, &mask, 2.5, 4.5).unwrap();
        let p = img.pixel(2, 4);
        for c in 0..3 {
            assert!((v[c] - p[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_renormalizes_over_foreground() {
        let mut img = AttributeImage::zeros(2, 2, "front", AttrKind::Position, Owner::Garment);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(1, 1, [0.0, 1.0, 0.0]);
        let mask = Silhouette {
            width: 2,
            height: 2,
            mask: vec![true, false, false, true],
            view: "front".into(),
        };
        // Midpoint of the two foreground pixel centers.
        let v = sample_image_bilinear(&img, &mask, 1.0, 1.0).unwrap();
        assert!((v[0] - 0.5).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_all_background_errors() {
        let (img, _) = checkered(4, 4);
        let empty = Silhouette {
            width: 4,
            height: 4,
            mask: vec![false; 16],
            view: "front".into(),
        };
        assert!(matches!(
            sample_image_bilinear(&img, &empty, 2.0, 2.0),
            Err(ImageError::AllBackgroundSample { .. })
        ));
    }

    #[test]
    fn bilinear_outside_image_errors() {
        let (img, mask) = checkered(4, 4);
        assert!(matches!(
            sample_image_bilinear(&img, &mask, -0.5, 2.0),
            Err(ImageError::SampleOutOfImage { .. })
        ));
    }

    #[test]
    fn bilinear_matches_direct_interpolation() {
        // Full-foreground image: renormalization is a no-op and the result
        // must equal textbook bilinear interpolation.
        let w = 9;
        let h = 7;
        let mut img = AttributeImage::zeros(w, h, "front", AttrKind::Position, Owner::Garment);
        for y in 0..h {
            for x in 0..w {
                img.set_pixel(x, y, [(x * y) as f64 * 0.011, x as f64 * 0.07, y as f64 * 0.05]);
            }
        }
        let mask = Silhouette {
            width: w,
            height: h,
            mask: vec![true; w * h],
            view: "front".into(),
        };
        let mut state = 0x12345u64;
        for _ in 0..200 {
            // Small deterministic LCG keeps the oracle self-contained.
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let rx = 0.5 + (state >> 11) as f64 / (1u64 << 53) as f64 * (w as f64 - 1.0);
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let ry = 0.5 + (state >> 11) as f64 / (1u64 << 53) as f64 * (h as f64 - 1.0);

            let got = sample_image_bilinear(&img, &mask, rx, ry).unwrap();

            let fx = rx - 0.5;
            let fy = ry - 0.5;
            let x0 = fx.floor() as usize;
            let y0 = fy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let tx = fx - x0 as f64;
            let ty = fy - y0 as f64;
            for c in 0..3 {
                let top = img.pixel(x0, y0)[c] * (1.0 - tx) + img.pixel(x1, y0)[c] * tx;
                let bot = img.pixel(x0, y1)[c] * (1.0 - tx) + img.pixel(x1, y1)[c] * tx;
                let want = top * (1.0 - ty) + bot * ty;
                assert!((got[c] - want).abs() < 1e-6, "{} vs {}", got[c], want);
            }
        }
    }
}
