//! 8-bit image and binary-map files: PNG plus binary PGM (P5) / PPM (P6).

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Interleaved 8-bit image with one (gray) or three (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::shape(format!("image extent {width}x{height} is empty")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Unsupported(format!("{channels}-channel images")));
        }
        if data.len() != width * height * channels {
            return Err(Error::shape(format!(
                "{} bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Luminance in `[0, 1]` using weights 0.299 / 0.587 / 0.114.
    pub fn luminance(&self) -> Vec<Float> {
        if self.channels == 1 {
            return self.data.iter().map(|&v| v as Float / 255.0).collect();
        }
        self.data
            .chunks_exact(3)
            .map(|p| (0.299 * p[0] as Float + 0.587 * p[1] as Float + 0.114 * p[2] as Float) / 255.0)
            .collect()
    }

    /// Bilinear resize to `width × height`; a no-op when already that size.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let dynimg = self.to_dynamic();
        let out = dynimg.resize_exact(width as u32, height as u32, image::imageops::FilterType::Triangle);
        from_dynamic(out, self.channels)
    }

    fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, self.data.clone()).expect("sized"))
        } else {
            DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, self.data.clone()).expect("sized"))
        }
    }

    /// `[1, C, H, W]` tensor scaled to `[-1, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let (c, plane) = (self.channels, self.width * self.height);
        Tensor::from_fn(&[1, c, self.height, self.width], |i| {
            let (ch, p) = (i / plane, i % plane);
            self.data[p * c + ch] as Float / 127.5 - 1.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor) for one sample of a
    /// `[N, C, H, W]` tensor, with rounding and clamping.
    pub fn from_tensor(t: &Tensor, sample: usize) -> Result<Image> {
        let (n, c, h, w) = t.dims4()?;
        if sample >= n {
            return Err(Error::shape(format!("sample {sample} of a batch of {n}")));
        }
        let plane = h * w;
        let base = sample * c * plane;
        let mut data = vec![0u8; c * plane];
        for ch in 0..c {
            for p in 0..plane {
                data[p * c + ch] = to_u8((t.data()[base + ch * plane + p] + 1.0) * 127.5);
            }
        }
        Image::new(w, h, c, data)
    }
}

pub fn to_u8(v: Float) -> u8 {
    if v.is_nan() {
        0
    } else {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Single-channel binary map (masks and edge maps), one byte per pixel
/// holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height || width == 0 || height == 0 {
            return Err(Error::shape(format!("{} values for a {width}x{height} map", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::Mask(format!("binary map value {v} is not 0 or 1")));
        }
        Ok(BinaryMap { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        BinaryMap {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn fraction(&self) -> Float {
        self.data.iter().map(|&v| v as usize).sum::<usize>() as Float / self.data.len() as Float
    }

    /// Thresholds a gray image at 128.
    pub fn from_image(img: &Image) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::Data("binary maps must be single-channel images".into()));
        }
        BinaryMap::new(img.width, img.height, img.data.iter().map(|&v| u8::from(v >= 128)).collect())
    }

    /// Gray image with values 0 / 255.
    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| v * 255).collect(),
        }
    }

    /// `[1, 1, H, W]` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[1, 1, self.height, self.width], |i| self.data[i] as Float)
    }

    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        if (width, height) == (self.width, self.height) {
            return Ok(self.clone());
        }
        let data = (0..width * height)
            .map(|i| {
                let (y, x) = (i / width, i % width);
                let sy = y * self.height / height;
                let sx = x * self.width / width;
                self.data[sy * self.width + sx]
            })
            .collect();
        BinaryMap::new(width, height, data)
    }
}

fn from_dynamic(img: DynamicImage, channels: usize) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if channels == 1 {
        Image {
            width: w,
            height: h,
            channels: 1,
            data: img.into_luma8().into_raw(),
        }
    } else {
        Image {
            width: w,
            height: h,
            channels: 3,
            data: img.into_rgb8().into_raw(),
        }
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn malformed(format: &'static str, offset: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        format,
        offset,
        message: message.into(),
    }
}

/// Walks the chunk structure so truncation and corruption are reported
/// at a byte offset, then checks the header for supported depths.
fn scan_png(bytes: &[u8]) -> Result<()> {
    if bytes.len() < 8 || bytes[..8] != PNG_SIGNATURE {
        let at = bytes.iter().zip(&PNG_SIGNATURE).take_while(|(a, b)| a == b).count();
        return Err(malformed("PNG", at, "bad signature"));
    }
    let mut pos = 8;
    let mut first = true;
    loop {
        if pos + 8 > bytes.len() {
            return Err(malformed("PNG", pos, "truncated chunk header"));
        }
        let len = u32::from_be_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let kind = &bytes[pos + 4..pos + 8];
        if !kind.iter().all(u8::is_ascii_alphabetic) {
            return Err(malformed("PNG", pos + 4, "invalid chunk type"));
        }
        let end = pos + 12 + len;
        if end > bytes.len() {
            return Err(malformed(
                "PNG",
                bytes.len(),
                format!("chunk {} needs {len} data bytes", String::from_utf8_lossy(kind)),
            ));
        }
        if first {
            if kind != b"IHDR" || len != 13 {
                return Err(malformed("PNG", pos + 4, "first chunk must be IHDR"));
            }
            let depth = bytes[pos + 16];
            if depth > 8 {
                return Err(Error::Unsupported(format!("PNG bit depth {depth}")));
            }
            first = false;
        }
        if kind == b"IEND" {
            return Ok(());
        }
        pos = end;
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    scan_png(bytes)?;
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| malformed("PNG", 8, e.to_string()))?;
    let channels = match img.color().channel_count() {
        1 | 2 => 1,
        _ => 3,
    };
    Ok(from_dynamic(img, channels))
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
fn pnm_token(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&c| c != b'\n') {
                    *pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(malformed("PNM", *pos, format!("missing {what}"))),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    if start == *pos {
        return Err(malformed("PNM", start, format!("expected {what}")));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .expect("ascii digits")
        .parse()
        .map_err(|_| malformed("PNM", start, format!("{what} out of range")))
}

fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(malformed("PNM", 0, "bad magic"));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' => return Err(Error::Unsupported(format!("ASCII or bitmap PNM variant P{}", bytes[1] as char))),
        _ => return Err(malformed("PNM", 1, "bad magic")),
    };
    let mut pos = 2;
    let width = pnm_token(bytes, &mut pos, "width")?;
    let height = pnm_token(bytes, &mut pos, "height")?;
    let maxval_at = pos;
    let maxval = pnm_token(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(malformed("PNM", maxval_at, format!("maxval {maxval}")));
    }
    if maxval > 255 {
        return Err(Error::Unsupported(format!("16-bit PNM (maxval {maxval})")));
    }
    if width == 0 || height == 0 {
        return Err(malformed("PNM", maxval_at, "zero extent"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("PNM", pos, "expected whitespace after header"));
    }
    pos += 1;
    let need = width * height * channels;
    if bytes.len() < pos + need {
        return Err(malformed(
            "PNM",
            bytes.len(),
            format!("truncated raster: need {need} bytes from offset {pos}"),
        ));
    }
    let mut data = bytes[pos..pos + need].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((*v as usize * 255 + maxval / 2) / maxval).min(255) as u8;
        }
    }
    Image::new(width, height, channels, data)
}

/// Decodes PNG or binary PNM data, detected from the leading bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    if bytes.first() == Some(&b'P') {
        decode_pnm(bytes)
    } else {
        decode_png(bytes)
    }
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Malformed { format, offset, message } => Error::Malformed {
            format,
            offset,
            message: format!("{message} ({})", path.display()),
        },
        other => other,
    })
}

pub fn encode_png(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.to_dynamic()
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(out)
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Writes PNM for `.pgm` / `.ppm` / `.pnm` extensions and PNG otherwise.
pub fn save_image(img: &Image, path: &Path) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "pgm" | "ppm" | "pnm" => {
            let want = if ext == "ppm" { 3 } else { 1 };
            if ext != "pnm" && img.channels != want {
                return Err(Error::Unsupported(format!(
                    "{}-channel image as .{ext}",
                    img.channels
                )));
            }
            encode_pnm(img)
        }
        _ => encode_png(img)?,
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_binary_map(path: &Path) -> Result<BinaryMap> {
    let img = load_image(path)?;
    let gray = if img.channels == 1 {
        img
    } else {
        let data = img.data.chunks_exact(3).map(|p| p[0]).collect();
        Image::new(img.width, img.height, 1, data)?
    };
    BinaryMap::from_image(&gray)
}

pub fn save_binary_map(map: &BinaryMap, path: &Path) -> Result<()> {
    save_image(&map.to_image(), path)
}

pub fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}
