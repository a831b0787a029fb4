//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![color; width * height],
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let fail = |offset: usize, message: &str| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: message.to_string(),
        };
        let mut pos = 0;
        // Header: magic, width, height, maxval separated by whitespace; '#' comments allowed.
        let next_token = |pos: &mut usize| -> Option<(usize, String)> {
            loop {
                while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                    *pos += 1;
                }
                if *pos < bytes.len() && bytes[*pos] == b'#' {
                    while *pos < bytes.len() && bytes[*pos] != b'\n' {
                        *pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = *pos;
            while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            (start < *pos).then(|| (start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
        };
        match next_token(&mut pos) {
            Some((_, m)) if m == "P6" => {}
            _ => return Err(fail(0, "bad magic (expected P6)")),
        }
        let mut numbers = [0usize; 3];
        for slot in &mut numbers {
            let (at, tok) = next_token(&mut pos).ok_or_else(|| fail(pos, "truncated header"))?;
            *slot = tok.parse().map_err(|_| fail(at, "malformed header number"))?;
        }
        let [width, height, maxval] = numbers;
        if maxval != 255 {
            return Err(fail(pos, "only maxval 255 is supported"));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(fail(bytes.len(), "truncated pixel data"));
        }
        let pixels = bytes[pos..pos + need]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self::new(width, height, pixels)
    }
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    RgbImage::decode(&bytes, path)
}

pub fn write_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, image.encode()).map_err(|e| Error::io(path, e))
}
