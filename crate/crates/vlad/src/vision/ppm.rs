//! Binary PPM (P6) image files.
//!
//! The only image format in the workspace: 8-bit RGB, maxval 255. The parser
//! accepts the standard header layout including `#` comments; everything
//! else — P5/P3 variants, 16-bit maxvals — is rejected rather than guessed
//! at.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// An 8-bit RGB raster. Pixels are row-major, interleaved R,G,B.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.to_string(),
        msg: msg.into(),
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Image> {
        if pixels.len() != width * height * 3 {
            return Err(Error::FileFormat {
                path: "<memory>".into(),
                msg: format!(
                    "pixel buffer has {} bytes, want {}×{}×3 = {}",
                    pixels.len(),
                    width,
                    height,
                    width * height * 3
                ),
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Center-crop to a square and resize (nearest neighbor) to
    /// `resolution × resolution`.
    pub fn center_crop_resize(&self, resolution: usize) -> Image {
        let side = self.width.min(self.height);
        let x0 = (self.width - side) / 2;
        let y0 = (self.height - side) / 2;
        let mut pixels = Vec::with_capacity(resolution * resolution * 3);
        for y in 0..resolution {
            // Sample the center of each destination cell.
            let sy = y0 + (y * side + side / 2) / resolution;
            for x in 0..resolution {
                let sx = x0 + (x * side + side / 2) / resolution;
                pixels.extend_from_slice(&self.pixel(sx.min(self.width - 1), sy.min(self.height - 1)));
            }
        }
        Image {
            width: resolution,
            height: resolution,
            pixels,
        }
    }

    /// Channel-planar tensor `[3, H, W]` with values scaled to `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        let mut data = vec![T::zero(); 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = self.pixel(x, y);
                for c in 0..3 {
                    data[c * h * w + y * w + x] = T::from_f64(px[c] as f64 / 255.0);
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("image tensor shape is consistent")
    }
}

/// Read one whitespace/comment-separated header token.
fn read_token<R: Read>(r: &mut R, path: &str) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    let mut in_comment = false;
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(bad(path, "truncated header"));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if in_comment {
            if c == b'\n' {
                in_comment = false;
            }
            continue;
        }
        match c {
            b'#' => in_comment = true,
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !tok.is_empty() {
                    return Ok(tok);
                }
            }
            _ => tok.push(c as char),
        }
    }
}

pub fn read_ppm<R: Read>(r: &mut R, path: &str) -> Result<Image> {
    let magic = read_token(r, path)?;
    if magic != "P6" {
        return Err(bad(path, format!("unsupported format `{magic}` (want P6)")));
    }
    let parse = |tok: String| -> Result<usize> {
        tok.parse()
            .map_err(|_| bad(path, format!("bad header number `{tok}`")))
    };
    let width = parse(read_token(r, path)?)?;
    let height = parse(read_token(r, path)?)?;
    let maxval = parse(read_token(r, path)?)?;
    if maxval != 255 {
        return Err(bad(path, format!("maxval {maxval} unsupported (want 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad(path, "zero image dimension"));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels)
        .map_err(|_| bad(path, "truncated pixel payload"))?;
    Image::new(width, height, pixels)
}

pub fn write_ppm<W: Write>(w: &mut W, img: &Image) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.pixels)?;
    Ok(())
}

pub fn load_ppm(path: &Path) -> Result<Image> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ppm(&mut r, &path.display().to_string())
}

pub fn save_ppm(path: &Path, img: &Image) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut w, img)?;
    Ok(())
}
