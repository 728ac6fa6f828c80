//! Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only, plus
//! conversions to and from the `C x H x W` tensor layout with values
//! scaled to `[0, 1]`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PgmError {
    #[error("image i/o on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed image {path}: {reason}")]
    Malformed { path: String, reason: String },
}

/// Raw 8-bit raster; `channels` is 1 for grayscale, 3 for color.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: vec![0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    /// Tensor in `3 x H x W` with values in `[0, 1]`; grayscale rasters
    /// replicate their single channel.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let src = if self.channels == 3 { c } else { 0 };
                    data[(c * h + y) * w + x] = self.get(x, y, src) as f64 / 255.0;
                }
            }
        }
        Tensor::new(vec![3, h, w], data).expect("raster tensor")
    }

    /// Crop a fully contained rectangle.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Raster {
        assert!(x0 + w <= self.width && y0 + h <= self.height, "crop out of bounds");
        let mut out = Raster::new(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(x0 + x, y0 + y, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbor resize (source index `floor(dst * in / out)`).
    pub fn resize_nearest(&self, w: usize, h: usize) -> Raster {
        let mut out = Raster::new(w, h, self.channels);
        for y in 0..h {
            let sy = y * self.height / h;
            for x in 0..w {
                let sx = x * self.width / w;
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PgmError {
    PgmError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn bad(path: &Path, reason: impl Into<String>) -> PgmError {
    PgmError::Malformed {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Read one whitespace-delimited header token, skipping `#` comments.
fn read_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String, PgmError> {
    let mut token = String::new();
    let mut in_comment = false;
    loop {
        let mut byte = [0u8; 1];
        match r.read_exact(&mut byte) {
            Ok(()) => {}
            Err(e) => return Err(io_err(path, e)),
        }
        let ch = byte[0] as char;
        if in_comment {
            if ch == '\n' {
                in_comment = false;
            }
            continue;
        }
        if ch == '#' {
            in_comment = true;
            continue;
        }
        if ch.is_ascii_whitespace() {
            if token.is_empty() {
                continue;
            }
            return Ok(token);
        }
        token.push(ch);
    }
}

pub fn read_image(path: &Path) -> Result<Raster, PgmError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(f);
    let magic = read_token(&mut r, path)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(path, format!("unsupported magic '{other}'"))),
    };
    let parse = |tok: String| -> Result<usize, PgmError> {
        tok.parse()
            .map_err(|_| bad(path, format!("bad header value '{tok}'")))
    };
    let width = parse(read_token(&mut r, path)?)?;
    let height = parse(read_token(&mut r, path)?)?;
    let maxval = parse(read_token(&mut r, path)?)?;
    if width == 0 || height == 0 {
        return Err(bad(path, "zero extent"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(bad(path, format!("unsupported maxval {maxval}")));
    }
    let mut pixels = vec![0u8; width * height * channels];
    r.read_exact(&mut pixels)
        .map_err(|e| bad(path, format!("truncated pixel data: {e}")))?;
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn write_image(path: &Path, raster: &Raster) -> Result<(), PgmError> {
    let magic = match raster.channels {
        1 => "P5",
        3 => "P6",
        other => return Err(bad(path, format!("{other}-channel raster"))),
    };
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let header = format!("{magic}\n{} {}\n255\n", raster.width, raster.height);
    f.write_all(header.as_bytes()).map_err(|e| io_err(path, e))?;
    f.write_all(&raster.pixels).map_err(|e| io_err(path, e))?;
    Ok(())
}

/// Write an `[0, 1]` field as an 8-bit grayscale image, linearly scaled to
/// `0..=255` with round-to-nearest.
pub fn write_gray_field(path: &Path, values: &[f64], width: usize, height: usize) -> Result<(), PgmError> {
    assert_eq!(values.len(), width * height);
    let mut raster = Raster::new(width, height, 1);
    for (i, &v) in values.iter().enumerate() {
        raster.pixels[i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    write_image(path, &raster)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let mut raster = Raster::new(4, 3, 1);
        for (i, p) in raster.pixels.iter_mut().enumerate() {
            *p = (i * 19 % 256) as u8;
        }
        write_image(&path, &raster).unwrap();
        assert_eq!(read_image(&path).unwrap(), raster);
    }

    #[test]
    fn color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let mut raster = Raster::new(3, 2, 3);
        for (i, p) in raster.pixels.iter_mut().enumerate() {
            *p = (i * 37 % 256) as u8;
        }
        write_image(&path, &raster).unwrap();
        assert_eq!(read_image(&path).unwrap(), raster);
    }

    #[test]
    fn header_comments_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5\n# a comment\n2 1\n255\nab").unwrap();
        let raster = read_image(&path).unwrap();
        assert_eq!(raster.width, 2);
        assert_eq!(raster.pixels, b"ab");
    }

    #[test]
    fn truncated_pixels_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        std::fs::write(&path, b"P5\n4 4\n255\nabc").unwrap();
        assert!(matches!(
            read_image(&path),
            Err(PgmError::Malformed { .. })
        ));
    }

    #[test]
    fn field_quantization_bound() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.pgm");
        let values: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        write_gray_field(&path, &values, 8, 8).unwrap();
        let back = read_image(&path).unwrap();
        for (i, &v) in values.iter().enumerate() {
            let decoded = back.pixels[i] as f64 / 255.0;
            assert!((decoded - v).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn gray_tensor_replicates_channels() {
        let mut raster = Raster::new(2, 1, 1);
        raster.pixels = vec![0, 255];
        let t = raster.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        for c in 0..3 {
            assert_eq!(t.at(&[c, 0, 0]), 0.0);
            assert_eq!(t.at(&[c, 0, 1]), 1.0);
        }
    }

    #[test]
    fn crop_and_resize() {
        let mut raster = Raster::new(4, 4, 1);
        for (i, p) in raster.pixels.iter_mut().enumerate() {
            *p = i as u8;
        }
        let crop = raster.crop(1, 1, 2, 2);
        assert_eq!(crop.pixels, vec![5, 6, 9, 10]);
        let up = crop.resize_nearest(4, 4);
        assert_eq!(up.get(0, 0, 0), 5);
        assert_eq!(up.get(3, 3, 0), 10);
    }
}
