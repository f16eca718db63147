//! Pixel buffers and binary PPM I/O.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{io_at, Error, Result};

/// Interleaved (`height x width x channels`) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, channels, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Clamped and rounded 8-bit samples.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn clamped(mut self) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Mean over channels at one pixel.
    pub fn luma(&self, y: usize, x: usize) -> f32 {
        let base = (y * self.width + x) * self.channels;
        self.data[base..base + self.channels].iter().sum::<f32>() / self.channels as f32
    }

    /// Binary PPM (`P6`). Single-channel images are written as grey RGB.
    pub fn write_ppm(&self, mut w: impl Write) -> Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes = self.to_u8();
        match self.channels {
            3 => w.write_all(&bytes)?,
            1 => {
                let rgb: Vec<u8> = bytes.iter().flat_map(|&b| [b, b, b]).collect();
                w.write_all(&rgb)?;
            }
            c => return Err(Error::Format(format!("cannot write {c}-channel image as PPM"))),
        }
        Ok(())
    }

    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_ppm(&mut buf)?;
        std::fs::write(path, buf).map_err(io_at(path))
    }

    /// Reads a `P6` file; `channels == 1` keeps only the first colour plane.
    pub fn read_ppm(mut r: impl Read, channels: usize) -> Result<Self> {
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&raw[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(Error::Format(format!("unsupported PPM header {fields:?}")));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM size {s}")));
        let (width, height) = (parse(&fields[1])?, parse(&fields[2])?);
        let body = raw.get(pos..pos + width * height * 3).ok_or_else(|| Error::Format("truncated PPM body".into()))?;
        match channels {
            3 => Self::from_u8(height, width, 3, body),
            1 => {
                let grey: Vec<u8> = body.chunks(3).map(|p| p[0]).collect();
                Self::from_u8(height, width, 1, &grey)
            }
            c => Err(Error::Format(format!("cannot read PPM into {c} channels"))),
        }
    }

    pub fn load_ppm(path: &Path, channels: usize) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_at(path))?;
        Self::read_ppm(std::io::BufReader::new(f), channels)
    }
}
