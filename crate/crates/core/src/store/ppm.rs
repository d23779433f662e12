//! RGB images and binary PPM (P6, maxval 255) I/O.

use std::path::Path;

use controlsr_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image", "dimensions must be positive"));
        }
        if data.len() != height * width * 3 {
            return Err(Error::validation("image", format!("{}x{} RGB needs {} values, got {}", height, width, height * width * 3, data.len())));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation("image", format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data).expect("fill value within [0, 1]")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// `(1, 3, h, w)` planar tensor.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let hw = self.height * self.width;
        let mut out = vec![T::zero(); 3 * hw];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * hw + i] = T::of(px[c] as f64);
            }
        }
        Tensor::from_vec(&[1, 3, self.height, self.width], out).expect("consistent dims")
    }

    /// Builds an image from batch item `index` of a `(n, 3, h, w)` tensor, clamping to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 || index >= n {
            return Err(Error::validation("image tensor", format!("shape {:?}, item {index}", t.shape())));
        }
        let hw = h * w;
        let plane = &t.data()[index * 3 * hw..(index + 1) * 3 * hw];
        let mut data = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for ch in 0..3 {
                let v = plane[ch * hw + i].as_f64();
                data.push(if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) as f32 });
            }
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn batch_to_tensor<T: Scalar>(images: &[ImageBuffer]) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = images.iter().map(|im| im.to_tensor()).collect();
        Ok(Tensor::cat_batch(&parts)?)
    }

    pub fn batch_from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Vec<ImageBuffer>> {
        (0..t.dim(0)).map(|i| Self::from_tensor(t, i)).collect()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(img: &ImageBuffer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|&v| quantize(v)));
    out
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos || self.pos - start > 9 {
            return Err(Error::parse("ppm", start, format!("expected {what}")));
        }
        Ok(std::str::from_utf8(&self.buf[start..self.pos]).unwrap().parse().unwrap())
    }
}

pub fn parse_ppm(bytes: &[u8]) -> Result<ImageBuffer> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::parse("ppm", 0, "not a binary PPM (missing P6 magic)"));
    }
    let mut h = Header { buf: bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval_at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return Err(Error::parse("ppm", maxval_at, format!("maxval {maxval} unsupported, need 255")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse("ppm", 2, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if h.pos >= bytes.len() || !bytes[h.pos].is_ascii_whitespace() {
        return Err(Error::parse("ppm", h.pos, "missing whitespace after maxval"));
    }
    let start = h.pos + 1;
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::parse("ppm", 2, "image too large"))?;
    let raster = &bytes[start..];
    if raster.len() < need {
        return Err(Error::parse("ppm", start, format!("truncated raster: need {need} bytes, got {}", raster.len())));
    }
    let data = raster[..need].iter().map(|&b| b as f32 / 255.0).collect();
    ImageBuffer::new(height, width, data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes).map_err(|e| match e {
        Error::Parse { offset, reason, .. } => Error::parse(path.display().to_string(), offset, reason),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn white_pixel_reads_as_one() {
        let img = parse_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_quantizes_to_128() {
        let img = ImageBuffer::filled(1, 1, [0.5, 0.0, 1.0]);
        let bytes = encode_ppm(&img);
        assert_eq!(&bytes[bytes.len() - 3..], &[128, 0, 255]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = parse_ppm(b"P6 # made by hand\n2 1 # w h\n255\n\x00\x00\x00\xff\x00\x00").unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 1), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(parse_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
        assert!(parse_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0").unwrap_err().to_string().contains("maxval"));
        assert!(parse_ppm(b"P6\n2 2\n255\n\0\0\0").unwrap_err().to_string().contains("truncated"));
    }

    proptest! {
        #[test]
        fn round_trip_within_half_step(vals in prop::collection::vec(0.0f32..=1.0, 12)) {
            let img = ImageBuffer::new(2, 2, vals).unwrap();
            let back = parse_ppm(&encode_ppm(&img)).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-7);
            }
        }

        #[test]
        fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let mut input = b"P6".to_vec();
            input.extend(bytes);
            let _ = parse_ppm(&input);
        }
    }
}
