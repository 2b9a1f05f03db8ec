//! 8-bit RGB images: PNG through the `png` crate, binary PPM by hand.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(
                "image",
                format!("{width}×{height} RGB needs {} bytes, got {}", width * height * 3, data.len()),
            ));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Row-major interleaved RGB bytes.
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Extends right and bottom edges by replication to the next multiple of 16.
    pub fn pad_to_16(&self) -> RgbImage {
        let w = self.width.div_ceil(16) * 16;
        let h = self.height.div_ceil(16) * 16;
        if (w, h) == (self.width, self.height) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in 0..h {
            let sy = y.min(self.height.saturating_sub(1));
            for x in 0..w {
                let sx = x.min(self.width.saturating_sub(1));
                let i = (sy * self.width + sx) * 3;
                data.extend_from_slice(&self.data[i..i + 3]);
            }
        }
        RgbImage { width: w, height: h, data }
    }

    /// Square `size × size` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<RgbImage> {
        self.crop_rect(x0, y0, size, size)
    }

    pub fn crop_rect(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<RgbImage> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(
                "crop",
                format!("{width}×{height} at ({x0}, {y0}) exceeds {}×{}", self.width, self.height),
            ));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        RgbImage::new(width, height, data)
    }
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Reads a PNG or, by extension, a binary PPM.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    if is_ppm(path) {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return decode_ppm(&bytes).map_err(|detail| Error::Image {
            path: path.to_owned(),
            detail,
        });
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_png(BufReader::new(file)).map_err(|detail| Error::Image {
        path: path.to_owned(),
        detail,
    })
}

/// Writes a PNG or, by extension, a binary PPM.
pub fn save_image(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_ppm(path) {
        let mut bytes = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
        bytes.extend_from_slice(&img.data);
        return std::fs::write(path, bytes).map_err(|e| Error::io(path, e));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let image_err = |e: png::EncodingError| Error::Image {
        path: path.to_owned(),
        detail: e.to_string(),
    };
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(image_err)?;
    writer.write_image_data(&img.data).map_err(image_err)?;
    writer.finish().map_err(image_err)
}

fn decode_png<R: std::io::BufRead + std::io::Seek>(reader: R) -> Result<RgbImage, String> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
        png::ColorType::Indexed => return Err("unexpanded palette image".into()),
    };
    RgbImage::new(w, h, data).map_err(|e| e.to_string())
}

fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PPM header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "bad PPM header")?);
    }
    if fields[0] != "P6" {
        return Err(format!("unsupported PPM magic {:?}", fields[0]));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| format!("bad PPM header field {s:?}"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(format!("only 8-bit PPM is supported, maxval {max}"));
    }
    let data = bytes.get(pos + 1..).ok_or("truncated PPM payload")?;
    if data.len() < w * h * 3 {
        return Err("truncated PPM payload".into());
    }
    RgbImage::new(w, h, data[..w * h * 3].to_vec()).map_err(|e| e.to_string())
}
