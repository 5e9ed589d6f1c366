//! 8-bit PNG reading and writing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

fn ingest_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Decoded 8-bit pixels, row-major, `channels` interleaved values per pixel.
pub struct Pixels {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

pub fn read_png(path: &Path) -> Result<Pixels> {
    let file = File::open(path).map_err(|e| ingest_err(path, format!("cannot open: {e}")))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| ingest_err(path, format!("bad png: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ingest_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| ingest_err(path, format!("bad png: {e}")))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ingest_err(path, format!("expected 8-bit png, got {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(ingest_err(path, "indexed png not supported"));
        }
    };
    let (width, height) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(width * height * channels);
    for row in buf.chunks(info.line_size).take(height) {
        data.extend_from_slice(&row[..width * channels]);
    }
    Ok(Pixels {
        width,
        height,
        channels,
        data,
    })
}

pub fn write_png(path: &Path, width: usize, height: usize, channels: usize, data: &[u8]) -> Result<()> {
    let color = match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(Error::Contract(format!("cannot write {channels}-channel png"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let to_err = |e: png::EncodingError| Error::Ingest {
        path: path.to_path_buf(),
        detail: format!("png encode: {e}"),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(data).map_err(to_err)?;
    writer.finish().map_err(to_err)?;
    Ok(())
}
