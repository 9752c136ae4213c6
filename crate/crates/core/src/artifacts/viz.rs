//! Feature-map mosaics written as binary PGM.
//!
//! Each channel of a post-activation conv map becomes one grayscale tile,
//! min-max normalized on its own; constant channels render mid-gray. Tiles
//! are laid out row-major on a near-square grid with 1-pixel separators.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{forward_full, ModelParams, CONV_LAYER_NAMES};
use crate::tensor::Tensor;

pub const SEPARATOR: u8 = 255;
pub const MID_GRAY: u8 = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapMosaic {
    pub layer: String,
    pub tile_height: usize,
    pub tile_width: usize,
    pub tiles: usize,
    pub grid_cols: usize,
    pub grid_rows: usize,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
    /// `(min, max)` of every channel before normalization.
    pub ranges: Vec<(f32, f32)>,
}

impl FeatureMapMosaic {
    /// Pixels of tile `k` (row-major), for inspection and tests.
    pub fn tile(&self, k: usize) -> Vec<u8> {
        let (r, c) = (k / self.grid_cols, k % self.grid_cols);
        let (y0, x0) = (r * (self.tile_height + 1), c * (self.tile_width + 1));
        let mut out = Vec::with_capacity(self.tile_height * self.tile_width);
        for y in 0..self.tile_height {
            let start = (y0 + y) * self.width + x0;
            out.extend_from_slice(&self.pixels[start..start + self.tile_width]);
        }
        out
    }
}

fn grid_for(tiles: usize) -> (usize, usize) {
    let cols = (tiles as f64).sqrt().ceil().max(1.0) as usize;
    let rows = tiles.div_ceil(cols);
    (cols, rows)
}

pub fn build_mosaic(layer: &str, maps: &Tensor<f32>) -> Result<FeatureMapMosaic> {
    let &[h, w, c] = maps.dims() else {
        return Err(Error::shape(format!(
            "feature maps must be [h, w, c], got {:?}",
            maps.dims()
        )));
    };
    let (cols, rows) = grid_for(c);
    let width = cols * w + cols - 1;
    let height = rows * h + rows - 1;
    let mut pixels = vec![SEPARATOR; width * height];
    let data = maps.data();

    let mut ranges = Vec::with_capacity(c);
    for ch in 0..c {
        let values = (0..h * w).map(|p| data[p * c + ch]);
        let (lo, hi) = values.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        ranges.push((lo, hi));
        let (r, col) = (ch / cols, ch % cols);
        let (y0, x0) = (r * (h + 1), col * (w + 1));
        for y in 0..h {
            for x in 0..w {
                let v = data[(y * w + x) * c + ch];
                let px = if hi > lo {
                    ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
                } else {
                    MID_GRAY
                };
                pixels[(y0 + y) * width + x0 + x] = px;
            }
        }
    }
    Ok(FeatureMapMosaic {
        layer: layer.to_string(),
        tile_height: h,
        tile_width: w,
        tiles: c,
        grid_cols: cols,
        grid_rows: rows,
        width,
        height,
        pixels,
        ranges,
    })
}

/// Resolve a layer selector: `all`, or a comma-separated list of
/// `conv1`/`conv2`/`conv3` (the Keras-style `conv2d`, `conv2d_1`,
/// `conv2d_2` are accepted too). Returns indices into the conv stack.
pub fn parse_layer_selector(selector: &str) -> Result<Vec<usize>> {
    if selector.trim().eq_ignore_ascii_case("all") {
        return Ok(vec![0, 1, 2]);
    }
    let mut out = Vec::new();
    for name in selector.split(',').map(str::trim) {
        let idx = match name {
            "conv1" | "conv2d" => 0,
            "conv2" | "conv2d_1" => 1,
            "conv3" | "conv2d_2" => 2,
            _ => {
                return Err(Error::UnknownLayer {
                    name: name.to_string(),
                    valid: format!("all, {}", CONV_LAYER_NAMES.join(", ")),
                })
            }
        };
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    Ok(out)
}

/// Run `image` through the network and write one mosaic per selected conv
/// layer to `out_dir/<layer>.pgm`.
pub fn export_feature_maps(
    params: &ModelParams<f32>,
    image: &Tensor<f32>,
    selector: &str,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, FeatureMapMosaic)>> {
    let layers = parse_layer_selector(selector)?;
    let fwd = forward_full(params, image)?;
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::with_capacity(layers.len());
    for idx in layers {
        let name = CONV_LAYER_NAMES[idx];
        let maps = fwd
            .activation(name)
            .expect("conv layers are always recorded");
        let mosaic = build_mosaic(name, maps)?;
        let path = out_dir.join(format!("{name}.pgm"));
        write_pgm(&path, mosaic.width, mosaic.height, &mosaic.pixels)?;
        written.push((path, mosaic));
    }
    Ok(written)
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::shape(format!(
            "{} pixels for a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Binary PGM (`P5`, maxval 255).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

/// Parse a binary PGM as written by [`write_pgm`] (comments not supported).
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |reason: &str| Error::Format {
        path: PathBuf::from("<pgm>"),
        reason: reason.to_string(),
    };
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("header ends early"));
        }
        fields
            .push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 file"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    // exactly one whitespace byte separates maxval from the raster
    let payload = &bytes[pos + 1..];
    if payload.len() != width * height {
        return Err(bad("raster size does not match header"));
    }
    Ok((width, height, payload.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_file_layout() {
        let bytes = encode_pgm(1, 1, &[0]).unwrap();
        // "P5\n" + "1 1\n" + "255\n" + one pixel
        assert_eq!(bytes.len(), 3 + 4 + 4 + 1);
        assert_eq!(&bytes[..11], b"P5\n1 1\n255\n");
        assert_eq!(bytes[11], 0);
    }

    #[test]
    fn pgm_round_trip() {
        let pixels: Vec<u8> = (0..35).map(|i| (i * 7) as u8).collect();
        let bytes = encode_pgm(7, 5, &pixels).unwrap();
        assert_eq!(bytes.len() - b"P5\n7 5\n255\n".len(), 35);
        assert_eq!(read_pgm(&bytes).unwrap(), (7, 5, pixels));
        assert!(encode_pgm(2, 2, &[0; 3]).is_err());
    }

    #[test]
    fn mosaic_normalizes_each_channel() {
        // channel 0 ramps 0..3, channel 1 constant, channel 2 ramps down
        let data: Vec<f32> = (0..4)
            .flat_map(|p| [p as f32, 5.0, -(p as f32) * 10.0])
            .collect();
        let maps = Tensor::from_vec(&[2, 2, 3], data).unwrap();
        let m = build_mosaic("conv1", &maps).unwrap();
        assert_eq!((m.grid_cols, m.grid_rows), (2, 2));
        assert_eq!((m.width, m.height), (5, 5));
        assert_eq!(m.tile(0), vec![0, 85, 170, 255]);
        assert_eq!(m.tile(1), vec![MID_GRAY; 4]);
        assert_eq!(m.tile(2), vec![255, 170, 85, 0]);
        assert_eq!(m.ranges[2], (-30.0, 0.0));
        // separator column between tiles
        assert_eq!(m.pixels[2], SEPARATOR);
    }

    #[test]
    fn selector_parsing() {
        assert_eq!(parse_layer_selector("all").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_layer_selector("conv3,conv1").unwrap(), vec![2, 0]);
        assert_eq!(parse_layer_selector("conv2d_1").unwrap(), vec![1]);
        match parse_layer_selector("conv9") {
            Err(Error::UnknownLayer { valid, .. }) => assert!(valid.contains("conv1")),
            other => panic!("{other:?}"),
        }
    }
}
