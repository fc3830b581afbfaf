//! Binary PPM output and tiled image grids.

use diffcore::Tensor;

use crate::{Error, Result};

/// Width of the white gutter between tiles, in pixels.
pub const GUTTER: usize = 2;

fn quantize(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit interleaved RGB image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8 {
    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, data: vec![value; width * height * 3] }
    }

    /// Converts a `[3, H, W]` image in `[0, 1]`.
    pub fn from_chw(img: &Tensor) -> Result<Self> {
        let s = img.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dims("image layout", "[3, H, W]", s));
        }
        let (h, w) = (s[1], s[2]);
        let hw = h * w;
        let src = img.data();
        let mut data = Vec::with_capacity(3 * hw);
        for p in 0..hw {
            for c in 0..3 {
                data.push(quantize(src[c * hw + p]));
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let k = 3 * (y * self.width + x);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }

    fn blit(&mut self, tile: &Rgb8, x0: usize, y0: usize) {
        for y in 0..tile.height {
            let dst = 3 * ((y0 + y) * self.width + x0);
            let src = 3 * y * tile.width;
            self.data[dst..dst + 3 * tile.width].copy_from_slice(&tile.data[src..src + 3 * tile.width]);
        }
    }

    /// P6 encoding with maxval 255.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("malformed PPM: {msg}"));
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
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("expected P6 with maxval 255"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixel data"))?.to_vec();
        if data.len() != width * height * 3 {
            return Err(bad("pixel data length"));
        }
        Ok(Self { width, height, data })
    }
}

/// Lays out equally sized tiles row by row with white gutters.
pub fn compose_grid(tiles: &[Vec<Rgb8>]) -> Result<Rgb8> {
    let rows = tiles.len();
    let cols = tiles.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return Err(Error::Config("grid needs at least one tile".into()));
    }
    let (tw, th) = (tiles[0][0].width, tiles[0][0].height);
    for row in tiles {
        if row.len() != cols {
            return Err(Error::dims("grid row length", cols, row.len()));
        }
        if let Some(t) = row.iter().find(|t| (t.width, t.height) != (tw, th)) {
            return Err(Error::dims("tile size", (tw, th), (t.width, t.height)));
        }
    }
    let width = cols * tw + (cols - 1) * GUTTER;
    let height = rows * th + (rows - 1) * GUTTER;
    let mut out = Rgb8::filled(width, height, 255);
    for (r, row) in tiles.iter().enumerate() {
        for (c, tile) in row.iter().enumerate() {
            out.blit(tile, c * (tw + GUTTER), r * (th + GUTTER));
        }
    }
    Ok(out)
}
