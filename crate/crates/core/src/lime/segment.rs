use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use super::LimeError;

/// How an instance is split into segments that LIME toggles on and off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all_fields = "camelCase")]
pub enum SegmentationSpec {
    /// One segment per feature; "off" replaces the feature with its neutral
    /// value.
    Tabular { neutral_values: Vec<f64> },
    /// Fixed grid of `cell_w` x `cell_h` cells; "off" paints the cell with
    /// the neutral color.
    ImageGrid {
        width: usize,
        height: usize,
        cell_w: usize,
        cell_h: usize,
        neutral_color: [u8; 3],
    },
}

impl SegmentationSpec {
    pub fn segment_count(&self) -> usize {
        match self {
            SegmentationSpec::Tabular { neutral_values } => neutral_values.len(),
            SegmentationSpec::ImageGrid {
                width,
                height,
                cell_w,
                cell_h,
                ..
            } => width.div_ceil(*cell_w) * height.div_ceil(*cell_h),
        }
    }

    pub fn validate(&self) -> Result<(), LimeError> {
        match self {
            SegmentationSpec::Tabular { neutral_values } if neutral_values.is_empty() => {
                Err(LimeError::Config("tabular segmentation needs d >= 1".into()))
            }
            SegmentationSpec::ImageGrid {
                width,
                height,
                cell_w,
                cell_h,
                ..
            } if *width == 0 || *height == 0 || *cell_w == 0 || *cell_h == 0 => {
                Err(LimeError::Config("image grid dimensions must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Pixel-to-segment assignment for a grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    pub width: usize,
    pub height: usize,
    pub segment_count: usize,
    ids: Vec<u32>,
}

impl SegmentMap {
    pub fn segment_of(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }
}

/// Row-major grid segmentation. Edge cells are truncated to the image; a
/// cell larger than the image yields a single segment.
pub fn segment_grid(
    width: usize,
    height: usize,
    cell_w: usize,
    cell_h: usize,
) -> Result<SegmentMap, LimeError> {
    if width == 0 || height == 0 || cell_w == 0 || cell_h == 0 {
        return Err(LimeError::Config("grid dimensions must be positive".into()));
    }
    let cols = width.div_ceil(cell_w);
    let rows = height.div_ceil(cell_h);
    let mut ids = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            ids.push(((y / cell_h) * cols + x / cell_w) as u32);
        }
    }
    Ok(SegmentMap {
        width,
        height,
        segment_count: cols * rows,
        ids,
    })
}

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, LimeError> {
        if pixels.len() != width * height * 3 {
            return Err(LimeError::Instance(format!(
                "{}x{} image needs {} bytes, got {}",
                width,
                height,
                width * height * 3,
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
            pixels: color.repeat(width * height),
        }
    }

    /// Reads a binary PPM (`P6`, maxval 255).
    pub fn read_ppm<R: Read>(reader: R) -> Result<Self, LimeError> {
        let mut reader = BufReader::new(reader);
        let mut tokens = Vec::new();
        while tokens.len() < 4 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(io_err)? == 0 {
                return Err(LimeError::Instance("truncated PPM header".into()));
            }
            let content = line.split('#').next().unwrap_or("");
            tokens.extend(content.split_whitespace().map(str::to_string));
        }
        if tokens[0] != "P6" {
            return Err(LimeError::Instance(format!("unsupported PPM magic {}", tokens[0])));
        }
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| LimeError::Instance(format!("bad PPM header value {t:?}")))
        };
        let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
        if maxval != 255 || tokens.len() != 4 {
            return Err(LimeError::Instance("only maxval 255 PPM headers on separate lines are supported".into()));
        }
        let mut pixels = vec![0u8; width * height * 3];
        reader.read_exact(&mut pixels).map_err(io_err)?;
        Self::new(width, height, pixels)
    }

    pub fn write_ppm<W: Write>(&self, mut writer: W) -> Result<(), LimeError> {
        write!(writer, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        writer.write_all(&self.pixels).map_err(io_err)
    }
}

fn io_err(e: std::io::Error) -> LimeError {
    LimeError::Instance(format!("io: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(map: &SegmentMap) -> Vec<usize> {
        let mut c = vec![0; map.segment_count];
        for &id in map.ids() {
            c[id as usize] += 1;
        }
        c
    }

    #[test]
    fn four_by_four_with_two_by_two_cells() {
        let map = segment_grid(4, 4, 2, 2).unwrap();
        assert_eq!(map.segment_count, 4);
        assert_eq!(counts(&map), vec![4, 4, 4, 4]);
    }

    #[test]
    fn ragged_right_column() {
        let map = segment_grid(5, 4, 2, 2).unwrap();
        assert_eq!(map.segment_count, 6);
        // cells 2 and 5 are the 1-pixel-wide right column
        assert_eq!(counts(&map), vec![4, 4, 2, 4, 4, 2]);
        assert_eq!(map.segment_of(4, 0), 2);
        assert_eq!(map.segment_of(4, 3), 5);
    }

    #[test]
    fn closed_form_index_on_64_grid() {
        let map = segment_grid(64, 64, 8, 8).unwrap();
        assert_eq!(map.segment_count, 64);
        assert_eq!(map.segment_of(63, 63), 63);
        for y in (0..64).step_by(7) {
            for x in (0..64).step_by(5) {
                assert_eq!(map.segment_of(x, y) as usize, (y / 8) * 8 + x / 8);
            }
        }
    }

    #[test]
    fn oversized_cell_is_single_segment() {
        let map = segment_grid(3, 2, 10, 10).unwrap();
        assert_eq!(map.segment_count, 1);
        assert!(map.ids().iter().all(|&id| id == 0));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(segment_grid(0, 4, 2, 2).is_err());
        assert!(segment_grid(4, 4, 0, 2).is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(2, 1, vec![1, 2, 3, 250, 251, 252]).unwrap();
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(RgbImage::read_ppm(&buf[..]).unwrap(), img);
    }
}
