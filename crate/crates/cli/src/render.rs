//! Binary PGM and PPM output. Image row `j` holds grid row `j`.

use std::io::Write;

use clap::ValueEnum;
use mpda_core::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RenderMode {
    /// 8-bit grayscale, min-max normalized.
    Gray,
    /// 24-bit blue-white-red, symmetric around zero.
    Diverging,
}

/// Min-max normalized gray levels; a constant field maps to 128.
pub fn gray_levels(values: &[f64]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi <= lo {
        return vec![128; values.len()];
    }
    values.iter().map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8).collect()
}

/// RGB triples scaled by the largest magnitude: negative blue, zero white, positive red.
pub fn diverging_colors(values: &[f64]) -> Vec<[u8; 3]> {
    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            let t = if scale > 0.0 { v / scale } else { 0.0 };
            let fade = (255.0 * (1.0 - t.abs())).round() as u8;
            if t >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        })
        .collect()
}

pub fn write_image<W: Write>(mut out: W, field: &Field, mode: RenderMode) -> std::io::Result<()> {
    let (nx, ny) = (field.grid.nx(), field.grid.ny());
    match mode {
        RenderMode::Gray => {
            write!(out, "P5\n{nx} {ny}\n255\n")?;
            out.write_all(&gray_levels(&field.values))?;
        }
        RenderMode::Diverging => {
            write!(out, "P6\n{nx} {ny}\n255\n")?;
            out.write_all(&diverging_colors(&field.values).concat())?;
        }
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use mpda_core::{Boundary, GridSpec};

    #[test]
    fn gray_endpoints() {
        assert_eq!(gray_levels(&[0.0, 1.0, 1.0, 0.0]), vec![0, 255, 255, 0]);
        assert_eq!(gray_levels(&[-2.0, 0.0, 2.0]), vec![0, 128, 255]);
        assert_eq!(gray_levels(&[3.5; 5]), vec![128; 5]);
    }

    #[test]
    fn diverging_is_symmetric() {
        let c = diverging_colors(&[-2.0, -1.0, 0.0, 1.0, 2.0]);
        assert_eq!(c[0], [0, 0, 255]);
        assert_eq!(c[2], [255, 255, 255]);
        assert_eq!(c[4], [255, 0, 0]);
        assert_eq!(c[1], [128, 128, 255]);
        assert_eq!(c[3], [255, 128, 128]);
        assert_eq!(diverging_colors(&[0.0, 0.0]), vec![[255, 255, 255]; 2]);
    }

    #[test]
    fn image_headers() {
        let grid = GridSpec::unit_square(3, 2, Boundary::Dirichlet).unwrap();
        let field = Field::new(grid, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut pgm = Vec::new();
        write_image(&mut pgm, &field, RenderMode::Gray).unwrap();
        assert!(pgm.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(pgm.len(), 11 + 6);
        let mut ppm = Vec::new();
        write_image(&mut ppm, &field, RenderMode::Diverging).unwrap();
        assert!(ppm.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(ppm.len(), 11 + 18);
    }
}
