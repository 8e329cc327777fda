use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::Pixels;

pub const BORDER: u32 = 2;
pub const PADDING: u32 = 4;

/// Column role, shown as the border color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Reference,
    Result,
}

impl Role {
    pub fn color(self) -> Rgb<u8> {
        match self {
            Role::Source => Rgb([0, 170, 0]),
            Role::Reference => Rgb([220, 0, 0]),
            Role::Result => Rgb([0, 0, 230]),
        }
    }

    /// Source first, result last, references in between.
    pub fn default_columns(count: usize) -> Vec<Role> {
        (0..count)
            .map(|i| match i {
                0 => Role::Source,
                i if i + 1 == count => Role::Result,
                _ => Role::Reference,
            })
            .collect()
    }
}

/// Canvas side for `cells` images of side `size` along one axis.
pub fn canvas_extent(cells: u32, size: u32) -> u32 {
    cells * size + (cells + 1) * PADDING + 2 * cells * BORDER
}

/// Lays out rows of equally sized images on a white canvas with colored
/// borders per column.
pub fn compose_grid(rows: &[Vec<Pixels>], columns: &[Role]) -> Result<RgbImage> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::Validation("grid needs at least one non-empty row".into()))?;
    let size = first.size();
    let cols = columns.len();
    for (r, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::Shape(format!("row {r} has {} images, expected {cols}", row.len())));
        }
        if let Some(p) = row.iter().find(|p| p.size() != size) {
            return Err(Error::Shape(format!("image of size {} in a grid of size {size}", p.size())));
        }
    }
    let s = size as u32;
    let mut canvas = RgbImage::from_pixel(canvas_extent(cols as u32, s), canvas_extent(rows.len() as u32, s), Rgb([255; 3]));
    let cell = s + 2 * BORDER + PADDING;
    for (r, row) in rows.iter().enumerate() {
        for (c, (img, role)) in row.iter().zip(columns).enumerate() {
            let x0 = PADDING + c as u32 * cell;
            let y0 = PADDING + r as u32 * cell;
            for y in 0..s + 2 * BORDER {
                for x in 0..s + 2 * BORDER {
                    canvas.put_pixel(x0 + x, y0 + y, role.color());
                }
            }
            let rgb = img.to_rgb8();
            for (x, y, p) in rgb.enumerate_pixels() {
                canvas.put_pixel(x0 + BORDER + x, y0 + BORDER + y, *p);
            }
        }
    }
    Ok(canvas)
}

/// [`compose_grid`] written as PNG.
pub fn render_grid(rows: &[Vec<Pixels>], columns: &[Role], out_path: &Path) -> Result<RgbImage> {
    let canvas = compose_grid(rows, columns)?;
    canvas.save(out_path).map_err(|source| Error::Image {
        path: out_path.to_path_buf(),
        source,
    })?;
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_three_is_220_wide() {
        let img = Pixels::filled(64, [0.0; 3]);
        let g = compose_grid(&[vec![img.clone(), img.clone(), img]], &Role::default_columns(3)).unwrap();
        assert_eq!(g.width(), 220);
        assert_eq!(g.height(), 64 + 2 * 4 + 2 * 2);
        // border colors in column order
        assert_eq!(*g.get_pixel(4, 4), Role::Source.color());
        assert_eq!(*g.get_pixel(4 + 68 + 4, 4), Role::Reference.color());
        assert_eq!(*g.get_pixel(4 + 2 * 72, 4), Role::Result.color());
        assert_eq!(*g.get_pixel(0, 0), Rgb([255; 3]));
    }

    #[test]
    fn empty_and_ragged_rejected() {
        assert!(compose_grid(&[], &[]).is_err());
        assert!(compose_grid(&[vec![]], &[]).is_err());
        let a = Pixels::filled(8, [0.0; 3]);
        let b = Pixels::filled(16, [0.0; 3]);
        assert!(compose_grid(&[vec![a.clone(), b]], &Role::default_columns(2)).is_err());
        assert!(compose_grid(&[vec![a.clone(), a.clone()], vec![a]], &Role::default_columns(2)).is_err());
    }
}
