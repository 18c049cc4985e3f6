//! Overlay images: instance masks tinted by class colour, prompt markers and side-by-side
//! panels.

use crownseg_core::color::class_color;
use crownseg_core::{Grid, Mask};

const ALPHA: f64 = 0.45;
const GAP: usize = 4;
const GAP_COLOUR: [u8; 3] = [255, 255, 255];

/// One instance to draw: its mask and class name.
pub struct Overlay<'a> {
    pub mask: &'a Mask,
    pub class: &'a str,
}

fn blend(a: [u8; 3], b: [u8; 3], alpha: f64) -> [u8; 3] {
    [0, 1, 2].map(|i| (f64::from(a[i]) * (1.0 - alpha) + f64::from(b[i]) * alpha).round() as u8)
}

/// Tint each mask with its class colour and outline it in full colour.
pub fn draw_masks(rgb: &Grid<[u8; 3]>, overlays: &[Overlay]) -> Grid<[u8; 3]> {
    let mut out = rgb.clone();
    let (w, h) = (rgb.width(), rgb.height());
    for o in overlays {
        if o.mask.width() != w || o.mask.height() != h {
            continue;
        }
        let colour = class_color(o.class);
        for y in 0..h {
            for x in 0..w {
                if !o.mask.get(x, y) {
                    continue;
                }
                let edge = x == 0
                    || y == 0
                    || x + 1 == w
                    || y + 1 == h
                    || !o.mask.get(x - 1, y)
                    || !o.mask.get(x + 1, y)
                    || !o.mask.get(x, y - 1)
                    || !o.mask.get(x, y + 1);
                let px = if edge { colour } else { blend(*out.get(x, y), colour, ALPHA) };
                out.set(x, y, px);
            }
        }
    }
    out
}

/// Plus-shaped marker of half-length `arm` with a dark border for contrast.
pub fn draw_cross(img: &mut Grid<[u8; 3]>, cx: usize, cy: usize, arm: usize, colour: [u8; 3]) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let arm = arm as i64;
    let mut put = |x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && x < w && y < h {
            img.set(x as usize, y as usize, c);
        }
    };
    let (cx, cy) = (cx as i64, cy as i64);
    for d in -arm - 1..=arm + 1 {
        for o in [-1, 1] {
            put(cx + d, cy + o, [0, 0, 0]);
            put(cx + o, cy + d, [0, 0, 0]);
        }
    }
    for d in -arm..=arm {
        put(cx + d, cy, colour);
        put(cx, cy + d, colour);
    }
}

/// Images laid out left to right in rows, padded with a white gap. Rows may differ in height.
pub fn grid_panel(rows: &[Vec<Grid<[u8; 3]>>]) -> Grid<[u8; 3]> {
    let width = rows
        .iter()
        .map(|r| r.iter().map(|g| g.width() + GAP).sum::<usize>() + GAP)
        .max()
        .unwrap_or(GAP);
    let height = rows
        .iter()
        .map(|r| r.iter().map(Grid::height).max().unwrap_or(0) + GAP)
        .sum::<usize>()
        + GAP;
    let mut out = Grid::filled(width, height, GAP_COLOUR);
    let mut y0 = GAP;
    for row in rows {
        let mut x0 = GAP;
        for img in row {
            for y in 0..img.height() {
                for x in 0..img.width() {
                    out.set(x0 + x, y0 + y, *img.get(x, y));
                }
            }
            x0 += img.width() + GAP;
        }
        y0 += row.iter().map(Grid::height).max().unwrap_or(0) + GAP;
    }
    out
}
