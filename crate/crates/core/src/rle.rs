//! Column-major run-length encoding compatible with the COCO tools, including their compact
//! string form.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::raster::{Grid, Mask};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rle {
    pub height: usize,
    pub width: usize,
    /// alternating runs starting with background, in column-major pixel order
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn from_mask(mask: &Mask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            height: h,
            width: w,
            counts,
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        let total: u64 = self.counts.iter().map(|&c| u64::from(c)).sum();
        if total != (self.width * self.height) as u64 {
            return Err(Error::MalformedRle(alloc::format!(
                "runs cover {total} pixels, expected {}",
                self.width * self.height
            )));
        }
        let mut g = Grid::filled(self.width, self.height, false);
        let mut idx = 0usize;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for k in idx..idx + c as usize {
                    g.set(k / self.height, k % self.height, true);
                }
            }
            idx += c as usize;
        }
        Ok(Mask::new(g))
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }

    /// Compact ASCII form: delta-coded runs in 5-bit groups offset by 48.
    pub fn counts_string(&self) -> String {
        let mut s = String::new();
        for i in 0..self.counts.len() {
            let mut x = i64::from(self.counts[i]);
            if i > 2 {
                x -= i64::from(self.counts[i - 2]);
            }
            loop {
                let mut c = (x & 0x1f) as u8;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                s.push((c + 48) as char);
                if !more {
                    break;
                }
            }
        }
        s
    }

    pub fn from_counts_string(height: usize, width: usize, s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let Some(&b) = bytes.get(p) else {
                    return Err(Error::MalformedRle("truncated counts string".into()));
                };
                if !(48..48 + 64).contains(&b) || k > 12 {
                    return Err(Error::MalformedRle(alloc::format!("bad byte {b} at {p}")));
                }
                let c = i64::from(b - 48);
                x |= (c & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
            }
            if counts.len() > 2 {
                x += i64::from(counts[counts.len() - 2]);
            }
            let v = u32::try_from(x)
                .map_err(|_| Error::MalformedRle(alloc::format!("negative run {x}")))?;
            counts.push(v);
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }
}
