//! In-memory training samples built from tiles.

use crownseg_core::dsm::{normalize_dsm, DsmChannel, NormalizeMode};
use crownseg_core::taxonomy::ClassSchema;
use crownseg_core::tiling::Tile;
use crownseg_core::{BBox, Grid, Mask};
use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// Index into the class schema.
    pub class_id: u32,
    pub mask: Mask,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub rgb: Grid<[u8; 3]>,
    /// DSM normalized to `[0, 1]` over valid pixels.
    pub dsm: Option<DsmChannel>,
    pub instances: Vec<Instance>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.rgb.width()
    }

    /// Build a sample from a clipped tile. Annotations whose label the schema does not know
    /// are an error; annotations that rasterize to nothing are skipped.
    pub fn from_tile(tile: &Tile, schema: &ClassSchema, dsm_mode: NormalizeMode) -> Result<Self> {
        let s = tile.size;
        let rgb = Grid::from_fn(s, s, |x, y| {
            let i = (y * s + x) * 3;
            [tile.image[i], tile.image[i + 1], tile.image[i + 2]]
        });
        let mut instances = Vec::with_capacity(tile.annotations.len());
        for a in &tile.annotations {
            let class_id = schema.class_id(&a.class_label).ok_or_else(|| {
                Error::Config(format!(
                    "tile {}: label {} is not in the class schema",
                    tile.tile_id, a.class_label
                ))
            })?;
            let mask = a.mask(s, s);
            let Some(bbox) = mask.bbox() else { continue };
            instances.push(Instance {
                class_id,
                mask,
                bbox,
            });
        }
        Ok(Self {
            id: tile.tile_id.clone(),
            rgb,
            dsm: tile.dsm.as_ref().map(|d| normalize_dsm(d, dsm_mode).dsm),
            instances,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let w = self.size() as f64;
        Self {
            id: self.id.clone(),
            rgb: self.rgb.flip_horizontal(),
            dsm: self.dsm.as_ref().map(DsmChannel::flip_horizontal),
            instances: self
                .instances
                .iter()
                .map(|i| Instance {
                    class_id: i.class_id,
                    mask: i.mask.flip_horizontal(),
                    bbox: i.bbox.flip_horizontal(w),
                })
                .collect(),
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let h = self.size() as f64;
        Self {
            id: self.id.clone(),
            rgb: self.rgb.flip_vertical(),
            dsm: self.dsm.as_ref().map(DsmChannel::flip_vertical),
            instances: self
                .instances
                .iter()
                .map(|i| Instance {
                    class_id: i.class_id,
                    mask: i.mask.flip_vertical(),
                    bbox: i.bbox.flip_vertical(h),
                })
                .collect(),
        }
    }

    /// Random horizontal and vertical flips, each with probability one half.
    pub fn random_flip<R: Rng>(&self, rng: &mut R) -> Self {
        let mut s = self.clone();
        if rng.random_bool(0.5) {
            s = s.flip_horizontal();
        }
        if rng.random_bool(0.5) {
            s = s.flip_vertical();
        }
        s
    }

    /// DSM values as a grid, zero where invalid.
    pub fn dsm_values(&self) -> Option<&Grid<f32>> {
        self.dsm.as_ref().map(|d| &d.values)
    }
}
