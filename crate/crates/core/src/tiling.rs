//! Orthomosaic tiling, tile filters, annotation clipping and spatial split assignment.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::detection::BBox;
use crate::dsm::DsmChannel;
use crate::error::{Error, Result};
use crate::geom::{rasterize, MultiPolygon, Point};
use crate::raster::{Grid, Mask};

/// Affine pixel → world map in GDAL order:
/// `x = c0 + c1 * col + c2 * row`, `y = c3 + c4 * col + c5 * row`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GeoTransform(pub [f64; 6]);

impl GeoTransform {
    pub const IDENTITY: GeoTransform = GeoTransform([0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    /// North-up transform with square pixels of `resolution` world units.
    pub fn north_up(origin_x: f64, origin_y: f64, resolution: f64) -> Self {
        Self([origin_x, resolution, 0.0, origin_y, 0.0, -resolution])
    }

    pub fn to_world(&self, col: f64, row: f64) -> Point {
        let g = &self.0;
        Point::new(g[0] + g[1] * col + g[2] * row, g[3] + g[4] * col + g[5] * row)
    }

    fn det(&self) -> f64 {
        self.0[1] * self.0[5] - self.0[2] * self.0[4]
    }

    pub fn to_pixel(&self, p: Point) -> Result<Point> {
        let g = &self.0;
        let det = self.det();
        if det == 0.0 || !det.is_finite() {
            return Err(Error::InvalidGeometry(format!("singular geotransform")));
        }
        let (dx, dy) = (p.x - g[0], p.y - g[3]);
        Ok(Point::new(
            (g[5] * dx - g[2] * dy) / det,
            (-g[4] * dx + g[1] * dy) / det,
        ))
    }

    /// Transform of a window whose top-left pixel is `(col, row)` in this raster.
    pub fn offset(&self, col: f64, row: f64) -> Self {
        let o = self.to_world(col, row);
        let g = self.0;
        Self([o.x, g[1], g[2], o.y, g[4], g[5]])
    }

    /// Ground sampling distance along the column axis.
    pub fn pixel_resolution(&self) -> f64 {
        libm::hypot(self.0[1], self.0[4])
    }
}

/// Georeferenced RGB raster with an optional DSM band.
#[derive(Clone, Debug, PartialEq)]
pub struct Orthomosaic {
    raster_id: String,
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    rgb: Vec<u8>,
    dsm: Option<Vec<f32>>,
    nodata: f64,
    geotransform: GeoTransform,
}

impl Orthomosaic {
    pub fn new(
        raster_id: impl Into<String>,
        width: usize,
        height: usize,
        rgb: Vec<u8>,
        dsm: Option<Vec<f32>>,
        nodata: f64,
        geotransform: GeoTransform,
    ) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "RGB bands hold {} values, expected {}",
                rgb.len(),
                width * height * 3
            )));
        }
        if let Some(d) = &dsm {
            if d.len() != width * height {
                return Err(Error::ShapeMismatch(format!(
                    "DSM band holds {} values, expected {}",
                    d.len(),
                    width * height
                )));
            }
        }
        if !(geotransform.pixel_resolution() > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "pixel resolution must be positive"
            )));
        }
        Ok(Self {
            raster_id: raster_id.into(),
            width,
            height,
            rgb,
            dsm,
            nodata,
            geotransform,
        })
    }

    pub fn raster_id(&self) -> &str {
        &self.raster_id
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn band_count(&self) -> usize {
        3 + usize::from(self.dsm.is_some())
    }
    pub fn rgb(&self) -> &[u8] {
        &self.rgb
    }
    pub fn dsm(&self) -> Option<&[f32]> {
        self.dsm.as_deref()
    }
    pub fn nodata(&self) -> f64 {
        self.nodata
    }
    pub fn geotransform(&self) -> GeoTransform {
        self.geotransform
    }
    pub fn pixel_resolution(&self) -> f64 {
        self.geotransform.pixel_resolution()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrownAnnotation {
    pub instance_id: u64,
    pub class_label: String,
    /// World coordinates.
    pub polygon: MultiPolygon,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AoiPurpose {
    Include,
    ExcludeMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aoi {
    /// World coordinates.
    pub polygons: MultiPolygon,
    pub purpose: AoiPurpose,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            "unassigned" => Some(Split::Unassigned),
            _ => None,
        }
    }
}

/// Annotation clipped to a tile, in tile-pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TileAnnotation {
    pub instance_id: u64,
    pub class_label: String,
    pub polygon: MultiPolygon,
    pub visibility_fraction: f64,
}

impl TileAnnotation {
    pub fn mask(&self, width: usize, height: usize) -> Mask {
        rasterize(&self.polygon, width, height)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub tile_id: String,
    /// Pixel offset of the top-left corner in the parent raster.
    pub origin: (usize, usize),
    pub size: usize,
    /// Interleaved RGB, `size * size * 3`.
    pub image: Vec<u8>,
    pub dsm: Option<DsmChannel>,
    /// World → tile-pixel mapping for this window.
    pub geotransform: GeoTransform,
    /// World-coordinate annotations awaiting [`clip_annotations_to_tile`].
    pub candidates: Vec<CrownAnnotation>,
    pub annotations: Vec<TileAnnotation>,
    pub split: Split,
    pub black_fraction: f64,
}

impl Tile {
    /// Pixels that are not black border (all bands at nodata).
    pub fn valid_mask(&self) -> Grid<bool> {
        match &self.dsm {
            Some(d) => d.valid.clone(),
            None => Grid::from_fn(self.size, self.size, |x, y| {
                let i = (y * self.size + x) * 3;
                self.image[i..i + 3].iter().any(|&v| v != 0)
            }),
        }
    }

    pub fn center_world(&self) -> Point {
        let half = self.size as f64 * 0.5;
        self.geotransform.to_world(half, half)
    }
}

pub type TileSet = Vec<Tile>;

/// Origins along one axis: stride `tile * (1 - overlap)`, last origin snapped to the edge.
pub fn axis_origins(len: usize, tile: usize, overlap: f64) -> Vec<usize> {
    let stride = libm::floor(tile as f64 * (1.0 - overlap)).max(1.0) as usize;
    let mut out = Vec::new();
    let mut o = 0;
    while o + tile <= len {
        out.push(o);
        o += stride;
    }
    if let Some(&last) = out.last() {
        if last + tile < len {
            out.push(len - tile);
        }
    }
    out.dedup();
    out
}

fn validate_tiling(width: usize, height: usize, tile_size: usize, overlap: f64) -> Result<()> {
    if tile_size == 0 {
        return Err(Error::InvalidConfig(format!("tile_size must be >= 1")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidConfig(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    if width < tile_size || height < tile_size {
        return Err(Error::RasterTooSmall {
            width,
            height,
            tile_size,
        });
    }
    Ok(())
}

/// All tile origins `(x, y)` in row-major order.
pub fn tile_origins(
    width: usize,
    height: usize,
    tile_size: usize,
    overlap: f64,
) -> Result<Vec<(usize, usize)>> {
    validate_tiling(width, height, tile_size, overlap)?;
    let xs = axis_origins(width, tile_size, overlap);
    let ys = axis_origins(height, tile_size, overlap);
    Ok(ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect())
}

fn aoi_in_pixels(aoi: &[Aoi], gt: &GeoTransform) -> Result<Vec<(MultiPolygon, AoiPurpose)>> {
    aoi.iter()
        .map(|a| {
            a.polygons.validate()?;
            let mut err = None;
            let px = a.polygons.map_points(|p| match gt.to_pixel(p) {
                Ok(q) => q,
                Err(e) => {
                    err = Some(e);
                    p
                }
            });
            match err {
                Some(e) => Err(e),
                None => Ok((px, a.purpose)),
            }
        })
        .collect()
}

/// Cut `raster` into square tiles. Pixels outside the include AOIs (when any) or inside an
/// exclude mask are set to the nodata value before the black fraction is measured.
pub fn tile_orthomosaic(
    raster: &Orthomosaic,
    aoi: &[Aoi],
    tile_size: usize,
    overlap: f64,
) -> Result<TileSet> {
    let origins = tile_origins(raster.width, raster.height, tile_size, overlap)?;
    let aoi_px = aoi_in_pixels(aoi, &raster.geotransform)?;
    let has_include = aoi_px.iter().any(|(_, p)| *p == AoiPurpose::Include);
    let fill = raster.nodata.clamp(0.0, 255.0) as u8;
    let nodata_f32 = raster.nodata as f32;

    let mut tiles = Vec::with_capacity(origins.len());
    for (ox, oy) in origins {
        let s = tile_size;
        let mut keep = Grid::filled(s, s, true);
        if !aoi_px.is_empty() {
            let shift = |p: Point| Point::new(p.x - ox as f64, p.y - oy as f64);
            let mut inc = if has_include {
                Grid::filled(s, s, false)
            } else {
                Grid::filled(s, s, true)
            };
            for (poly, purpose) in &aoi_px {
                let m = rasterize(&poly.map_points(shift), s, s);
                for (k, &v) in inc.data_mut().iter_mut().zip(m.grid().data()) {
                    match purpose {
                        AoiPurpose::Include => *k |= v,
                        AoiPurpose::ExcludeMask => {}
                    }
                }
            }
            for (poly, purpose) in &aoi_px {
                if *purpose == AoiPurpose::ExcludeMask {
                    let m = rasterize(&poly.map_points(shift), s, s);
                    for (k, &v) in inc.data_mut().iter_mut().zip(m.grid().data()) {
                        *k &= !v;
                    }
                }
            }
            keep = inc;
        }

        let mut image = Vec::with_capacity(s * s * 3);
        let mut dsm_vals = raster.dsm.as_ref().map(|_| Vec::with_capacity(s * s));
        for y in 0..s {
            let src = ((oy + y) * raster.width + ox) * 3;
            image.extend_from_slice(&raster.rgb[src..src + s * 3]);
            if let (Some(out), Some(d)) = (dsm_vals.as_mut(), raster.dsm.as_ref()) {
                let src = (oy + y) * raster.width + ox;
                out.extend_from_slice(&d[src..src + s]);
            }
        }
        for (i, &k) in keep.data().iter().enumerate() {
            if !k {
                image[i * 3..i * 3 + 3].fill(fill);
                if let Some(d) = dsm_vals.as_mut() {
                    d[i] = nodata_f32;
                }
            }
        }
        let black = Grid::from_fn(s, s, |x, y| {
            let i = y * s + x;
            let rgb_black = image[i * 3..i * 3 + 3]
                .iter()
                .all(|&v| v == fill);
            let dsm_black = dsm_vals
                .as_ref()
                .map_or(true, |d| f64::from(d[i]) == raster.nodata);
            rgb_black && dsm_black
        });
        let n_black = black.data().iter().filter(|&&b| b).count();
        let dsm = match dsm_vals {
            Some(v) => Some(DsmChannel::new(
                Grid::from_vec(s, s, v)?,
                black.map(|b| !b),
            )?),
            None => None,
        };
        tiles.push(Tile {
            tile_id: format!("{}_{}_{}", raster.raster_id, ox, oy),
            origin: (ox, oy),
            size: s,
            image,
            dsm,
            geotransform: raster.geotransform.offset(ox as f64, oy as f64),
            candidates: Vec::new(),
            annotations: Vec::new(),
            split: Split::Unassigned,
            black_fraction: n_black as f64 / (s * s) as f64,
        });
    }
    Ok(tiles)
}

/// Keep annotations that intersect any include AOI and whose geometry is valid.
pub fn annotations_in_aoi(annotations: &[CrownAnnotation], aoi: &[Aoi]) -> Vec<CrownAnnotation> {
    let includes: Vec<&Aoi> = aoi
        .iter()
        .filter(|a| a.purpose == AoiPurpose::Include)
        .collect();
    annotations
        .iter()
        .filter(|a| a.polygon.validate().is_ok())
        .filter(|a| includes.is_empty() || includes.iter().any(|i| i.polygons.intersects(&a.polygon)))
        .cloned()
        .collect()
}

/// Attach every annotation whose bounding box touches a tile window as a clipping candidate.
pub fn attach_annotations(tiles: &mut [Tile], annotations: &[CrownAnnotation]) -> Result<()> {
    for tile in tiles.iter_mut() {
        let window = BBox::new(0.0, 0.0, tile.size as f64, tile.size as f64);
        for a in annotations {
            let mut bb: Option<BBox> = None;
            for poly in &a.polygon.0 {
                for &p in &poly.exterior {
                    let q = tile.geotransform.to_pixel(p)?;
                    bb = Some(match bb {
                        None => BBox::new(q.x, q.y, q.x, q.y),
                        Some(b) => BBox::new(b.x0.min(q.x), b.y0.min(q.y), b.x1.max(q.x), b.y1.max(q.y)),
                    });
                }
            }
            if let Some(b) = bb {
                if b.x1 > window.x0 && b.x0 < window.x1 && b.y1 > window.y0 && b.y0 < window.y1 {
                    tile.candidates.push(a.clone());
                }
            }
        }
    }
    Ok(())
}

/// Counts of annotations removed by [`clip_annotations_to_tile`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClipReport {
    pub kept: usize,
    pub low_visibility: usize,
    pub degenerate: usize,
}

/// Intersect candidate annotations with the tile window; keep those with at least
/// `min_visibility` of their area inside.
pub fn clip_annotations_to_tile(mut tile: Tile, min_visibility: f64) -> Result<(Tile, ClipReport)> {
    if !(min_visibility > 0.0 && min_visibility <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "min_visibility {min_visibility} outside (0, 1]"
        )));
    }
    let window = BBox::new(0.0, 0.0, tile.size as f64, tile.size as f64);
    let mut report = ClipReport::default();
    let gt = tile.geotransform;
    for a in core::mem::take(&mut tile.candidates) {
        let mut err = None;
        let px = a.polygon.map_points(|p| match gt.to_pixel(p) {
            Ok(q) => q,
            Err(e) => {
                err = Some(e);
                p
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        // area ratios are invariant under the affine world -> pixel map
        let full = px.area();
        let clipped = px.clip_to_rect(&window);
        let inside = clipped.area();
        if full <= 0.0 || inside <= 0.0 || clipped.is_empty() {
            report.degenerate += 1;
            continue;
        }
        let visibility = (inside / full).min(1.0);
        if visibility < min_visibility {
            report.low_visibility += 1;
            continue;
        }
        report.kept += 1;
        tile.annotations.push(TileAnnotation {
            instance_id: a.instance_id,
            class_label: a.class_label,
            polygon: clipped,
            visibility_fraction: visibility,
        });
    }
    Ok((tile, report))
}

/// Drop tiles that are mostly black border or (optionally) carry no annotations.
pub fn filter_tiles(tiles: TileSet, max_black_fraction: f64, require_labels: bool) -> TileSet {
    tiles
        .into_iter()
        .filter(|t| t.black_fraction <= max_black_fraction)
        .filter(|t| !require_labels || !t.annotations.is_empty())
        .collect()
}

/// Assign each tile to the split whose polygon contains the tile center.
pub fn assign_splits(
    mut tiles: TileSet,
    split_polygons: &BTreeMap<Split, MultiPolygon>,
) -> Result<TileSet> {
    let entries: Vec<(&Split, &MultiPolygon)> = split_polygons.iter().collect();
    for (i, (sa, pa)) in entries.iter().enumerate() {
        pa.validate()?;
        for (sb, pb) in entries.iter().skip(i + 1) {
            if pa.interiors_overlap(pb) {
                return Err(Error::AmbiguousSplit(
                    String::from(sa.as_str()),
                    String::from(sb.as_str()),
                ));
            }
        }
    }
    for tile in tiles.iter_mut() {
        let c = tile.center_world();
        tile.split = entries
            .iter()
            .find(|(_, poly)| poly.contains(c))
            .map_or(Split::Unassigned, |(s, _)| **s);
    }
    Ok(tiles)
}
