//! COCO-style ground truth and result files.
//!
//! Category ids are 1-based positions in the class schema; the class id used in memory is the
//! category's position in the file's category list. Coordinates are tile pixels.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crownseg_core::dsm::{normalize_dsm, DsmChannel, NormalizeMode};
use crownseg_core::geom::{rasterize, MultiPolygon, Point, Polygon};
use crownseg_core::metrics::{EvalImage, GroundTruth};
use crownseg_core::rle::Rle;
use crownseg_core::taxonomy::ClassSchema;
use crownseg_core::tiling::{Split, Tile};
use crownseg_core::{BBox, Detection, Grid, Mask};
use serde::{Deserialize, Serialize};

use crate::data::{Instance, Sample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoRle {
    /// `[height, width]`.
    pub size: [usize; 2],
    pub counts: String,
}

impl CocoRle {
    pub fn from_mask(mask: &Mask) -> Self {
        let r = Rle::from_mask(mask);
        Self {
            size: [r.height, r.width],
            counts: r.counts_string(),
        }
    }

    pub fn to_mask(&self) -> Result<Mask> {
        Ok(Rle::from_counts_string(self.size[0], self.size[1], &self.counts)?.to_mask()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Segmentation {
    /// Flat `[x0, y0, x1, y1, ...]` outlines, one per part.
    Polygons(Vec<Vec<f64>>),
    Rle(CocoRle),
}

impl Segmentation {
    pub fn to_mask(&self, width: usize, height: usize) -> Result<Mask> {
        match self {
            Segmentation::Polygons(parts) => {
                let polys = parts
                    .iter()
                    .filter(|p| p.len() >= 6)
                    .map(|p| {
                        Polygon::new(p.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect(), Vec::new())
                    })
                    .collect();
                Ok(rasterize(&MultiPolygon(polys), width, height))
            }
            Segmentation::Rle(r) => {
                if r.size != [height, width] {
                    return Err(Error::Usage(format!(
                        "RLE of size {:?} on a {width}x{height} image",
                        r.size
                    )));
                }
                r.to_mask()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dsm_file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tile_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<[usize; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub segmentation: Segmentation,
    pub area: f64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visibility_fraction: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CocoDataset {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<CocoRle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_score: Option<f64>,
}

fn xywh(b: &BBox) -> [f64; 4] {
    [b.x0, b.y0, b.width(), b.height()]
}

fn from_xywh(b: &[f64; 4]) -> BBox {
    BBox::new(b[0], b[1], b[0] + b[2], b[1] + b[3])
}

pub fn categories(schema: &ClassSchema) -> Vec<CocoCategory> {
    schema
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| CocoCategory {
            id: i as u64 + 1,
            name: c.clone(),
        })
        .collect()
}

impl CocoDataset {
    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name.clone()).collect()
    }

    fn category_index(&self) -> BTreeMap<u64, u32> {
        self.categories
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i as u32))
            .collect()
    }

    /// Ground truth per image in file order.
    pub fn ground_truth(&self) -> Result<Vec<(u64, Vec<GroundTruth>)>> {
        let cats = self.category_index();
        let mut by_image: BTreeMap<u64, Vec<GroundTruth>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        let sizes: BTreeMap<u64, (usize, usize)> =
            self.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        for a in &self.annotations {
            let &(w, h) = sizes
                .get(&a.image_id)
                .ok_or_else(|| Error::Usage(format!("annotation {} refers to unknown image {}", a.id, a.image_id)))?;
            let &class_id = cats
                .get(&a.category_id)
                .ok_or_else(|| Error::Usage(format!("annotation {} has unknown category {}", a.id, a.category_id)))?;
            let mask = a.segmentation.to_mask(w, h)?;
            let bbox = mask.bbox().unwrap_or_else(|| from_xywh(&a.bbox));
            by_image.get_mut(&a.image_id).expect("known image").push(GroundTruth {
                class_id,
                bbox,
                mask: Some(mask),
            });
        }
        Ok(self
            .images
            .iter()
            .map(|i| (i.id, by_image.remove(&i.id).unwrap_or_default()))
            .collect())
    }
}

/// Ground truth of one split of a tile set. Labels are mapped through the schema; unknown
/// labels are an error.
pub fn tiles_to_coco(tiles: &[&Tile], schema: &ClassSchema) -> Result<CocoDataset> {
    let mut ds = CocoDataset {
        categories: categories(schema),
        ..CocoDataset::default()
    };
    let mut next_ann = 1;
    for (k, t) in tiles.iter().enumerate() {
        let image_id = k as u64 + 1;
        ds.images.push(CocoImage {
            id: image_id,
            file_name: format!("images/{}.png", t.tile_id),
            width: t.size,
            height: t.size,
            dsm_file_name: t.dsm.as_ref().map(|_| format!("dsm/{}.tif", t.tile_id)),
            tile_id: Some(t.tile_id.clone()),
            origin: Some([t.origin.0, t.origin.1]),
        });
        for a in &t.annotations {
            let class = schema.class_id(&a.class_label).ok_or_else(|| {
                Error::Config(format!(
                    "tile {}: label {} is not in the class schema",
                    t.tile_id, a.class_label
                ))
            })?;
            let mask = a.mask(t.size, t.size);
            let Some(bbox) = mask.bbox() else { continue };
            let segmentation = if a.polygon.0.iter().any(|p| !p.holes.is_empty()) {
                Segmentation::Rle(CocoRle::from_mask(&mask))
            } else {
                Segmentation::Polygons(
                    a.polygon
                        .0
                        .iter()
                        .map(|p| p.exterior.iter().flat_map(|q| [q.x, q.y]).collect())
                        .collect(),
                )
            };
            ds.annotations.push(CocoAnnotation {
                id: next_ann,
                image_id,
                category_id: u64::from(class) + 1,
                segmentation,
                area: a.polygon.area(),
                bbox: xywh(&bbox),
                iscrowd: 0,
                instance_id: Some(a.instance_id),
                visibility_fraction: Some(a.visibility_fraction),
            });
            next_ann += 1;
        }
    }
    Ok(ds)
}

/// Write tile images, DSM rasters and one COCO file per non-empty split. Returns the written
/// COCO paths.
pub fn write_tile_set(tiles: &[Tile], schema: &ClassSchema, out: &Path) -> Result<BTreeMap<Split, PathBuf>> {
    for sub in ["images", "dsm"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for t in tiles {
        super::write_png(&out.join(format!("images/{}.png", t.tile_id)), t.size, t.size, &t.image)?;
        if let Some(d) = &t.dsm {
            let values: Vec<f32> = d
                .values
                .data()
                .iter()
                .zip(d.valid.data())
                .map(|(&v, &ok)| if ok { v } else { f32::NAN })
                .collect();
            super::geotiff::write_f32(
                &out.join(format!("dsm/{}.tif", t.tile_id)),
                t.size,
                t.size,
                &values,
                Some(&t.geotransform),
                Some(f64::NAN),
            )?;
        }
    }
    let mut written = BTreeMap::new();
    for split in [Split::Train, Split::Val, Split::Test, Split::Unassigned] {
        let members: Vec<&Tile> = tiles.iter().filter(|t| t.split == split).collect();
        if members.is_empty() {
            continue;
        }
        let p = out.join(format!("{}.json", split.as_str()));
        super::write_json(&p, &tiles_to_coco(&members, schema)?)?;
        written.insert(split, p);
    }
    Ok(written)
}

pub fn read_dataset(path: &Path) -> Result<CocoDataset> {
    super::read_json(path)
}

/// Training samples for every image of a COCO file, with files resolved relative to it.
pub fn load_samples(path: &Path, dsm_mode: NormalizeMode) -> Result<(CocoDataset, Vec<Sample>)> {
    let ds = read_dataset(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let gts = ds.ground_truth()?;
    let mut samples = Vec::with_capacity(ds.images.len());
    for (img, (_, gt)) in ds.images.iter().zip(gts) {
        if img.width != img.height {
            return Err(Error::format(path, format!("image {} is not square", img.id)));
        }
        let rgb = super::read_png(&root.join(&img.file_name))?;
        if rgb.width() != img.width || rgb.height() != img.height {
            return Err(Error::format(path, format!("image {} size disagrees with its file", img.id)));
        }
        let dsm = match &img.dsm_file_name {
            Some(f) => Some(read_dsm_tile(&root.join(f), img.width, img.height, dsm_mode)?),
            None => None,
        };
        let instances = gt
            .into_iter()
            .filter_map(|g| {
                let mask = g.mask?;
                let bbox = mask.bbox()?;
                Some(Instance {
                    class_id: g.class_id,
                    mask,
                    bbox,
                })
            })
            .collect();
        samples.push(Sample {
            id: img.tile_id.clone().unwrap_or_else(|| img.id.to_string()),
            rgb,
            dsm,
            instances,
        });
    }
    Ok((ds, samples))
}

fn read_dsm_tile(path: &Path, w: usize, h: usize, mode: NormalizeMode) -> Result<DsmChannel> {
    let r = super::geotiff::read_geotiff(path)?;
    let super::geotiff::RasterData::F32(values) = r.data else {
        return Err(Error::format(path, "DSM tiles must be float rasters"));
    };
    if r.width != w || r.height != h || r.bands != 1 {
        return Err(Error::format(path, "DSM tile size disagrees with its image"));
    }
    let nodata = r.nodata;
    let valid: Vec<bool> = values
        .iter()
        .map(|&v| !v.is_nan() && nodata.is_none_or(|nd| f64::from(v) != nd))
        .collect();
    let values: Vec<f32> = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    let dsm = DsmChannel::new(Grid::from_vec(w, h, values)?, Grid::from_vec(w, h, valid)?)?;
    Ok(normalize_dsm(&dsm, mode).dsm)
}

/// Result records for one image's detections. Masks are stored as compressed RLE.
pub fn detections_to_results(image_id: u64, detections: &[Detection]) -> Vec<CocoResult> {
    detections
        .iter()
        .map(|d| CocoResult {
            image_id,
            category_id: u64::from(d.class_id) + 1,
            bbox: xywh(&d.bbox),
            score: d.score,
            segmentation: d.mask.as_ref().map(CocoRle::from_mask),
            mask_score: d.mask_score,
        })
        .collect()
}

pub fn read_results(path: &Path) -> Result<Vec<CocoResult>> {
    super::read_json(path)
}

/// Pair results with the ground truth of `gt`. Results for images or categories not in the
/// ground truth are an error.
pub fn eval_images(gt: &CocoDataset, results: &[CocoResult]) -> Result<Vec<EvalImage>> {
    let cats = gt.category_index();
    let sizes: BTreeMap<u64, (usize, usize)> = gt.images.iter().map(|i| (i.id, (i.width, i.height))).collect();
    let mut dets: BTreeMap<u64, Vec<Detection>> = BTreeMap::new();
    for r in results {
        let &(w, h) = sizes
            .get(&r.image_id)
            .ok_or_else(|| Error::Usage(format!("result for unknown image {}", r.image_id)))?;
        let &class = cats
            .get(&r.category_id)
            .ok_or_else(|| Error::Usage(format!("result with unknown category {}", r.category_id)))?;
        let mut d = Detection::new(from_xywh(&r.bbox), class, r.score);
        d.mask_score = r.mask_score;
        if let Some(s) = &r.segmentation {
            d.mask = Some(Segmentation::Rle(s.clone()).to_mask(w, h)?);
        }
        dets.entry(r.image_id).or_default().push(d);
    }
    Ok(gt
        .ground_truth()?
        .into_iter()
        .map(|(id, ground_truth)| EvalImage {
            ground_truth,
            detections: dets.remove(&id).unwrap_or_default(),
        })
        .collect())
}
