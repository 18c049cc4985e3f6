//! Synthetic orthomosaics with tree crowns, for tests, demos and the toy-scale probes.
//!
//! Crowns are discs coloured by class over a textured ground, with a dome-shaped height bump
//! in the DSM whose apex sits at the crown centre.

use std::collections::BTreeMap;

use crownseg_core::dsm::DsmChannel;
use crownseg_core::geom::{MultiPolygon, Point, Polygon};
use crownseg_core::taxonomy::OTHER;
use crownseg_core::tiling::{Aoi, AoiPurpose, CrownAnnotation, GeoTransform, Orthomosaic, Split};
use crownseg_core::{Grid, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, Sample};
use crate::error::Result;

/// Crown colours by class index.
const PALETTE: [[u8; 3]; 6] = [
    [34, 110, 44],
    [150, 185, 60],
    [30, 120, 125],
    [95, 70, 120],
    [170, 120, 40],
    [60, 60, 30],
];
const GROUND: [u8; 3] = [150, 125, 95];
const VERTICES: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub raster_id: String,
    pub width: usize,
    pub height: usize,
    pub crowns: usize,
    pub classes: Vec<String>,
    /// Crown radius range in pixels.
    pub radius: (f64, f64),
    /// Ground elevation in metres and crown height range.
    pub ground: f64,
    pub height_range: (f64, f64),
    pub resolution: f64,
    pub origin: (f64, f64),
    pub seed: u64,
    pub with_dsm: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            raster_id: "synth".into(),
            width: 256,
            height: 256,
            crowns: 12,
            classes: vec!["Abies".into(), "Betula".into(), "Picea".into()],
            radius: (10.0, 18.0),
            ground: 100.0,
            height_range: (8.0, 20.0),
            resolution: 0.05,
            origin: (500_000.0, 5_000_000.0),
            seed: 0,
            with_dsm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crown {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub height: f64,
    pub class: usize,
}

pub struct SynthScene {
    pub ortho: Orthomosaic,
    pub annotations: Vec<CrownAnnotation>,
    pub aoi: Vec<Aoi>,
    /// Left half train, right upper quarter val, right lower quarter test.
    pub splits: BTreeMap<Split, MultiPolygon>,
    pub crowns: Vec<Crown>,
}

/// Non-overlapping crowns placed by rejection sampling inside `[margin, side - margin]`.
pub fn place_crowns(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Crown> {
    let mut out: Vec<Crown> = Vec::new();
    let mut tries = 0;
    while out.len() < cfg.crowns && tries < cfg.crowns * 200 {
        tries += 1;
        let r = rng.random_range(cfg.radius.0..=cfg.radius.1);
        let m = r + 2.0;
        if cfg.width as f64 <= 2.0 * m || cfg.height as f64 <= 2.0 * m {
            break;
        }
        let cx = rng.random_range(m..cfg.width as f64 - m);
        let cy = rng.random_range(m..cfg.height as f64 - m);
        if out
            .iter()
            .any(|c| ((c.cx - cx).powi(2) + (c.cy - cy).powi(2)).sqrt() < c.radius + r + 3.0)
        {
            continue;
        }
        out.push(Crown {
            cx,
            cy,
            radius: r,
            height: rng.random_range(cfg.height_range.0..=cfg.height_range.1),
            class: out.len() % cfg.classes.len().max(1),
        });
    }
    out
}

fn crown_polygon(c: &Crown, map: impl Fn(f64, f64) -> Point) -> Polygon {
    let ring: Vec<Point> = (0..VERTICES)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / VERTICES as f64;
            map(c.cx + c.radius * t.cos(), c.cy + c.radius * t.sin())
        })
        .collect();
    Polygon::new(ring, Vec::new())
}

/// Render RGB and DSM rasters for a crown layout.
pub fn render(width: usize, height: usize, crowns: &[Crown], ground: f64, seed: u64) -> (Grid<[u8; 3]>, Grid<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let noise: Vec<i16> = (0..width * height).map(|_| rng.random_range(-12..=12)).collect();
    let mut rgb = Grid::from_fn(width, height, |x, y| {
        let n = noise[y * width + x];
        GROUND.map(|v| (i16::from(v) + n).clamp(1, 255) as u8)
    });
    let mut dsm = Grid::from_fn(width, height, |x, y| (ground + 0.002 * (x + y) as f64) as f32);
    for c in crowns {
        let x0 = (c.cx - c.radius).floor().max(0.0) as usize;
        let y0 = (c.cy - c.radius).floor().max(0.0) as usize;
        let x1 = ((c.cx + c.radius).ceil() as usize + 1).min(width);
        let y1 = ((c.cy + c.radius).ceil() as usize + 1).min(height);
        let colour = PALETTE[c.class % PALETTE.len()];
        for y in y0..y1 {
            for x in x0..x1 {
                let d = ((x as f64 + 0.5 - c.cx).powi(2) + (y as f64 + 0.5 - c.cy).powi(2)).sqrt()
                    / c.radius;
                if d > 1.0 {
                    continue;
                }
                let n = noise[y * width + x] / 2;
                // slightly darker towards the rim
                let shade = 1.0 - 0.15 * d;
                rgb.set(x, y, colour.map(|v| ((f64::from(v) * shade) as i16 + n).clamp(1, 255) as u8));
                let h = ground + c.height * (1.0 - d * d).sqrt();
                let cur = *dsm.get(x, y);
                dsm.set(x, y, cur.max(h as f32));
            }
        }
    }
    (rgb, dsm)
}

/// Full scene: orthomosaic, world-coordinate annotations, an AOI covering the raster minus a
/// thin border, and three spatial splits.
pub fn scene(cfg: &SynthConfig) -> Result<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let crowns = place_crowns(cfg, &mut rng);
    let (rgb, dsm) = render(cfg.width, cfg.height, &crowns, cfg.ground, cfg.seed);
    let gt = GeoTransform::north_up(cfg.origin.0, cfg.origin.1, cfg.resolution);
    let flat: Vec<u8> = rgb.data().iter().flat_map(|p| p.iter().copied()).collect();
    let ortho = Orthomosaic::new(
        cfg.raster_id.clone(),
        cfg.width,
        cfg.height,
        flat,
        cfg.with_dsm.then(|| dsm.into_vec()),
        0.0,
        gt,
    )?;
    let world = |x: f64, y: f64| gt.to_world(x, y);
    let annotations = crowns
        .iter()
        .enumerate()
        .map(|(i, c)| CrownAnnotation {
            instance_id: i as u64 + 1,
            class_label: cfg.classes.get(c.class).cloned().unwrap_or_else(|| OTHER.into()),
            polygon: MultiPolygon::single(crown_polygon(c, world)),
        })
        .collect();
    let rect = |x0: f64, y0: f64, x1: f64, y1: f64| {
        MultiPolygon::single(Polygon::new(
            vec![world(x0, y0), world(x1, y0), world(x1, y1), world(x0, y1)],
            Vec::new(),
        ))
    };
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let aoi = vec![Aoi {
        polygons: rect(2.0, 2.0, w - 2.0, h - 2.0),
        purpose: AoiPurpose::Include,
    }];
    let mut splits = BTreeMap::new();
    splits.insert(Split::Train, rect(0.0, 0.0, w / 2.0, h));
    splits.insert(Split::Val, rect(w / 2.0, 0.0, w, h / 2.0));
    splits.insert(Split::Test, rect(w / 2.0, h / 2.0, w, h));
    Ok(SynthScene {
        ortho,
        annotations,
        aoi,
        splits,
        crowns,
    })
}

/// A single training sample of side `size` with `crowns` crowns drawn from `num_classes`
/// classes. The DSM is normalized by its maximum.
pub fn sample(size: usize, crowns: usize, num_classes: usize, seed: u64) -> Sample {
    let cfg = SynthConfig {
        width: size,
        height: size,
        crowns,
        classes: (0..num_classes.max(1)).map(|i| format!("c{i}")).collect(),
        radius: (size as f64 * 0.09, size as f64 * 0.16),
        seed,
        ..SynthConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = place_crowns(&cfg, &mut rng);
    let (rgb, dsm) = render(size, size, &layout, cfg.ground, seed);
    let max = dsm.data().iter().copied().fold(f32::MIN, f32::max);
    let dsm = DsmChannel::dense(dsm.map(|v| v / max));
    let instances = layout
        .iter()
        .filter_map(|c| {
            let mask = crownseg_core::geom::rasterize(
                &MultiPolygon::single(crown_polygon(c, |x, y| Point::new(x, y))),
                size,
                size,
            );
            let bbox = mask.bbox()?;
            Some(Instance {
                class_id: c.class as u32,
                mask,
                bbox,
            })
        })
        .collect();
    Sample {
        id: format!("synth_{seed}"),
        rgb,
        dsm: Some(dsm),
        instances,
    }
}

/// Union of the instance masks of a sample.
pub fn foreground(sample: &Sample) -> Mask {
    let s = sample.size();
    Mask::from_fn(s, s, |x, y| sample.instances.iter().any(|i| i.mask.get(x, y)))
}
