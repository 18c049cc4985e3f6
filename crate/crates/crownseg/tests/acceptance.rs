//! Acceptance suite. Every criterion checks the implementation against an independent oracle
//! and writes one PASS/FAIL line to stdout (uncaptured, so the lines show in a normal
//! `cargo test` run). Criteria run one at a time so the timing budgets are not skewed by
//! sibling tests.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::panic::AssertUnwindSafe;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use candle_core::{DType, Device, Module, Tensor, Var};
use clap::Parser;
use crownseg::cli::{self, Cli};
use crownseg::data::Sample;
use crownseg::detectors::{reference_backbone, Detector, DetectorConfig, DetectorKind, DsmInput};
use crownseg::model::Model;
use crownseg::nn::losses::ClassLoss;
use crownseg::nn::ParamStore;
use crownseg::prompter::{
    AnchorPrompter, DenseInjection, DsmEncoder, DsmEncoderSpec, EncoderLayer, FusionVariant, PrompterConfig,
};
use crownseg::sam::mock::MockSam;
use crownseg::sam::vit::{VitConfig, VitSam};
use crownseg::sam::{Segmenter, SegmenterSpec};
use crownseg::trainer::{ground_truth, Trainer};
use crownseg_core::dsm::{peak_prompts, DsmChannel, Peak, PeakConfig};
use crownseg_core::geom::{MultiPolygon, Polygon};
use crownseg_core::losses::{
    bucket_nll, cross_entropy, hierarchical_loss, weighted_cross_entropy, HierarchicalLossConfig, HierarchyPlan,
};
use crownseg_core::metrics::{
    aggregate, average_precision, evaluate, mean_iou, EvalImage, GroundTruth, IouThresholds, IouType,
};
use crownseg_core::nms::{nms_indices, NmsConfig, OverlapBasis};
use crownseg_core::schedule::{make_recipe, DatasetId, Decay, ModelKind, TrainConfig};
use crownseg_core::taxonomy::{inverse_frequency_weights, ClassSchema, ClassWeights, TaxonomyTree};
use crownseg_core::tiling::{tile_orthomosaic, Aoi, AoiPurpose, GeoTransform, Orthomosaic};
use crownseg_core::{BBox, Detection, Grid, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

type Outcome = Result<String, String>;

fn criterion(n: u32, title: &str, body: impl FnOnce() -> Outcome) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let t0 = Instant::now();
    let result = std::panic::catch_unwind(AssertUnwindSafe(body));
    let secs = t0.elapsed().as_secs_f64();
    let line = match &result {
        Ok(Ok(detail)) => format!("criterion {n:>2} PASS  {title}: {detail} [{secs:.1}s]"),
        Ok(Err(why)) => format!("criterion {n:>2} FAIL  {title}: {why} [{secs:.1}s]"),
        Err(_) => format!("criterion {n:>2} FAIL  {title}: panicked [{secs:.1}s]"),
    };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    match result {
        Ok(Ok(_)) => {}
        Ok(Err(why)) => panic!("criterion {n} failed: {why}"),
        Err(p) => std::panic::resume_unwind(p),
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "shape mismatch");
    if a.elem_count() == 0 {
        return 0.0;
    }
    let d = (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap()).unwrap();
    d.abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
}

// ---------------------------------------------------------------------------------------------
// fixtures shared by the metric criteria

const SIDE: usize = 16;

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    let x0 = rng.random_range(0..SIDE - 1);
    let y0 = rng.random_range(0..SIDE - 1);
    let x1 = (x0 + rng.random_range(1..=9)).min(SIDE);
    let y1 = (y0 + rng.random_range(1..=9)).min(SIDE);
    let ragged = rng.random_bool(0.3);
    let keep: Vec<bool> = (0..SIDE * SIDE).map(|_| !ragged || rng.random_bool(0.8)).collect();
    let m = Mask::from_fn(SIDE, SIDE, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1 && keep[y * SIDE + x]);
    if m.is_empty() {
        Mask::from_fn(SIDE, SIDE, |x, y| x == x0 && y == y0)
    } else {
        m
    }
}

fn random_score(rng: &mut ChaCha8Rng) -> f64 {
    // coarse scores produce ties, which exercise the ordering conventions
    if rng.random_bool(0.4) {
        f64::from(rng.random_range(1..=4u32)) * 0.2
    } else {
        rng.random::<f64>()
    }
}

fn det_from_mask(mask: Mask, class_id: u32, score: f64) -> Detection {
    let bbox = mask.bbox().expect("non-empty mask");
    Detection::new(bbox, class_id, score).with_mask(mask)
}

fn random_images(rng: &mut ChaCha8Rng, classes: u32, max_gt: usize, max_det: usize) -> Vec<EvalImage> {
    let n_img = rng.random_range(1..=3);
    (0..n_img)
        .map(|_| {
            let ng = rng.random_range(0..=max_gt);
            let nd = rng.random_range(0..=max_det);
            let gts: Vec<GroundTruth> = (0..ng)
                .map(|_| GroundTruth::from_mask(rng.random_range(0..classes), random_mask(rng)))
                .collect();
            let dets = (0..nd)
                .map(|_| {
                    // predictions often start from a ground-truth mask so that matches happen
                    let mask = match gts.get(rng.random_range(0..ng.max(1))) {
                        Some(g) if rng.random_bool(0.6) => jitter(g.mask.as_ref().unwrap(), rng),
                        _ => random_mask(rng),
                    };
                    let class = rng.random_range(0..classes);
                    det_from_mask(mask, class, random_score(rng))
                })
                .collect();
            EvalImage {
                ground_truth: gts,
                detections: dets,
            }
        })
        .collect()
}

fn jitter(m: &Mask, rng: &mut ChaCha8Rng) -> Mask {
    let dx: i64 = rng.random_range(-2..=2);
    let dy: i64 = rng.random_range(-2..=2);
    let out = Mask::from_fn(SIDE, SIDE, |x, y| {
        let (sx, sy) = (x as i64 - dx, y as i64 - dy);
        sx >= 0 && sy >= 0 && (sx as usize) < SIDE && (sy as usize) < SIDE && m.get(sx as usize, sy as usize)
    });
    if out.is_empty() {
        m.clone()
    } else {
        out
    }
}

/// IoU by counting pixels.
fn pixel_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += usize::from(p && q);
            union += usize::from(p || q);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

// ---------------------------------------------------------------------------------------------
// 1. average precision against a brute-force reference

fn numpy_linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    let step = (stop - start) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * step + start).collect();
    v[n - 1] = stop;
    v
}

fn brute_force_ap(images: &[EvalImage], class: u32) -> Option<f64> {
    let thresholds = numpy_linspace(0.5, 0.95, 10);
    let recall_points = numpy_linspace(0.0, 1.0, 101);
    let n_gt: usize = images
        .iter()
        .map(|im| im.ground_truth.iter().filter(|g| g.class_id == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut total = 0.0;
    for &t in &thresholds {
        let floor = if t < 1.0 - 1e-10 { t } else { 1.0 - 1e-10 };
        let mut ranked: Vec<(f64, bool)> = Vec::new();
        for im in images {
            let gts: Vec<&Mask> = im
                .ground_truth
                .iter()
                .filter(|g| g.class_id == class)
                .map(|g| g.mask.as_ref().unwrap())
                .collect();
            let mut dets: Vec<&Detection> = im.detections.iter().filter(|d| d.class_id == class).collect();
            // insertion sort: stable, descending score
            for i in 1..dets.len() {
                let mut j = i;
                while j > 0 && dets[j - 1].score < dets[j].score {
                    dets.swap(j - 1, j);
                    j -= 1;
                }
            }
            dets.truncate(100);
            let mut taken = vec![false; gts.len()];
            for d in dets {
                let dm = d.mask.as_ref().unwrap();
                let ious: Vec<f64> = gts.iter().map(|g| pixel_iou(g, dm)).collect();
                let best = (0..gts.len())
                    .filter(|&g| !taken[g] && ious[g] >= floor)
                    .map(|g| ious[g])
                    .fold(f64::NEG_INFINITY, f64::max);
                // highest IoU wins; among equals the later ground truth
                let pick = (0..gts.len()).rev().find(|&g| !taken[g] && ious[g] >= floor && ious[g] == best);
                if let Some(g) = pick {
                    taken[g] = true;
                }
                ranked.push((d.score, pick.is_some()));
            }
        }
        for i in 1..ranked.len() {
            let mut j = i;
            while j > 0 && ranked[j - 1].0 < ranked[j].0 {
                ranked.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut recall = Vec::new();
        let mut precision = Vec::new();
        let (mut tp, mut fp) = (0.0f64, 0.0f64);
        for &(_, hit) in &ranked {
            if hit {
                tp += 1.0
            } else {
                fp += 1.0
            }
            recall.push(tp / n_gt as f64);
            precision.push(tp / (tp + fp));
        }
        let mut sum = 0.0;
        for &r in &recall_points {
            let q = (0..ranked.len())
                .filter(|&j| recall[j] >= r)
                .map(|j| precision[j])
                .fold(None, |acc: Option<f64>, p| Some(acc.map_or(p, |a| a.max(p))))
                .unwrap_or(0.0);
            sum += q;
        }
        total += sum / 101.0;
    }
    Some(total / thresholds.len() as f64)
}

#[test]
fn ap_matches_brute_force() {
    criterion(1, "AP equals brute-force reference", || {
        let t0 = Instant::now();
        let thresholds = IouThresholds::Coco.values();
        check(thresholds == numpy_linspace(0.5, 0.95, 10), || format!("thresholds {thresholds:?}"))?;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut compared = 0;
        for f in 0..200 {
            let images = random_images(&mut rng, 2, 5, 5);
            for class in 0..2 {
                let got = average_precision(&images, class, &thresholds, IouType::Segm);
                let want = brute_force_ap(&images, class);
                check(got == want, || format!("fixture {f} class {class}: {got:?} vs {want:?}"))?;
                compared += usize::from(want.is_some());
            }
        }
        let secs = t0.elapsed().as_secs_f64();
        check(secs < 60.0, || format!("took {secs:.1}s"))?;
        Ok(format!("200 fixtures, {compared} class APs bit-identical"))
    });
}

// ---------------------------------------------------------------------------------------------
// 2. mIoU

fn reference_miou(images: &[EvalImage]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0;
    for im in images {
        for g in &im.ground_truth {
            let gm = g.mask.as_ref().unwrap();
            let mut best = 0.0f64;
            for d in &im.detections {
                best = best.max(pixel_iou(gm, d.mask.as_ref().unwrap()));
            }
            sum += best;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[test]
fn miou_ignores_false_positives() {
    criterion(2, "mIoU monotone under false positives", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut done = 0;
        while done < 100 {
            let mut images = random_images(&mut rng, 3, 5, 5);
            let Some(want) = reference_miou(&images) else { continue };
            let got = mean_iou(&images, IouType::Segm).map_err(|e| e.to_string())?;
            check(got == want, || format!("fixture {done}: {got} vs reference {want}"))?;
            for im in images.iter_mut() {
                for _ in 0..rng.random_range(1..=4) {
                    let c = rng.random_range(0..3);
                    let s = random_score(&mut rng);
                    im.detections.push(det_from_mask(random_mask(&mut rng), c, s));
                }
            }
            let after = mean_iou(&images, IouType::Segm).map_err(|e| e.to_string())?;
            check(after >= got, || format!("fixture {done}: {got} dropped to {after}"))?;
            let want_after = reference_miou(&images).unwrap();
            check(after == want_after, || format!("fixture {done}: {after} vs reference {want_after}"))?;
            done += 1;
        }
        Ok("100 fixtures, exact match with per-GT max".into())
    });
}

// ---------------------------------------------------------------------------------------------
// 3. weighted mAP

#[test]
fn weighted_map_is_convex() {
    criterion(3, "wmAP within per-class range", || {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut done = 0;
        let mut worst: f64 = 0.0;
        while done < 200 {
            let images = random_images(&mut rng, 3, 5, 5);
            if images.iter().all(|im| im.ground_truth.is_empty()) {
                continue;
            }
            let r = evaluate(&images, &names, None, IouThresholds::Coco).map_err(|e| e.to_string())?;
            let lo = r.per_class_ap.values().copied().fold(f64::INFINITY, f64::min);
            let hi = r.per_class_ap.values().copied().fold(f64::NEG_INFINITY, f64::max);
            check(lo <= r.wmap && r.wmap <= hi, || format!("fixture {done}: wmAP {} outside [{lo}, {hi}]", r.wmap))?;

            let counts: BTreeMap<String, u64> = r
                .per_class_ap
                .keys()
                .map(|k| (k.clone(), rng.random_range(1..500)))
                .collect();
            let w = inverse_frequency_weights(&counts).map_err(|e| e.to_string())?;
            let other = aggregate(&r.per_class_ap, Some(&w)).map_err(|e| e.to_string())?;
            check(lo <= other && other <= hi, || format!("fixture {done}: weighted {other} outside [{lo}, {hi}]"))?;

            let uniform = ClassWeights::uniform(&names);
            let u = evaluate(&images, &names, Some(&uniform), IouThresholds::Coco).map_err(|e| e.to_string())?;
            worst = worst.max((u.wmap - u.map).abs());
            check((u.wmap - u.map).abs() <= 1e-12, || format!("fixture {done}: uniform wmAP {} vs mAP {}", u.wmap, u.map))?;
            done += 1;
        }
        Ok(format!("200 fixtures, uniform |wmAP - mAP| <= {worst:.1e}"))
    });
}

// ---------------------------------------------------------------------------------------------
// 4. tiling

fn oracle_origins(len: usize, tile: usize, overlap: f64) -> Vec<usize> {
    let stride = ((tile as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + tile <= len).collect();
    v.push(len - tile);
    v.sort_unstable();
    v.dedup();
    v
}

struct RectPx {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl RectPx {
    fn random(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Self {
        let x0 = rng.random_range(0..w - 1);
        let y0 = rng.random_range(0..h - 1);
        Self {
            x0,
            y0,
            x1: rng.random_range(x0 + 1..=w),
            y1: rng.random_range(y0 + 1..=h),
        }
    }

    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    fn world(&self, gt: &GeoTransform) -> MultiPolygon {
        let a = gt.to_world(self.x0 as f64, self.y0 as f64);
        let b = gt.to_world(self.x1 as f64, self.y1 as f64);
        MultiPolygon::single(Polygon::rect(a.x.min(b.x), a.y.min(b.y), a.x.max(b.x), a.y.max(b.y)))
    }
}

fn check_tiling(
    raster: &Orthomosaic,
    rgb: &[u8],
    dsm: Option<&[f32]>,
    aoi: &[Aoi],
    keep: &dyn Fn(usize, usize) -> bool,
    tile: usize,
    overlap: f64,
) -> Result<usize, String> {
    let (w, h) = (raster.width(), raster.height());
    let tiles = tile_orthomosaic(raster, aoi, tile, overlap).map_err(|e| e.to_string())?;
    let xs = oracle_origins(w, tile, overlap);
    let ys = oracle_origins(h, tile, overlap);
    let want: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect();
    let got: Vec<(usize, usize)> = tiles.iter().map(|t| t.origin).collect();
    check(got == want, || format!("{w}x{h} tile {tile} overlap {overlap}: origins {got:?} vs {want:?}"))?;
    let mut covered = vec![false; w * h];
    for t in &tiles {
        let (ox, oy) = t.origin;
        check(t.tile_id == format!("{}_{ox}_{oy}", raster.raster_id()), || format!("tile id {}", t.tile_id))?;
        check(t.size == tile && t.image.len() == tile * tile * 3, || "tile buffer size".into())?;
        let mut black = 0usize;
        for y in 0..tile {
            for x in 0..tile {
                let (gx, gy) = (ox + x, oy + y);
                covered[gy * w + gx] = true;
                let inside = keep(gx, gy);
                let src = (gy * w + gx) * 3;
                let px = &t.image[(y * tile + x) * 3..(y * tile + x) * 3 + 3];
                let expect: [u8; 3] = if inside { [rgb[src], rgb[src + 1], rgb[src + 2]] } else { [0; 3] };
                check(px == expect, || format!("tile {} pixel ({x}, {y}): {px:?} vs {expect:?}", t.tile_id))?;
                if let (Some(d), Some(td)) = (dsm, t.dsm.as_ref()) {
                    let e = if inside { d[gy * w + gx] } else { 0.0 };
                    check(*td.values.get(x, y) == e, || format!("tile {} DSM ({x}, {y})", t.tile_id))?;
                    check(*td.valid.get(x, y) == inside, || format!("tile {} DSM validity ({x}, {y})", t.tile_id))?;
                }
                black += usize::from(!inside);
            }
        }
        check(dsm.is_some() == t.dsm.is_some(), || "DSM presence".into())?;
        let bf = black as f64 / (tile * tile) as f64;
        check(t.black_fraction == bf, || format!("tile {} black fraction {} vs {bf}", t.tile_id, t.black_fraction))?;
    }
    check(covered.iter().all(|&c| c), || format!("{w}x{h} tile {tile}: uncovered pixels"))?;
    Ok(tiles.len())
}

#[test]
fn tiling_matches_pixel_oracle() {
    criterion(4, "tiling coverage and origins", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut total = 0;
        for i in 0..50 {
            let w = rng.random_range(16..=80);
            let h = rng.random_range(16..=80);
            let tile = rng.random_range(4..=w.min(h).min(32));
            let overlap = [0.0, 0.25, 0.5, 0.75, 0.3][rng.random_range(0..5)];
            let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.random_range(1..=255)).collect();
            let dsm: Option<Vec<f32>> =
                rng.random_bool(0.5).then(|| (0..w * h).map(|_| rng.random_range(1..1000) as f32 * 0.125).collect());
            let gt = if i % 2 == 0 {
                GeoTransform::IDENTITY
            } else {
                GeoTransform::north_up(500.0, 1000.0, 0.5)
            };
            let raster = Orthomosaic::new(format!("r{i}"), w, h, rgb.clone(), dsm.clone(), 0.0, gt)
                .map_err(|e| e.to_string())?;
            let include = rng.random_bool(0.5).then(|| RectPx::random(&mut rng, w, h));
            let exclude = rng.random_bool(0.3).then(|| RectPx::random(&mut rng, w, h));
            let mut aoi = Vec::new();
            if let Some(r) = &include {
                aoi.push(Aoi {
                    polygons: r.world(&gt),
                    purpose: AoiPurpose::Include,
                });
            }
            if let Some(r) = &exclude {
                aoi.push(Aoi {
                    polygons: r.world(&gt),
                    purpose: AoiPurpose::ExcludeMask,
                });
            }
            let keep = |x: usize, y: usize| {
                include.as_ref().is_none_or(|r| r.contains(x, y)) && !exclude.as_ref().is_some_and(|r| r.contains(x, y))
            };
            total += check_tiling(&raster, &rgb, dsm.as_deref(), &aoi, &keep, tile, overlap)?;
        }

        let side = 2048;
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let rgb: Vec<u8> = (0..side * side * 3).map(|_| rng.random_range(1..=255)).collect();
        let raster = Orthomosaic::new("big", side, side, rgb.clone(), None, 0.0, GeoTransform::IDENTITY)
            .map_err(|e| e.to_string())?;
        let n = check_tiling(&raster, &rgb, None, &[], &|_, _| true, 1024, 0.5)?;
        check(n == 9, || format!("2048 raster gave {n} tiles"))?;
        let xs = oracle_origins(side, 1024, 0.5);
        check(xs == vec![0, 512, 1024], || format!("2048 origins {xs:?}"))?;
        Ok(format!("50 random rasters ({total} tiles) plus the 9-tile 2048 case"))
    });
}

// ---------------------------------------------------------------------------------------------
// 5. DSM peak prompts

fn random_dsm(rng: &mut ChaCha8Rng, quantized: bool) -> DsmChannel {
    let s = 128;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..rng.random_range(3..16))
        .map(|_| {
            (
                rng.random_range(0.0..s as f64),
                rng.random_range(0.0..s as f64),
                rng.random_range(2.0..20.0),
                rng.random_range(3.0..15.0),
            )
        })
        .collect();
    let noise: Vec<f64> = (0..s * s).map(|_| rng.random::<f64>() * 0.05).collect();
    let border = [0, rng.random_range(0..6)][rng.random_range(0..2)];
    let values = Grid::from_fn(s, s, |x, y| {
        let mut v = noise[y * s + x];
        for &(cx, cy, a, sig) in &bumps {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v += a * (-d2 / (2.0 * sig * sig)).exp();
        }
        if quantized {
            // multiples of 1/4: wide plateaus, exactly representable
            ((v * 4.0).round() / 4.0) as f32
        } else {
            v as f32
        }
    });
    let valid = Grid::from_fn(s, s, |x, y| x >= border && y >= border && x + border < s && y + border < s);
    let values = Grid::from_fn(s, s, |x, y| if *valid.get(x, y) { *values.get(x, y) } else { -9999.0 });
    DsmChannel::new(values, valid).unwrap()
}

fn oracle_peaks(dsm: &DsmChannel, r: f64) -> Vec<Peak> {
    let (w, h) = (dsm.width(), dsm.height());
    let val = |x: i64, y: i64| -> Option<f32> {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 || !*dsm.valid.get(x as usize, y as usize) {
            None
        } else {
            Some(*dsm.values.get(x as usize, y as usize))
        }
    };
    let mut floor = f32::INFINITY;
    for y in 0..h {
        for x in 0..w {
            if let Some(v) = val(x as i64, y as i64) {
                floor = floor.min(v);
            }
        }
    }
    let r2 = r * r;
    let ri = r.floor() as i64;
    let mut cand = vec![false; w * h];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let Some(c) = val(x, y) else { continue };
            if c <= floor {
                continue;
            }
            // cheap rejection first; the full disk scan below decides
            let mut higher_near = false;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    higher_near |= val(x + dx, y + dy).is_some_and(|n| n > c);
                }
            }
            if higher_near {
                continue;
            }
            let mut dominated = false;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if ((dx * dx + dy * dy) as f64) <= r2 && val(x + dx, y + dy).is_some_and(|n| n > c) {
                        dominated = true;
                    }
                }
            }
            cand[y as usize * w + x as usize] = !dominated;
        }
    }
    // union-find over 8-connected equal-valued candidates
    let mut parent: Vec<usize> = (0..w * h).collect();
    fn find(p: &mut [usize], mut i: usize) -> usize {
        while p[i] != i {
            p[i] = p[p[i]];
            i = p[i];
        }
        i
    }
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !cand[i] {
                continue;
            }
            for (dx, dy) in [(1i64, 0i64), (-1, 1), (0, 1), (1, 1)] {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if cand[j] && dsm.values.data()[j] == dsm.values.data()[i] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
    for y in 0..h {
        for x in 0..w {
            if cand[y * w + x] {
                let root = find(&mut parent, y * w + x);
                groups.entry(root).or_default().push((x, y));
            }
        }
    }
    let mut reps: Vec<(f32, usize, usize)> = groups
        .values()
        .map(|m| {
            let n = m.len() as f64;
            let cx = m.iter().map(|p| p.0 as u64).sum::<u64>() as f64 / n;
            let cy = m.iter().map(|p| p.1 as u64).sum::<u64>() as f64 / n;
            let key = |&(x, y): &(usize, usize)| {
                let d = (x as f64 - cx) * (x as f64 - cx) + (y as f64 - cy) * (y as f64 - cy);
                (d, y, x)
            };
            let best = m
                .iter()
                .min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap())
                .copied()
                .unwrap();
            (*dsm.values.get(best.0, best.1), best.0, best.1)
        })
        .collect();
    reps.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.2, a.1).cmp(&(b.2, b.1))));
    let mut out: Vec<Peak> = Vec::new();
    for (_, x, y) in reps {
        let clear = out.iter().all(|&(qx, qy)| {
            let (dx, dy) = (x as f64 - qx as f64, y as f64 - qy as f64);
            dx * dx + dy * dy >= r2
        });
        if clear {
            out.push((x, y));
        }
    }
    out
}

fn affine(dsm: &DsmChannel, a: f32, b: f32) -> DsmChannel {
    let values = Grid::from_fn(dsm.width(), dsm.height(), |x, y| {
        let v = *dsm.values.get(x, y);
        if *dsm.valid.get(x, y) {
            a * v + b
        } else {
            v
        }
    });
    DsmChannel::new(values, dsm.valid.clone()).unwrap()
}

#[test]
fn peaks_match_brute_force() {
    criterion(5, "DSM peak prompts", || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut peaks = 0;
        for i in 0..100 {
            let quantized = i % 2 == 1;
            let dsm = random_dsm(&mut rng, quantized);
            for r in [5.0, 20.0, 50.0] {
                let cfg = PeakConfig { min_distance: r };
                let got = peak_prompts(&dsm, &cfg).map_err(|e| e.to_string())?;
                let want = oracle_peaks(&dsm, r);
                check(got == want, || format!("dsm {i} r {r}: {got:?} vs oracle {want:?}"))?;
                peaks += got.len();
                let transforms: &[(f32, f32)] = if quantized { &[(3.0, 100.0), (0.5, -7.0)] } else { &[(2.0, 0.0)] };
                for &(a, b) in transforms {
                    let t = peak_prompts(&affine(&dsm, a, b), &cfg).map_err(|e| e.to_string())?;
                    check(t == got, || format!("dsm {i} r {r}: not invariant under {a}*v + {b}"))?;
                }
            }
        }
        Ok(format!("300 cases, {peaks} peaks, invariant under exact affine rescaling"))
    });
}

// ---------------------------------------------------------------------------------------------
// 6. weight surgery

#[test]
fn four_channel_stem_reuses_rgb_weights() {
    criterion(6, "weight surgery", || {
        let cfg = DetectorConfig::new(DetectorKind::Mask, DsmInput::Stack, 1);
        let widths = cfg.widths;
        let det = Detector::new(cfg, 64, ClassLoss::CrossEntropy, 9).map_err(|e| e.to_string())?;
        let reference = reference_backbone(widths, None).map_err(|e| e.to_string())?;
        let rw = reference.get("backbone.stem.weight").unwrap().as_tensor().clone();
        let rb = reference.get("backbone.stem.bias").unwrap().as_tensor().clone();
        let w4 = det.params().get("backbone.stem.weight").unwrap().as_tensor().clone();
        check(w4.dims()[1] == 4 && rw.dims()[1] == 3, || format!("{:?} vs {:?}", w4.dims(), rw.dims()))?;
        let bits = |t: &Tensor| -> Vec<u32> {
            t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
        };
        check(bits(&w4.narrow(1, 0, 3).unwrap().contiguous().unwrap()) == bits(&rw), || "RGB slice differs".into())?;
        let extra = w4.narrow(1, 3, 1).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        check(extra > 0.0, || "DSM slice was not initialized".into())?;

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f32> = (0..3 * 64 * 64).map(|_| rng.random_range(-2.0..2.0)).collect();
        let rgb = Tensor::from_vec(data, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let x4 = Tensor::cat(&[&rgb, &Tensor::zeros((1, 1, 64, 64), DType::F32, &Device::Cpu).unwrap()], 1).unwrap();
        let out4 = det.backbone().stem.forward(&x4).unwrap();
        let out3 = rgb
            .conv2d(&rw, 1, 1, 1, 1)
            .unwrap()
            .broadcast_add(&rb.reshape((1, rb.dims()[0], 1, 1)).unwrap())
            .unwrap();
        let d = max_abs_diff(&out4, &out3);
        check(d <= 1e-6, || format!("zero-DSM forward differs by {d:e}"))?;
        Ok(format!("RGB slice bitwise equal, zero-DSM forward max diff {d:.1e}"))
    });
}

// ---------------------------------------------------------------------------------------------
// 7. BalSAM reduces to the plain prompter when the DSM path is silent

fn zero_dsm(mut s: Sample) -> Sample {
    let n = s.size();
    s.dsm = Some(DsmChannel::dense(Grid::filled(n, n, 0.0f32)));
    s
}

fn compare_collapse(sam: Arc<dyn Segmenter>, cfg: PrompterConfig, sample: &Sample) -> Result<(f64, f64, usize), String> {
    let plain = AnchorPrompter::new(sam.clone(), cfg.clone(), None, ClassLoss::CrossEntropy, 17).map_err(|e| e.to_string())?;
    let balsam =
        AnchorPrompter::new(sam, cfg, Some(FusionVariant::Balsam), ClassLoss::CrossEntropy, 17).map_err(|e| e.to_string())?;
    let a = plain.evaluate(sample).map_err(|e| e.to_string())?;
    let b = balsam.evaluate(sample).map_err(|e| e.to_string())?;
    check(a.proposals == b.proposals, || "proposals differ".into())?;
    check(a.kept == b.kept, || format!("kept {:?} vs {:?}", a.kept, b.kept))?;
    check(!a.kept.is_empty(), || "no proposal survived, nothing to compare".into())?;
    let dl = max_abs_diff(&a.logits, &b.logits);
    let dm = max_abs_diff(&a.mask_probs, &b.mask_probs);
    check(dl <= 1e-5, || format!("logits differ by {dl:e}"))?;
    check(dm <= 1e-5, || format!("mask probabilities differ by {dm:e}"))?;
    Ok((dl, dm, a.kept.len()))
}

#[test]
fn balsam_collapses_to_plain_prompter() {
    criterion(7, "BalSAM collapse with silent DSM", || {
        let size = 128;
        let sample = zero_dsm(crownseg::synth::sample(size, 3, 1, 0));
        let mut notes = Vec::new();

        let mock: Arc<dyn Segmenter> = Arc::new(MockSam::new(size, 0).map_err(|e| e.to_string())?);
        for injection in [DenseInjection::DecoderInput, DenseInjection::DenseBranch] {
            let cfg = PrompterConfig {
                dsm_encoder: DsmEncoderSpec::prompt_with_widths(16, 64),
                score_threshold: 0.0,
                dense_injection: injection,
                ..PrompterConfig::default()
            };
            let (dl, dm, k) = compare_collapse(mock.clone(), cfg, &sample)?;
            notes.push(format!("mock {injection:?}: {k} kept, {dl:.0e}/{dm:.0e}"));
        }

        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let ckpt = dir.path().join("segmenter.safetensors");
        let vit = VitConfig::tiny();
        let seeded = VitSam::seeded(size, &vit, 23).map_err(|e| e.to_string())?;
        let params: HashMap<String, Tensor> = seeded.named_parameters().into_iter().collect();
        candle_core::safetensors::save(&params, &ckpt).map_err(|e| e.to_string())?;
        let spec = SegmenterSpec::Vit {
            image_size: size,
            encoder: vit.clone(),
            checkpoint: Some(ckpt),
            seed: 0,
        };
        let loaded: Arc<dyn Segmenter> = Arc::from(spec.build().map_err(|e| e.to_string())?);
        check(loaded.checksum().ok() == seeded.checksum().ok(), || "checkpoint round trip changed weights".into())?;
        let d = loaded.embed_dim();
        let cfg = PrompterConfig {
            token_width: d,
            score_threshold: 0.0,
            dsm_encoder: DsmEncoderSpec {
                layers: vec![
                    EncoderLayer { kernel: 2, out: 16, stride: 2, same: false },
                    EncoderLayer { kernel: 8, out: 32, stride: 8, same: false },
                    EncoderLayer { kernel: 1, out: d, stride: 1, same: false },
                ],
                zero_init_last: true,
            },
            ..PrompterConfig::default()
        };
        let (dl, dm, k) = compare_collapse(loaded, cfg, &sample)?;
        notes.push(format!("checkpoint: {k} kept, {dl:.0e}/{dm:.0e}"));
        Ok(notes.join("; "))
    });
}

// ---------------------------------------------------------------------------------------------
// 8. the segmenter stays frozen

fn probe_recipe(steps: usize) -> TrainConfig {
    let mut tc = make_recipe(ModelKind::Balsam, DatasetId::Synthetic);
    tc.base_lr = 1e-3;
    tc.warmup = None;
    tc.schedule = Decay::Cosine;
    tc.random_flip = false;
    tc.batch_size = 1;
    tc.max_epochs = steps;
    tc.weight_decay = 0.0;
    tc
}

#[test]
fn segmenter_weights_stay_frozen() {
    criterion(8, "frozen segmenter", || {
        let size = 128;
        let sample = crownseg::synth::sample(size, 3, 1, 0);
        let mut notes = Vec::new();
        for variant in [None, Some(FusionVariant::Balsam)] {
            let sam = Arc::new(MockSam::new(size, 0).map_err(|e| e.to_string())?);
            let cfg = PrompterConfig {
                dsm_encoder: DsmEncoderSpec::prompt_with_widths(16, 64),
                ..PrompterConfig::default()
            };
            let model = AnchorPrompter::new(sam, cfg, variant, ClassLoss::CrossEntropy, 0).map_err(|e| e.to_string())?;
            let frozen = model.frozen_checksums().map_err(|e| e.to_string())?;
            let trainable = model.trainable_checksums().map_err(|e| e.to_string())?;
            check(frozen.len() >= 2, || format!("frozen components {:?}", frozen.keys()))?;
            let mut trainer = Trainer::new(&model, &probe_recipe(10), 1).map_err(|e| e.to_string())?;
            for _ in 0..10 {
                trainer.step(&[&sample]).map_err(|e| e.to_string())?;
            }
            let frozen_after = model.frozen_checksums().map_err(|e| e.to_string())?;
            let trainable_after = model.trainable_checksums().map_err(|e| e.to_string())?;
            check(frozen == frozen_after, || format!("{variant:?}: segmenter weights moved"))?;
            let mut expect = vec!["prompter"];
            if variant.is_some() {
                expect.push("dsm_encoder");
            }
            for k in &expect {
                check(trainable.get(*k).is_some() && trainable.get(*k) != trainable_after.get(*k), || {
                    format!("{variant:?}: {k} did not change")
                })?;
            }
            notes.push(format!(
                "{}: {} frozen unchanged, {} changed",
                if variant.is_some() { "BalSAM" } else { "RSPrompter" },
                frozen.keys().cloned().collect::<Vec<_>>().join("/"),
                expect.join("/")
            ));
        }
        Ok(notes.join("; "))
    });
}

// ---------------------------------------------------------------------------------------------
// 9. DSM encoder shapes

#[test]
fn dsm_encoder_shape_chain() {
    criterion(9, "DSM encoder shape chain", || {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = DsmEncoder::new(&mut ps, "dsm_encoder", &DsmEncoderSpec::prompt()).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f32> = (0..1024 * 1024).map(|_| rng.random::<f32>()).collect();
        let dsm = Tensor::from_vec(data, (1, 1, 1024, 1024), &Device::Cpu).unwrap();
        let t0 = Instant::now();
        let chain = enc.forward_chain(&dsm).map_err(|e| e.to_string())?;
        let secs = t0.elapsed().as_secs_f64();
        let shapes: Vec<Vec<usize>> = chain.iter().map(|t| t.dims().to_vec()).collect();
        let want = vec![vec![1, 192, 512, 512], vec![1, 768, 64, 64], vec![1, 256, 64, 64]];
        check(shapes == want, || format!("shapes {shapes:?}"))?;
        check(secs < 5.0, || format!("forward took {secs:.2}s"))?;
        Ok(format!("{shapes:?} in {secs:.2}s"))
    });
}

// ---------------------------------------------------------------------------------------------
// 10. gradients against finite differences

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn toy_tree() -> TaxonomyTree {
    serde_json::from_value(serde_json::json!({
        "parent": {"A1": "A", "A2": "A", "B1": "B", "A": "F1", "B": "F2", "C": "F2"},
        "level": {"A1": "species", "A2": "species", "B1": "species", "A": "genus", "B": "genus", "C": "genus",
                  "F1": "family", "F2": "family", "Dead": "other"},
        "species_exclusion": ["C"],
        "genus_exclusion": ["Dead"]
    }))
    .unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    criterion(10, "gradient checks", || {
        let mut worst: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(10);

        // hierarchical loss: autograd of the tensor route vs differences of the scalar route
        let tree = toy_tree();
        let classes = ["A1", "A2", "B1", "C", "Dead"];
        let k = classes.len();
        let lw = [0.5, 0.3, 0.2];
        let hcfg = HierarchicalLossConfig::from_taxonomy(&tree, lw);
        for _ in 0..5 {
            let n = 6;
            let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
            let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let plan = HierarchyPlan::new(&classes, &labels, &tree, &hcfg).map_err(|e| e.to_string())?;
            let var = Var::from_vec(logits.clone(), (n, k), &Device::Cpu).unwrap();
            let loss = crownseg::nn::losses::hierarchical_loss(var.as_tensor(), &plan, lw).map_err(|e| e.to_string())?;
            let scalar = hierarchical_loss(&logits, &labels, &classes, &tree, &hcfg).map_err(|e| e.to_string())?;
            let lt = loss.to_scalar::<f64>().unwrap();
            check((lt - scalar).abs() < 1e-9, || format!("tensor loss {lt} vs scalar {scalar}"))?;
            let grad = loss.backward().unwrap().get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let h = 1e-6;
            for i in 0..n * k {
                let mut p = logits.clone();
                let mut m = logits.clone();
                p[i] += h;
                m[i] -= h;
                let fp = hierarchical_loss(&p, &labels, &classes, &tree, &hcfg).unwrap();
                let fm = hierarchical_loss(&m, &labels, &classes, &tree, &hcfg).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let e = rel_err(grad[i], fd);
                if grad[i].abs().max(fd.abs()) > 1e-7 {
                    worst = worst.max(e);
                }
                check(e <= 1e-3 || (grad[i] - fd).abs() < 1e-8, || format!("logit {i}: autograd {} vs fd {fd}", grad[i]))?;
            }
        }
        let worst_loss = worst;

        // DSM encoder in double precision, loss = sum(out * r)
        let spec = DsmEncoderSpec {
            layers: vec![
                EncoderLayer { kernel: 2, out: 4, stride: 2, same: false },
                EncoderLayer { kernel: 4, out: 6, stride: 4, same: false },
                EncoderLayer { kernel: 1, out: 5, stride: 1, same: false },
            ],
            zero_init_last: false,
        };
        let mut ps = ParamStore::new(3, DType::F64);
        let enc = DsmEncoder::new(&mut ps, "enc", &spec).map_err(|e| e.to_string())?;
        let input: Vec<f64> = (0..16 * 16).map(|_| rng.random::<f64>()).collect();
        let x = Tensor::from_vec(input, (1, 1, 16, 16), &Device::Cpu).unwrap();
        let rv: Vec<f64> = (0..5 * 2 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = Tensor::from_vec(rv, (1, 5, 2, 2), &Device::Cpu).unwrap();
        let objective = || -> f64 {
            (enc.forward(&x).unwrap() * &r).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let loss = (enc.forward(&x).unwrap() * &r).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut worst_enc: f64 = 0.0;
        let mut checked = 0;
        for (name, var) in ps.vars() {
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let g = grads.get(var.as_tensor()).ok_or_else(|| format!("no gradient for {name}"))?;
            let g = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().dims().to_vec();
            let picks: Vec<usize> = (0..base.len().min(6)).map(|j| j * base.len() / base.len().min(6)).collect();
            for i in picks {
                let h = 1e-5;
                let mut p = base.clone();
                p[i] += h;
                var.set(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let fp = objective();
                let mut m = base.clone();
                m[i] -= h;
                var.set(&Tensor::from_vec(m, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let fm = objective();
                var.set(&Tensor::from_vec(base.clone(), shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                let fd = (fp - fm) / (2.0 * h);
                let e = rel_err(g[i], fd);
                check(e <= 1e-3 || (g[i] - fd).abs() < 1e-8, || format!("{name}[{i}]: autograd {} vs fd {fd}", g[i]))?;
                if g[i].abs().max(fd.abs()) > 1e-7 {
                    worst_enc = worst_enc.max(e);
                }
                checked += 1;
            }
        }
        Ok(format!(
            "hierarchical loss max rel err {worst_loss:.1e}; encoder {checked} params, max rel err {worst_enc:.1e}"
        ))
    });
}

// ---------------------------------------------------------------------------------------------
// 11. overfitting a single tile

struct Probe {
    first: f64,
    tail: f64,
    single_map: f64,
}

fn overfit(model: &dyn Model, sample: &Sample, steps: usize) -> Result<Probe, String> {
    let mut trainer = Trainer::new(model, &probe_recipe(steps), 1).map_err(|e| e.to_string())?;
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(trainer.step(&[sample]).map_err(|e| e.to_string())?.loss);
    }
    let tail = losses[steps - 10..].iter().sum::<f64>() / 10.0;
    let img = EvalImage {
        ground_truth: ground_truth(sample),
        detections: model.predict(sample).map_err(|e| e.to_string())?,
    };
    let report = evaluate(&[img], &["c0".to_string()], None, IouThresholds::Coco).map_err(|e| e.to_string())?;
    Ok(Probe {
        first: losses[0],
        tail,
        single_map: report.single_class_map,
    })
}

#[test]
fn every_family_overfits_one_tile() {
    criterion(11, "overfit probe", || {
        let size = 128;
        let steps = 200;
        let sample = crownseg::synth::sample(size, 3, 1, 0);
        let t0 = Instant::now();
        let mut notes = Vec::new();
        let mut failures = Vec::new();

        let detector = |dsm: DsmInput| -> Result<Detector, String> {
            let mut cfg = DetectorConfig::new(DetectorKind::Mask, dsm, 1);
            cfg.dsm_encoder = DsmEncoderSpec::stack_with_widths(8, 16);
            Detector::new(cfg, size, ClassLoss::CrossEntropy, 0).map_err(|e| e.to_string())
        };
        let prompter = |variant: Option<FusionVariant>| -> Result<AnchorPrompter, String> {
            let sam = Arc::new(MockSam::new(size, 0).map_err(|e| e.to_string())?);
            let cfg = PrompterConfig {
                dsm_encoder: DsmEncoderSpec::prompt_with_widths(16, 64),
                ..PrompterConfig::default()
            };
            AnchorPrompter::new(sam, cfg, variant, ClassLoss::CrossEntropy, 0).map_err(|e| e.to_string())
        };
        let families: Vec<(&str, Box<dyn Model>, bool)> = vec![
            ("Mask R-CNN", Box::new(detector(DsmInput::None)?), true),
            ("Mask R-CNN+DSM", Box::new(detector(DsmInput::Encoder)?), false),
            ("RSPrompter", Box::new(prompter(None)?), false),
            ("BalSAM", Box::new(prompter(Some(FusionVariant::Balsam))?), true),
        ];
        for (name, model, needs_map) in families {
            let p = overfit(model.as_ref(), &sample, steps)?;
            let drop = 1.0 - p.tail / p.first;
            notes.push(format!("{name} {:.3}->{:.3} ({:.1}%) mAP1 {:.2}", p.first, p.tail, drop * 100.0, p.single_map));
            if drop < 0.9 {
                failures.push(format!("{name} loss dropped only {:.1}%", drop * 100.0));
            }
            if needs_map && p.single_map < 0.5 {
                failures.push(format!("{name} single-class mAP {:.3}", p.single_map));
            }
        }
        let mins = t0.elapsed().as_secs_f64() / 60.0;
        if mins > 60.0 {
            failures.push(format!("took {mins:.1} min"));
        }
        if failures.is_empty() {
            Ok(format!("{}; {mins:.1} min", notes.join("; ")))
        } else {
            Err(format!("{} ({})", failures.join(", "), notes.join("; ")))
        }
    });
}

// ---------------------------------------------------------------------------------------------
// 12. loss reductions

fn data_file(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn loss_reductions() {
    criterion(12, "loss reductions", || {
        let tree: TaxonomyTree =
            serde_json::from_str(&std::fs::read_to_string(data_file("sbl_taxonomy.json")).unwrap()).unwrap();
        tree.validate().map_err(|e| e.to_string())?;
        let schema: ClassSchema =
            serde_json::from_str(&std::fs::read_to_string(data_file("sbl_schema.json")).unwrap()).unwrap();
        let classes = &schema.classes;
        let k = classes.len();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let logits: Vec<f64> = (0..n * k).map(|_| rng.random_range(-4.0..4.0)).collect();
        let u32_labels: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
        let tensor = Tensor::from_vec(logits.clone(), (n, k), &Device::Cpu).unwrap();

        let ce = cross_entropy(&logits, &labels, k).map_err(|e| e.to_string())?;
        let ce_t = crownseg::nn::losses::cross_entropy(&tensor, &u32_labels).unwrap().to_scalar::<f64>().unwrap();
        check((ce - ce_t).abs() <= 1e-9, || format!("scalar CE {ce} vs tensor CE {ce_t}"))?;

        let flat = HierarchicalLossConfig {
            level_weights: [1.0, 0.0, 0.0],
            species_exclusion: Default::default(),
            genus_exclusion: Default::default(),
        };
        let h = hierarchical_loss(&logits, &labels, classes, &tree, &flat).map_err(|e| e.to_string())?;
        check((h - ce).abs() <= 1e-9, || format!("hierarchical (1,0,0) {h} vs CE {ce}"))?;
        let plan = HierarchyPlan::new(classes, &labels, &tree, &flat).map_err(|e| e.to_string())?;
        let h_t = crownseg::nn::losses::hierarchical_loss(&tensor, &plan, [1.0, 0.0, 0.0])
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        check((h_t - ce).abs() <= 1e-9, || format!("tensor hierarchical {h_t} vs CE {ce}"))?;

        let uniform = ClassWeights::uniform(classes);
        let w = weighted_cross_entropy(&logits, &labels, classes, &uniform).map_err(|e| e.to_string())?;
        check((w - ce).abs() <= 1e-9, || format!("uniform weighted CE {w} vs CE {ce}"))?;
        let w_t = crownseg::nn::losses::weighted_cross_entropy(&tensor, &u32_labels, &vec![1.0; k])
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        check((w_t - ce).abs() <= 1e-9, || format!("tensor uniform weighted CE {w_t} vs CE {ce}"))?;

        // a crown labelled only to genus Acer: no species term, genus term over every maple
        let cfg = HierarchicalLossConfig::from_taxonomy(&tree, [1.0 / 3.0; 3]);
        let acer = schema.index_of("Acer").unwrap();
        let thoc = schema.index_of("THOC").unwrap();
        let batch = vec![acer, thoc];
        let plan = HierarchyPlan::new(classes, &batch, &tree, &cfg).map_err(|e| e.to_string())?;
        check(plan.species.targets[0].is_none(), || "Acer instance kept in the species term".into())?;
        check(plan.genus.targets[0].is_some(), || "Acer instance dropped from the genus term".into())?;
        let mut row: Vec<f64> = (0..2 * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let species_before = bucket_nll(&row, k, &plan.species);
        for v in row[..k].iter_mut() {
            *v += rng.random_range(-5.0..5.0);
        }
        let species_after = bucket_nll(&row, k, &plan.species);
        check(species_before == species_after, || "Acer logits leak into the species term".into())?;

        let only = HierarchyPlan::new(classes, &[acer], &tree, &cfg).map_err(|e| e.to_string())?;
        let r = &row[..k];
        let z: f64 = r.iter().map(|v| v.exp()).sum();
        let maples: f64 = ["Acer", "ACPE", "ACSA", "ACRU"].iter().map(|c| r[schema.index_of(c).unwrap()].exp()).sum();
        let want = -(maples / z).ln();
        let got = bucket_nll(r, k, &only.genus);
        check((got - want).abs() <= 1e-9, || format!("Acer genus term {got} vs -log p(maple) {want}"))?;
        let got_t = crownseg::nn::losses::bucket_nll(&Tensor::from_vec(r.to_vec(), (1, k), &Device::Cpu).unwrap(), &only.genus)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        check((got_t - want).abs() <= 1e-9, || format!("tensor Acer genus term {got_t} vs {want}"))?;

        let pinopsida = schema.index_of("Pinopsida").unwrap();
        let plan = HierarchyPlan::new(classes, &[pinopsida], &tree, &cfg).map_err(|e| e.to_string())?;
        check(plan.genus.targets[0].is_none() && plan.species.targets[0].is_none(), || {
            "coarse label kept in a fine term".into()
        })?;
        Ok(format!("CE {ce:.6}: hierarchical and uniform weighted equal; Acer rule holds"))
    });
}

// ---------------------------------------------------------------------------------------------
// 13. NMS

fn random_box_det(rng: &mut ChaCha8Rng, with_mask: bool) -> Detection {
    let x0 = rng.random_range(0..12);
    let y0 = rng.random_range(0..12);
    let x1 = (x0 + rng.random_range(2..8)).min(SIDE);
    let y1 = (y0 + rng.random_range(2..8)).min(SIDE);
    let class = rng.random_range(0..2);
    let score = random_score(rng);
    let d = Detection::new(BBox::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64), class, score);
    if with_mask {
        d.with_mask(Mask::from_fn(SIDE, SIDE, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1 && (x + y) % 5 != 0))
    } else {
        d
    }
}

fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.x1 - a.x0) * (a.y1 - a.y0) + (b.x1 - b.x0) * (b.y1 - b.y0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The greedy result is the unique subset that is consistent with itself: a detection is in it
/// exactly when no higher-ranked member conflicts with it. Search every subset for it.
fn subset_oracle(dets: &[Detection], cfg: &NmsConfig) -> Result<Vec<usize>, String> {
    let mut rank: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.score_threshold).collect();
    for i in 1..rank.len() {
        let mut j = i;
        while j > 0 && dets[rank[j - 1]].score < dets[rank[j]].score {
            rank.swap(j - 1, j);
            j -= 1;
        }
    }
    let conflict = |a: &Detection, b: &Detection| {
        let same = cfg.class_agnostic || a.class_id == b.class_id;
        let ov = match (cfg.overlap_basis, &a.mask, &b.mask) {
            (OverlapBasis::Mask, Some(ma), Some(mb)) => pixel_iou(ma, mb),
            _ => box_iou(&a.bbox, &b.bbox),
        };
        same && ov > cfg.iou_threshold
    };
    let n = rank.len();
    let mut found = Vec::new();
    for bits in 0u32..(1 << n) {
        let member = |p: usize| bits & (1 << p) != 0;
        let consistent = (0..n).all(|p| {
            let blocked = (0..p).any(|q| member(q) && conflict(&dets[rank[q]], &dets[rank[p]]));
            member(p) == !blocked
        });
        if consistent {
            found.push((0..n).filter(|&p| member(p)).map(|p| rank[p]).collect::<Vec<_>>());
        }
    }
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        c => Err(format!("{c} self-consistent subsets")),
    }
}

#[test]
fn nms_matches_subset_search() {
    criterion(13, "NMS", || {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for f in 0..100 {
            let n = rng.random_range(0..=10);
            let with_masks = rng.random_bool(0.7);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    let masked = with_masks && rng.random_bool(0.9);
                    random_box_det(&mut rng, masked)
                })
                .collect();
            let cfg = NmsConfig {
                score_threshold: [0.0, 0.3, 0.5][rng.random_range(0..3)],
                iou_threshold: [0.3, 0.5, 0.7][rng.random_range(0..3)],
                class_agnostic: rng.random_bool(0.5),
                overlap_basis: if rng.random_bool(0.5) { OverlapBasis::Mask } else { OverlapBasis::Box },
            };
            let got = nms_indices(&dets, &cfg);
            let want = subset_oracle(&dets, &cfg).map_err(|e| format!("fixture {f}: {e}"))?;
            check(got == want, || format!("fixture {f} {cfg:?}: {got:?} vs {want:?}"))?;
        }
        // two overlapping crowns given different species
        let m = |x0: usize| Mask::from_fn(SIDE, SIDE, move |x, y| x >= x0 && x < x0 + 8 && (2..10).contains(&y));
        let pair = vec![det_from_mask(m(2), 0, 0.9), det_from_mask(m(3), 1, 0.8)];
        let aware = nms_indices(&pair, &NmsConfig::default());
        let agnostic = nms_indices(
            &pair,
            &NmsConfig {
                class_agnostic: true,
                ..NmsConfig::default()
            },
        );
        check(aware == vec![0, 1], || format!("class-aware kept {aware:?}"))?;
        check(agnostic == vec![0], || format!("class-agnostic kept {agnostic:?}"))?;
        Ok("100 fixtures equal the subset search; class-aware keeps 2, agnostic keeps 1".into())
    });
}

// ---------------------------------------------------------------------------------------------
// 14. end-to-end determinism

fn cli_run(args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["crownseg"];
    argv.extend_from_slice(args);
    let parsed = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
    cli::run(parsed).map_err(|e| format!("{}: {e}", args.join(" ")))
}

fn pipeline(root: &Path) -> Result<(Vec<u8>, Vec<u8>), String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    cli_run(&["--seed", "0", "--out", &p("scene"), "synth", "--width", "384", "--height", "384", "--crowns", "16"])?;
    cli_run(&[
        "--out",
        &p("tiles"),
        "tile",
        "--rgb",
        &p("scene/ortho.tif"),
        "--dsm",
        &p("scene/dsm.tif"),
        "--annotations",
        &p("scene/annotations.geojson"),
        "--aoi",
        &p("scene/aoi.geojson"),
        "--splits",
        &p("scene/splits.geojson"),
        "--tile-size",
        "128",
    ])?;
    let config = r#"
model = "maskrcnn"
dsm = "stack"
image_size = 128
data_dir = "tiles"
seed = 0

[recipe]
optimizer = "adamw"
base_lr = 0.001
weight_decay = 0.0
warmup = false
schedule = "cosine"
batch_size = 2
max_epochs = 2
random_flip = false

[detector]
widths = [8, 16, 16, 16]
"#;
    std::fs::write(root.join("exp.toml"), config).map_err(|e| e.to_string())?;
    cli_run(&["--config", &p("exp.toml"), "--out", &p("run"), "train"])?;
    cli_run(&["--out", &p("pred"), "predict", "--checkpoint", &p("run"), "--input", &p("tiles/test.json")])?;
    cli_run(&["--out", &p("eval"), "eval", "--gt", &p("tiles/test.json"), "--results", &p("pred/results.json")])?;
    let metrics = std::fs::read(root.join("eval/metrics.json")).map_err(|e| e.to_string())?;
    let results = std::fs::read(root.join("pred/results.json")).map_err(|e| e.to_string())?;
    Ok((metrics, results))
}

#[test]
fn pipeline_is_deterministic() {
    criterion(14, "end-to-end determinism", || {
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (ma, ra) = pipeline(a.path())?;
        let (mb, rb) = pipeline(b.path())?;
        check(!ma.is_empty(), || "empty metrics report".into())?;
        check(ma == mb, || "metrics reports differ".into())?;
        check(ra == rb, || "prediction files differ".into())?;
        Ok(format!("metrics.json ({} bytes) and results.json identical across runs", ma.len()))
    });
}
