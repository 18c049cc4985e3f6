//! Uniform contract over the frozen promptable segmenter and the pipelines built on it:
//! automatic grid prompting, DSM-peak prompting and detector-box prompting.

pub mod mock;
pub mod vit;

use std::collections::BTreeMap;
use std::path::PathBuf;

use candle_core::{DType, Device, IndexOp, Tensor};
use crownseg_core::dsm::{peak_prompts, DsmChannel, PeakConfig};
use crownseg_core::nms::{nms, NmsConfig, OverlapBasis};
use crownseg_core::prompts::{automatic_grid_prompts, point_prompts, PromptSet};
use crownseg_core::{BBox, Detection, Grid, Mask};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::{downsample_mask, resize_bilinear, to_f32_vec};

pub use mock::MockSam;
pub use vit::{VitConfig, VitSam};

pub const PIXEL_MEAN: [f32; 3] = [123.675, 116.28, 103.53];
pub const PIXEL_STD: [f32; 3] = [58.395, 57.12, 57.375];

/// Promptable segmenter: image encoder, prompt encoder and mask decoder.
///
/// Embeddings are `[1, C, S/16, S/16]` for an `S x S` image; the decoder returns mask logits at
/// `S/4` resolution, `[N, M, S/4, S/4]`, and a predicted quality score per mask, `[N, M]`.
pub trait Segmenter {
    fn image_size(&self) -> usize;
    fn embed_dim(&self) -> usize;

    fn embed_size(&self) -> usize {
        self.image_size() / 16
    }

    fn mask_size(&self) -> usize {
        self.image_size() / 4
    }

    /// `image` is `[1, 3, S, S]` holding raw 0-255 RGB values.
    fn encode_image(&self, image: &Tensor) -> Result<Tensor>;
    /// Positive point prompts in image pixels, `[N, T, C]` tokens.
    fn encode_points(&self, points: &[(f32, f32)]) -> Result<Tensor>;
    /// Boxes `[N, 4]` in image pixels to `[N, T, C]` tokens.
    fn encode_boxes(&self, boxes: &Tensor) -> Result<Tensor>;
    /// Dense embedding used when no mask prompt is given, `[1, C, S/16, S/16]`.
    fn no_mask_dense(&self) -> Result<Tensor>;
    /// Mask prompts `[N, 1, S/4, S/4]` to dense embeddings `[N, C, S/16, S/16]`.
    fn encode_masks(&self, masks: &Tensor) -> Result<Tensor>;
    fn decode(
        &self,
        embedding: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
        multimask: bool,
    ) -> Result<(Tensor, Tensor)>;
    /// Every frozen tensor, names prefixed by component (`image_encoder.`, `prompt_encoder.`,
    /// `mask_decoder.`).
    fn named_parameters(&self) -> Vec<(String, Tensor)>;

    /// SHA-256 of the parameters of each component.
    fn component_checksums(&self) -> Result<BTreeMap<String, String>> {
        let params = self.named_parameters();
        let mut groups: BTreeMap<String, Vec<(&str, &Tensor)>> = BTreeMap::new();
        for (name, t) in &params {
            let comp = name.split('.').next().unwrap_or("").to_string();
            groups.entry(comp).or_default().push((name.as_str(), t));
        }
        let mut out = BTreeMap::new();
        for (comp, mut v) in groups {
            v.sort_by(|a, b| a.0.cmp(b.0));
            out.insert(comp, crate::nn::checksum(v.into_iter())?);
        }
        Ok(out)
    }

    fn checksum(&self) -> Result<String> {
        let mut params = self.named_parameters();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        crate::nn::checksum(params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    fn encode_rgb(&self, rgb: &Grid<[u8; 3]>) -> Result<Tensor> {
        self.encode_image(&rgb_tensor(rgb)?)
    }
}

/// Raw RGB grid to `[1, 3, H, W]` f32 without normalization.
pub fn rgb_tensor(rgb: &Grid<[u8; 3]>) -> Result<Tensor> {
    crate::nn::ops::image_tensor(rgb, [0.0; 3], [1.0; 3])
}

/// How the segmenter is instantiated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterSpec {
    /// Deterministic test double.
    Mock { image_size: usize, seed: u64 },
    /// Vision-transformer architecture, from a safetensors checkpoint or seeded weights.
    Vit {
        image_size: usize,
        encoder: VitConfig,
        checkpoint: Option<PathBuf>,
        seed: u64,
    },
}

impl SegmenterSpec {
    pub fn image_size(&self) -> usize {
        match self {
            SegmenterSpec::Mock { image_size, .. } | SegmenterSpec::Vit { image_size, .. } => {
                *image_size
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Segmenter>> {
        Ok(match self {
            SegmenterSpec::Mock { image_size, seed } => Box::new(MockSam::new(*image_size, *seed)?),
            SegmenterSpec::Vit {
                image_size,
                encoder,
                checkpoint,
                seed,
            } => Box::new(match checkpoint {
                Some(p) => VitSam::load(*image_size, encoder, p)?,
                None => VitSam::seeded(*image_size, encoder, *seed)?,
            }),
        })
    }
}

/// One mask returned for a prompt, at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPrediction {
    pub prompt: usize,
    pub mask: Mask,
    pub predicted_iou: f64,
}

/// Upsample `[M, M]` logits to the image and threshold at zero.
pub fn logits_to_mask(logits: &[f32], m: usize, size: usize) -> Mask {
    let up = resize_bilinear(logits, m, m, size, size);
    Mask::new(Grid::from_vec(size, size, up.into_iter().map(|v| v > 0.0).collect()).expect("sized"))
}

fn reduce_outputs(
    sam: &dyn Segmenter,
    masks: &Tensor,
    ious: &Tensor,
    offset: usize,
    out: &mut Vec<MaskPrediction>,
) -> Result<()> {
    let (n, k, m, _) = masks.dims4()?;
    let ious = ious.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    for i in 0..n {
        let mut best = 0;
        for j in 1..k {
            if ious[i][j] > ious[i][best] {
                best = j;
            }
        }
        let logits = to_f32_vec(&masks.i((i, best))?)?;
        let mask = logits_to_mask(&logits, m, sam.image_size());
        if mask.is_empty() {
            continue;
        }
        out.push(MaskPrediction {
            prompt: offset + i,
            mask,
            predicted_iou: f64::from(ious[i][best]).clamp(0.0, 1.0),
        });
    }
    Ok(())
}

/// Segment every prompt against a precomputed embedding. Point prompts use the multi-output
/// head reduced to the highest predicted IoU; box prompts use the single output. Prompts whose
/// mask is empty are dropped. Point prompts are indexed first, then boxes.
pub fn segment(
    sam: &dyn Segmenter,
    embedding: &Tensor,
    prompts: &PromptSet,
    batch: usize,
) -> Result<Vec<MaskPrediction>> {
    if prompts.is_empty() {
        return Err(crownseg_core::Error::InvalidPrompt("empty prompt set".into()).into());
    }
    if prompts.dense_mask().is_some() {
        return Err(Error::Usage(
            "dense mask prompts are not supported by the segmentation pipelines".into(),
        ));
    }
    if prompts.points().iter().any(|p| !p.positive) {
        return Err(Error::Usage("negative point prompts are not supported".into()));
    }
    let batch = batch.max(1);
    let dense = sam.no_mask_dense()?;
    let mut out = Vec::new();
    let pts: Vec<(f32, f32)> = prompts.points().iter().map(|p| (p.x as f32, p.y as f32)).collect();
    for (c, chunk) in pts.chunks(batch).enumerate() {
        let tokens = sam.encode_points(chunk)?;
        let (masks, ious) = sam.decode(embedding, &tokens, &dense, true)?;
        reduce_outputs(sam, &masks, &ious, c * batch, &mut out)?;
    }
    let boxes: Vec<[f32; 4]> = prompts
        .boxes()
        .iter()
        .map(|b| [b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32])
        .collect();
    for (c, chunk) in boxes.chunks(batch).enumerate() {
        let t = crate::nn::boxes::boxes_tensor(chunk, &Device::Cpu)?;
        let tokens = sam.encode_boxes(&t)?;
        let (masks, ious) = sam.decode(embedding, &tokens, &dense, false)?;
        reduce_outputs(sam, &masks, &ious, pts.len() + c * batch, &mut out)?;
    }
    Ok(out)
}

fn check_tile(sam: &dyn Segmenter, rgb: &Grid<[u8; 3]>) -> Result<()> {
    let s = sam.image_size();
    if rgb.width() != s || rgb.height() != s {
        return Err(Error::Model(format!(
            "tile is {}x{}, the segmenter takes {s}x{s}",
            rgb.width(),
            rgb.height()
        )));
    }
    Ok(())
}

fn to_detections(preds: Vec<MaskPrediction>) -> Vec<Detection> {
    preds
        .into_iter()
        .filter_map(|p| {
            let bbox = p.mask.bbox()?;
            let mut d = Detection::new(bbox, 0, p.predicted_iou).with_mask(p.mask);
            d.mask_score = Some(p.predicted_iou);
            Some(d)
        })
        .collect()
}

/// NMS used by the segmenter pipelines: score 0.5, mask IoU 0.5.
pub fn pipeline_nms() -> NmsConfig {
    NmsConfig {
        score_threshold: 0.5,
        iou_threshold: 0.5,
        class_agnostic: false,
        overlap_basis: OverlapBasis::Mask,
    }
}

/// Automatic mask generation from a `pps x pps` point grid, single class "tree".
pub fn run_sam_automatic(
    sam: &dyn Segmenter,
    rgb: &Grid<[u8; 3]>,
    pps: usize,
    nms_cfg: &NmsConfig,
    batch: usize,
) -> Result<Vec<Detection>> {
    check_tile(sam, rgb)?;
    let prompts = automatic_grid_prompts(pps, rgb.width(), rgb.height())?;
    let emb = sam.encode_rgb(rgb)?;
    let dets = to_detections(segment(sam, &emb, &prompts, batch)?);
    Ok(nms(&dets, nms_cfg))
}

/// Prompt the segmenter with the local maxima of the DSM.
pub fn run_sam_dsm_prompts(
    sam: &dyn Segmenter,
    rgb: &Grid<[u8; 3]>,
    dsm: Option<&DsmChannel>,
    peaks: &PeakConfig,
    nms_cfg: &NmsConfig,
    batch: usize,
) -> Result<Vec<Detection>> {
    check_tile(sam, rgb)?;
    let dsm = dsm.ok_or_else(|| Error::Usage("DSM-prompted segmentation needs a DSM".into()))?;
    let found = peak_prompts(dsm, peaks)?;
    if found.is_empty() {
        return Ok(Vec::new());
    }
    let prompts = point_prompts(&found, rgb.width(), rgb.height())?;
    let emb = sam.encode_rgb(rgb)?;
    let dets = to_detections(segment(sam, &emb, &prompts, batch)?);
    Ok(nms(&dets, nms_cfg))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    Boxes,
    BoxesAndMasks,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Keep the detector's box score.
    #[default]
    Box,
    /// Mean of the detector score and the segmenter's predicted IoU.
    Average,
}

/// Re-segment detector outputs with the segmenter. Output `i` corresponds to input `i`; class
/// labels pass through unchanged. A prompt whose mask comes back empty yields an empty mask.
pub fn run_detector_prompted(
    sam: &dyn Segmenter,
    rgb: &Grid<[u8; 3]>,
    detections: &[Detection],
    mode: PromptMode,
    score_mode: ScoreMode,
    batch: usize,
) -> Result<Vec<Detection>> {
    if detections.is_empty() {
        return Ok(Vec::new());
    }
    check_tile(sam, rgb)?;
    if mode == PromptMode::BoxesAndMasks && detections.iter().any(|d| d.mask.is_none()) {
        return Err(Error::Usage(
            "box-and-mask prompting needs detections with masks".into(),
        ));
    }
    let s = sam.image_size();
    let m = sam.mask_size();
    let emb = sam.encode_rgb(rgb)?;
    let mut out = Vec::with_capacity(detections.len());
    for chunk in detections.chunks(batch.max(1)) {
        let boxes: Vec<[f32; 4]> = chunk
            .iter()
            .map(|d| {
                let b = d.bbox.clamp(s as f64, s as f64);
                [b.x0 as f32, b.y0 as f32, b.x1 as f32, b.y1 as f32]
            })
            .collect();
        let tokens = sam.encode_boxes(&crate::nn::boxes::boxes_tensor(&boxes, &Device::Cpu)?)?;
        let dense = match mode {
            PromptMode::Boxes => sam.no_mask_dense()?,
            PromptMode::BoxesAndMasks => {
                let mut flat = Vec::with_capacity(chunk.len() * m * m);
                for d in chunk {
                    let mask = d.mask.as_ref().expect("checked above");
                    flat.extend(downsample_mask(mask, s / m));
                }
                sam.encode_masks(&Tensor::from_vec(flat, (chunk.len(), 1, m, m), &Device::Cpu)?)?
            }
        };
        let (masks, ious) = sam.decode(&emb, &tokens, &dense, false)?;
        let ious = ious.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        for (i, d) in chunk.iter().enumerate() {
            let logits = to_f32_vec(&masks.i((i, 0))?)?;
            let mask = logits_to_mask(&logits, m, s);
            let iou = f64::from(ious[i][0]).clamp(0.0, 1.0);
            let score = match score_mode {
                ScoreMode::Box => d.score,
                ScoreMode::Average => 0.5 * (d.score + iou),
            };
            out.push(Detection {
                bbox: mask.bbox().unwrap_or(d.bbox),
                mask: Some(mask),
                class_id: d.class_id,
                score,
                box_score: d.score,
                mask_score: Some(iou),
            });
        }
    }
    Ok(out)
}

/// Box prompts from detections, for callers that assemble their own prompt sets.
pub fn box_prompts(detections: &[Detection], size: usize) -> Result<PromptSet> {
    let boxes: Vec<BBox> = detections
        .iter()
        .map(|d| d.bbox.clamp(size as f64, size as f64))
        .collect();
    Ok(PromptSet::new(size, size, Vec::new(), boxes, None)?)
}
