//! Deterministic stand-in for the promptable segmenter.
//!
//! The encoder packs sixteen per-pixel colour features (sampled every 4 pixels) into the
//! `S/16 x S/16 x 256` embedding layout by pixel unshuffling, so the embedding grid has the
//! same shape as the real model's. Prompt tokens carry their normalized coordinates and a role
//! one-hot; the decoder reads the prompt geometry back from the tokens, builds foreground and
//! background colour prototypes from the window it describes, and scores every pixel by its
//! relative distance to the two. Every step is differentiable in the tokens and the dense
//! embedding so learned prompters can be trained against it.

use std::collections::BTreeMap;

use candle_core::{DType, Device, IndexOp, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Segmenter, PIXEL_MEAN, PIXEL_STD};
use crate::error::{Error, Result};
use crate::nn::gaussian;
use crate::nn::ops::{pixel_shuffle, pixel_unshuffle};

pub const EMBED_DIM: usize = 256;
/// Features per mask pixel; `16 * 4 * 4 = 256` embedding channels.
const FEATURES: usize = 16;
/// Feature channel that carries dense mask prompts.
const MASK_CHANNEL: usize = FEATURES - 1;

// token layout
const X: usize = 0;
const ROLE: usize = 2;
const ROLE_TL: usize = 0;
const ROLE_BR: usize = 1;
const ROLE_POINT: usize = 2;
const ROLES: usize = 3;
const GAIN: usize = 5;
const BIAS: usize = 6;
const FOURIER: usize = 8;

const BASE_GAIN: f64 = 8.0;
const OUTSIDE_PENALTY: f64 = 20.0;
const MASK_PROMPT_SCALE: f64 = 2.0;
/// Window half-sizes of the three point-prompt outputs, as fractions of the image side.
const POINT_RADII: [f64; 3] = [0.04, 0.08, 0.16];

pub struct MockSam {
    image_size: usize,
    params: BTreeMap<String, Tensor>,
}

impl MockSam {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || image_size % 16 != 0 {
            return Err(Error::Config(format!(
                "segmenter image size {image_size} is not a positive multiple of 16"
            )));
        }
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |n: usize, std: f64| -> Vec<f32> {
            (0..n).map(|_| (gaussian(&mut rng) * std) as f32).collect()
        };
        let extra = FEATURES - 3;
        let mut params = BTreeMap::new();
        params.insert(
            "image_encoder.proj.weight".to_string(),
            Tensor::from_vec(normal(extra * 3, 1.0), (extra, 3, 1, 1), &dev)?,
        );
        params.insert(
            "image_encoder.proj.bias".to_string(),
            Tensor::from_vec(normal(extra, 0.5), extra, &dev)?,
        );
        let nf = (EMBED_DIM - FOURIER) / 2;
        params.insert(
            "prompt_encoder.fourier".to_string(),
            Tensor::from_vec(normal(2 * nf, 4.0), (2, nf), &dev)?,
        );
        let mut w = vec![0.5f32; FEATURES];
        w[..3].fill(1.0);
        w[MASK_CHANNEL] = 1.0;
        params.insert(
            "mask_decoder.channel_weight".to_string(),
            Tensor::from_vec(w, FEATURES, &dev)?,
        );
        Ok(Self { image_size, params })
    }

    fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    fn token(&self, x: &[f32], y: &[f32], role: usize) -> Result<Tensor> {
        let n = x.len();
        let s = self.image_size as f32;
        let dev = Device::Cpu;
        let xy: Vec<f32> = x
            .iter()
            .zip(y)
            .flat_map(|(&a, &b)| [a / s, b / s])
            .collect();
        let xy = Tensor::from_vec(xy, (n, 2), &dev)?;
        // random Fourier features of the centred coordinates, as the real encoder does
        let proj = ((&xy * 2.0)? - 1.0)?.matmul(self.param("prompt_encoder.fourier"))?;
        let proj = (proj * std::f64::consts::TAU)?;
        let mut head = vec![0f32; n * FOURIER];
        for i in 0..n {
            head[i * FOURIER + ROLE + role] = 1.0;
        }
        let head = Tensor::from_vec(head, (n, FOURIER), &dev)?;
        let head = (head + xy.pad_with_zeros(1, 0, FOURIER - 2)?)?;
        Ok(Tensor::cat(&[head, proj.sin()?, proj.cos()?], 1)?)
    }

    /// Per-prompt geometry read from the tokens: `(centre, half-size)` tensors of shape
    /// `[N, 2]` for each of the `m` outputs.
    fn geometry(&self, sparse: &Tensor, m: usize) -> Result<Vec<(Tensor, Tensor)>> {
        let (n, t, _) = sparse.dims3()?;
        let roles = sparse.narrow(2, ROLE, ROLES)?.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        let mut first = Vec::with_capacity(n);
        let mut second = Vec::with_capacity(n);
        let mut is_point = Vec::with_capacity(n);
        for r in &roles {
            let role_of = |k: usize| -> usize {
                let mut best = 0;
                for j in 1..ROLES {
                    if r[k][j] > r[k][best] {
                        best = j;
                    }
                }
                best
            };
            let tl = (0..t).find(|&k| role_of(k) == ROLE_TL);
            let br = (0..t).find(|&k| role_of(k) == ROLE_BR);
            match (tl, br) {
                (Some(a), Some(b)) => {
                    first.push(a as u32);
                    second.push(b as u32);
                    is_point.push(false);
                }
                _ => {
                    let p = (0..t).find(|&k| role_of(k) == ROLE_POINT).ok_or_else(|| {
                        Error::Model("prompt tokens carry neither a box nor a point".into())
                    })?;
                    first.push(p as u32);
                    second.push(p as u32);
                    is_point.push(true);
                }
            }
        }
        let dev = sparse.device();
        let coords = sparse.narrow(2, X, 2)?.contiguous()?;
        let pick = |idx: Vec<u32>| -> Result<Tensor> {
            let idx = Tensor::from_vec(idx, (n, 1, 1), dev)?.broadcast_as((n, 1, 2))?.contiguous()?;
            Ok(coords.gather(&idx, 1)?.squeeze(1)?)
        };
        let s = self.image_size as f64;
        let a = (pick(first)? * s)?;
        let b = (pick(second)? * s)?;
        let centre = ((&a + &b)? * 0.5)?;
        let half = ((&b - &a)? * 0.5)?.abs()?;
        let mut out = Vec::with_capacity(m);
        for k in 0..m {
            let r = if m == 1 { POINT_RADII[1] } else { POINT_RADII[k] } * s;
            let extra: Vec<f64> = is_point.iter().map(|&p| if p { r } else { 0.0 }).collect();
            let extra = Tensor::from_vec(extra, (n, 1), dev)?.to_dtype(sparse.dtype())?;
            out.push((centre.clone(), half.broadcast_add(&extra)?));
        }
        Ok(out)
    }
}

/// Soft indicator of an axis-aligned window, `[N, M*M]`.
fn soft_window(xs: &Tensor, ys: &Tensor, centre: &Tensor, half: &Tensor, tau: f64) -> Result<Tensor> {
    let cx = centre.i((.., 0..1))?;
    let cy = centre.i((.., 1..2))?;
    let hx = half.i((.., 0..1))?;
    let hy = half.i((.., 1..2))?;
    let sig = |t: Tensor| candle_nn::ops::sigmoid(&(t / tau)?);
    let left = sig(xs.broadcast_sub(&(&cx - &hx)?)?)?;
    let right = sig((&cx + &hx)?.broadcast_sub(xs)?)?;
    let top = sig(ys.broadcast_sub(&(&cy - &hy)?)?)?;
    let bottom = sig((&cy + &hy)?.broadcast_sub(ys)?)?;
    Ok(left.mul(&right)?.mul(&top)?.mul(&bottom)?)
}

/// Weighted average of the features under `weights` (`[N, P]`), giving `[N, C]`.
fn prototype(features: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let norm = (weights.sum_keepdim(1)? + 1e-6)?;
    let w = weights.broadcast_div(&norm)?;
    project(&w, features, true)
}

/// `a @ f^T`-style contraction against features `[B, C, P]` with `B` in `{1, N}`.
/// With `over_pixels` the result is `[N, C]` (sum over pixels), otherwise `[N, P]` (sum
/// over channels of `a: [N, C]`).
fn project(a: &Tensor, features: &Tensor, over_pixels: bool) -> Result<Tensor> {
    let b = features.dim(0)?;
    Ok(match (b, over_pixels) {
        (1, true) => a.matmul(&features.squeeze(0)?.t()?)?,
        (1, false) => a.matmul(&features.squeeze(0)?)?,
        (_, true) => a
            .unsqueeze(1)?
            .matmul(&features.transpose(1, 2)?.contiguous()?)?
            .squeeze(1)?,
        (_, false) => a.unsqueeze(1)?.matmul(features)?.squeeze(1)?,
    })
}

impl Segmenter for MockSam {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.image_size;
        let dims = image.dims();
        if dims != [1, 3, s, s] {
            return Err(Error::Model(format!(
                "segmenter expects a [1, 3, {s}, {s}] image, got {dims:?}"
            )));
        }
        let dev = image.device();
        let mean = Tensor::new(&PIXEL_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, dev)?.reshape((1, 3, 1, 1))?;
        let x = image
            .to_dtype(DType::F32)?
            .broadcast_sub(&mean)?
            .broadcast_div(&std)?
            .avg_pool2d(4)?;
        let proj = x
            .conv2d(self.param("image_encoder.proj.weight"), 0, 1, 1, 1)?
            .broadcast_add(&self.param("image_encoder.proj.bias").reshape((1, (), 1, 1))?)?
            .tanh()?;
        let feats = Tensor::cat(&[x, proj], 1)?;
        Ok(pixel_unshuffle(&feats, 4)?)
    }

    fn encode_points(&self, points: &[(f32, f32)]) -> Result<Tensor> {
        let x: Vec<f32> = points.iter().map(|p| p.0).collect();
        let y: Vec<f32> = points.iter().map(|p| p.1).collect();
        Ok(self.token(&x, &y, ROLE_POINT)?.unsqueeze(1)?)
    }

    fn encode_boxes(&self, boxes: &Tensor) -> Result<Tensor> {
        let v = boxes.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let col = |j: usize| -> Vec<f32> { v.iter().map(|b| b[j]).collect() };
        let tl = self.token(&col(0), &col(1), ROLE_TL)?;
        let br = self.token(&col(2), &col(3), ROLE_BR)?;
        Ok(Tensor::stack(&[tl, br], 1)?.to_dtype(boxes.dtype())?)
    }

    fn no_mask_dense(&self) -> Result<Tensor> {
        let e = self.embed_size();
        Ok(Tensor::zeros((1, EMBED_DIM, e, e), DType::F32, &Device::Cpu)?)
    }

    fn encode_masks(&self, masks: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = masks.dims4()?;
        let m = self.mask_size();
        if c != 1 || h != m || w != m {
            return Err(Error::Model(format!(
                "mask prompts must be [N, 1, {m}, {m}], got {:?}",
                masks.dims()
            )));
        }
        let x = (masks * MASK_PROMPT_SCALE)?;
        let x = x
            .pad_with_zeros(1, MASK_CHANNEL, FEATURES - 1 - MASK_CHANNEL)?
            .reshape((n, FEATURES, m, m))?;
        Ok(pixel_unshuffle(&x, 4)?)
    }

    fn decode(
        &self,
        embedding: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
        multimask: bool,
    ) -> Result<(Tensor, Tensor)> {
        let (n, _, c) = sparse.dims3()?;
        if c != EMBED_DIM {
            return Err(Error::Model(format!(
                "prompt tokens are {c} wide, the decoder takes {EMBED_DIM}"
            )));
        }
        let dtype = sparse.dtype();
        let dev = sparse.device().clone();
        let m = self.mask_size();
        let src = embedding.to_dtype(dtype)?.broadcast_add(&dense.to_dtype(dtype)?)?;
        let b = src.dim(0)?;
        if b != 1 && b != n {
            return Err(Error::Model(format!(
                "dense embedding batch {b} matches neither 1 nor {n} prompts"
            )));
        }
        let feats = pixel_shuffle(&src, 4)?.reshape((b, FEATURES, m * m))?;
        let w = self.param("mask_decoder.channel_weight").to_dtype(dtype)?;
        let wf = feats.broadcast_mul(&w.reshape((1, FEATURES, 1))?)?;
        // squared norm of every pixel feature, [B, P]
        let f2 = wf.mul(&feats)?.sum(1)?;

        let step = self.image_size as f64 / m as f64;
        let coords: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * step).collect();
        let xs: Vec<f64> = (0..m * m).map(|p| coords[p % m]).collect();
        let ys: Vec<f64> = (0..m * m).map(|p| coords[p / m]).collect();
        let xs = Tensor::from_vec(xs, (1, m * m), &dev)?.to_dtype(dtype)?;
        let ys = Tensor::from_vec(ys, (1, m * m), &dev)?.to_dtype(dtype)?;

        let gain = sparse.i((.., .., GAIN))?.mean(1)?.unsqueeze(1)?;
        let kappa = (gain.clamp(-3.0, 3.0)?.exp()? * BASE_GAIN)?;
        let bias = sparse.i((.., .., BIAS))?.mean(1)?.unsqueeze(1)?;

        let outputs = if multimask { 3 } else { 1 };
        let mut masks = Vec::with_capacity(outputs);
        let mut scores = Vec::with_capacity(outputs);
        for (centre, half) in self.geometry(sparse, outputs)? {
            let window = soft_window(&xs, &ys, &centre, &half, step)?;
            let outer_half = ((&half * 1.5)? + 2.0 * step)?;
            let outer = soft_window(&xs, &ys, &centre, &outer_half, step)?;
            let ring = outer.mul(&window.affine(-1.0, 1.0)?)?;
            let sigma = (&half * 0.3)?.clamp(step, f64::MAX)?;
            let dx = xs.broadcast_sub(&centre.i((.., 0..1))?)?.broadcast_div(&sigma.i((.., 0..1))?)?;
            let dy = ys.broadcast_sub(&centre.i((.., 1..2))?)?.broadcast_div(&sigma.i((.., 1..2))?)?;
            let core = ((dx.sqr()? + dy.sqr()?)? * -0.5)?.exp()?;
            let fg = prototype(&feats, &core)?;
            let bg = prototype(&feats, &ring)?;
            // weighted squared distances of every pixel to the two prototypes, [N, P]
            let dist = |p: &Tensor| -> Result<Tensor> {
                let cross = project(&p.broadcast_mul(&w.unsqueeze(0)?)?, &feats, false)?;
                let p2 = p.sqr()?.broadcast_mul(&w.unsqueeze(0)?)?.sum_keepdim(1)?;
                Ok(f2.broadcast_sub(&(cross * 2.0)?)?.broadcast_add(&p2)?)
            };
            let sep = (&fg - &bg)?.sqr()?.broadcast_mul(&w.unsqueeze(0)?)?.sum_keepdim(1)?;
            let rel = (dist(&bg)? - dist(&fg)?)?.broadcast_div(&(sep + 1e-6)?)?;
            // pixels more than a cell outside the prompt window are pushed to background
            let allowed = soft_window(&xs, &ys, &centre, &(&half + step)?, 0.5 * step)?;
            let logits = rel
                .broadcast_mul(&kappa)?
                .broadcast_add(&bias)?
                .sub(&(allowed.affine(-1.0, 1.0)? * OUTSIDE_PENALTY)?)?;
            // stability of the mask under a +-1 shift of the logit threshold
            let hi = logits.ge(1.0)?.to_dtype(DType::F32)?.sum(1)?;
            let lo = logits.ge(-1.0)?.to_dtype(DType::F32)?.sum(1)?;
            let stab = hi.div(&lo.clamp(1.0, f64::MAX)?)?;
            masks.push(logits.reshape((n, 1, m, m))?);
            scores.push(stab.reshape((n, 1))?);
        }
        Ok((Tensor::cat(&masks, 1)?, Tensor::cat(&scores, 1)?))
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}
