//! Tensor and raster operations shared by the models.

use candle_core::{DType, Tensor};
use crownseg_core::{BBox, Grid, Mask};

use crate::error::Result;

/// Rearrange `[N, C*r*r, H, W]` into `[N, C, H*r, W*r]`.
pub fn pixel_shuffle(x: &Tensor, r: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let oc = c / (r * r);
    x.reshape((n, oc, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .reshape((n, oc, h * r, w * r))
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / r, w / r);
    x.reshape((n, c, oh, r, ow, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .reshape((n, c * r * r, oh, ow))
}

/// Convolution whose stride equals its kernel size, as one matrix product over
/// non-overlapping patches. Trailing rows and columns that do not fill a patch are dropped.
pub fn patch_conv(x: &Tensor, weight: &Tensor) -> candle_core::Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let (oh, ow) = (h / k, w / k);
    let x = if oh * k != h || ow * k != w {
        x.narrow(2, 0, oh * k)?.narrow(3, 0, ow * k)?
    } else {
        x.clone()
    };
    let patches = x
        .reshape((n, c, oh, k, ow, k))?
        .permute((0, 2, 4, 1, 3, 5))?
        .reshape((n * oh * ow, c * k * k))?;
    patches
        .matmul(&weight.reshape((o, c * k * k))?.t()?)?
        .reshape((n, oh, ow, o))?
        .permute((0, 3, 1, 2))
}

/// Zero padding that keeps the spatial size under a stride-1 convolution with kernel `k`; the
/// odd pixel goes to the bottom and right.
pub fn same_pad(x: &Tensor, k: usize) -> candle_core::Result<Tensor> {
    let total = k - 1;
    let before = total / 2;
    let after = total - before;
    x.pad_with_zeros(2, before, after)?.pad_with_zeros(3, before, after)
}

/// Bilinear sample points and weights for one RoI bin grid. Returns flat `(index, weight)`
/// lists of length `out * out * s * s * 4`, where `s` is the sampling ratio.
fn roi_samples(
    b: &BBox,
    scale: f64,
    h: usize,
    w: usize,
    out: usize,
    sampling: usize,
    idx: &mut Vec<u32>,
    wts: &mut Vec<f64>,
) {
    let x0 = b.x0 * scale - 0.5;
    let y0 = b.y0 * scale - 0.5;
    let bw = ((b.x1 - b.x0) * scale).max(1e-6);
    let bh = ((b.y1 - b.y0) * scale).max(1e-6);
    let bin_w = bw / out as f64;
    let bin_h = bh / out as f64;
    let norm = 1.0 / (sampling * sampling) as f64;
    for oy in 0..out {
        for ox in 0..out {
            for sy in 0..sampling {
                for sx in 0..sampling {
                    let y = y0 + (oy as f64 + (sy as f64 + 0.5) / sampling as f64) * bin_h;
                    let x = x0 + (ox as f64 + (sx as f64 + 0.5) / sampling as f64) * bin_w;
                    push_bilinear(y, x, h, w, norm, idx, wts);
                }
            }
        }
    }
}

fn push_bilinear(
    y: f64,
    x: f64,
    h: usize,
    w: usize,
    norm: f64,
    idx: &mut Vec<u32>,
    wts: &mut Vec<f64>,
) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        for _ in 0..4 {
            idx.push(0);
            wts.push(0.0);
        }
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let mut yl = y.floor() as usize;
    let mut xl = x.floor() as usize;
    let (yh, xh);
    let (mut yy, mut xx) = (y, x);
    if yl >= h - 1 {
        yl = h - 1;
        yh = h - 1;
        yy = yl as f64;
    } else {
        yh = yl + 1;
    }
    if xl >= w - 1 {
        xl = w - 1;
        xh = w - 1;
        xx = xl as f64;
    } else {
        xh = xl + 1;
    }
    let ly = yy - yl as f64;
    let lx = xx - xl as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yi, xi, wt) in [
        (yl, xl, hy * hx),
        (yl, xh, hy * lx),
        (yh, xl, ly * hx),
        (yh, xh, ly * lx),
    ] {
        idx.push((yi * w + xi) as u32);
        wts.push(wt * norm);
    }
}

/// Differentiable RoIAlign: `features` is `[1, C, H, W]`, boxes are in image pixels and
/// `scale` maps image pixels to feature cells. Output `[N, C, out, out]`.
pub fn roi_align(
    features: &Tensor,
    boxes: &[BBox],
    scale: f64,
    out: usize,
    sampling: usize,
) -> Result<Tensor> {
    let (_, c, h, w) = features.dims4()?;
    let n = boxes.len();
    if n == 0 {
        return Ok(Tensor::zeros((0, c, out, out), features.dtype(), features.device())?);
    }
    let per = sampling * sampling * 4;
    let mut idx = Vec::with_capacity(n * out * out * per);
    let mut wts = Vec::with_capacity(n * out * out * per);
    for b in boxes {
        roi_samples(b, scale, h, w, out, sampling, &mut idx, &mut wts);
    }
    let dev = features.device();
    let idx = Tensor::from_vec(idx, n * out * out * per, dev)?;
    let wts = Tensor::from_vec(wts, (1, n * out * out, per), dev)?.to_dtype(features.dtype())?;
    let flat = features.reshape((c, h * w))?;
    let gathered = flat.index_select(&idx, 1)?.reshape((c, n * out * out, per))?;
    let pooled = gathered.broadcast_mul(&wts)?.sum(2)?;
    Ok(pooled
        .reshape((c, n, out, out))?
        .permute((1, 0, 2, 3))?
        .contiguous()?)
}

/// RoIAlign of a binary mask into an `out x out` target grid, thresholded at 0.5.
pub fn crop_mask(mask: &Mask, b: &BBox, out: usize) -> Vec<f32> {
    let (h, w) = (mask.height(), mask.width());
    let mut idx = Vec::new();
    let mut wts = Vec::new();
    roi_samples(b, 1.0, h, w, out, 2, &mut idx, &mut wts);
    let data = mask.grid().data();
    let per = 16;
    (0..out * out)
        .map(|i| {
            let v: f64 = (0..per)
                .map(|k| {
                    let j = i * per + k;
                    if data[idx[j] as usize] {
                        wts[j]
                    } else {
                        0.0
                    }
                })
                .sum();
            if v >= 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// Paste an `m x m` grid of probabilities into an image-sized mask inside `b`, sampling
/// bilinearly and thresholding at `thr`.
pub fn paste_mask(probs: &[f32], m: usize, b: &BBox, width: usize, height: usize, thr: f32) -> Mask {
    let x0 = b.x0.floor().max(0.0) as usize;
    let y0 = b.y0.floor().max(0.0) as usize;
    let x1 = (b.x1.ceil().max(0.0) as usize).min(width);
    let y1 = (b.y1.ceil().max(0.0) as usize).min(height);
    let bw = (b.x1 - b.x0).max(1e-6);
    let bh = (b.y1 - b.y0).max(1e-6);
    let mut g = Grid::filled(width, height, false);
    let sample = |u: f64, v: f64| -> f32 {
        // u, v in grid cell units with centers at k + 0.5
        let fx = (u - 0.5).clamp(0.0, (m - 1) as f64);
        let fy = (v - 0.5).clamp(0.0, (m - 1) as f64);
        let (xl, yl) = (fx.floor() as usize, fy.floor() as usize);
        let (xh, yh) = ((xl + 1).min(m - 1), (yl + 1).min(m - 1));
        let (lx, ly) = ((fx - xl as f64) as f32, (fy - yl as f64) as f32);
        let p = |y: usize, x: usize| probs[y * m + x];
        (1.0 - ly) * ((1.0 - lx) * p(yl, xl) + lx * p(yl, xh))
            + ly * ((1.0 - lx) * p(yh, xl) + lx * p(yh, xh))
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - b.x0) / bw * m as f64;
            let v = (y as f64 + 0.5 - b.y0) / bh * m as f64;
            if u < 0.0 || v < 0.0 || u > m as f64 || v > m as f64 {
                continue;
            }
            if sample(u, v) >= thr {
                g.set(x, y, true);
            }
        }
    }
    Mask::new(g)
}

/// Bilinear resize of a row-major `w x h` grid to `ow x oh` with half-pixel centers.
pub fn resize_bilinear(src: &[f32], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f32> {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let yl = fy.floor() as usize;
        let yh = (yl + 1).min(h - 1);
        let ly = (fy - yl as f64) as f32;
        for x in 0..ow {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let xl = fx.floor() as usize;
            let xh = (xl + 1).min(w - 1);
            let lx = (fx - xl as f64) as f32;
            let p = |yy: usize, xx: usize| src[yy * w + xx];
            out.push(
                (1.0 - ly) * ((1.0 - lx) * p(yl, xl) + lx * p(yl, xh))
                    + ly * ((1.0 - lx) * p(yh, xl) + lx * p(yh, xh)),
            );
        }
    }
    out
}

/// Fraction of foreground pixels in each `f x f` block.
pub fn downsample_mask(mask: &Mask, f: usize) -> Vec<f32> {
    let (w, h) = (mask.width() / f, mask.height() / f);
    let norm = 1.0 / (f * f) as f32;
    let mut out = vec![0.0f32; w * h];
    for y in 0..h * f {
        for x in 0..w * f {
            if mask.get(x, y) {
                out[(y / f) * w + x / f] += norm;
            }
        }
    }
    out
}

/// `[H, W, 3]` u8 image to a normalized `[1, 3, H, W]` tensor.
pub fn image_tensor(rgb: &Grid<[u8; 3]>, mean: [f32; 3], std: [f32; 3]) -> Result<Tensor> {
    let (w, h) = (rgb.width(), rgb.height());
    let mut data = vec![0f32; 3 * w * h];
    for (i, px) in rgb.data().iter().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = (f32::from(px[c]) - mean[c]) / std[c];
        }
    }
    Ok(Tensor::from_vec(data, (1, 3, h, w), &candle_core::Device::Cpu)?)
}

/// Grid of f32 to a `[1, 1, H, W]` tensor.
pub fn grid_tensor(g: &Grid<f32>) -> Result<Tensor> {
    Ok(Tensor::from_vec(
        g.data().to_vec(),
        (1, 1, g.height(), g.width()),
        &candle_core::Device::Cpu,
    )?)
}

pub fn to_f32_vec(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?)
}
