//! Small convolutional encoder for the DSM channel.

use candle_core::{Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::same_pad;
use crate::nn::{Conv2d, LayerNorm2d, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub kernel: usize,
    pub out: usize,
    pub stride: usize,
    /// Pad so that a stride-1 layer keeps the spatial size.
    #[serde(default)]
    pub same: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DsmEncoderSpec {
    pub layers: Vec<EncoderLayer>,
    /// Start the last layer at zero so the encoder contributes nothing until trained.
    pub zero_init_last: bool,
}

impl DsmEncoderSpec {
    /// Encoder into the segmenter embedding grid: `S -> S/2 -> S/16 -> S/16`, 256 channels.
    pub fn prompt() -> Self {
        Self::prompt_with_widths(192, 768)
    }

    /// The prompt encoder with narrower hidden layers, for quick checks.
    pub fn prompt_with_widths(c1: usize, c2: usize) -> Self {
        Self {
            layers: vec![
                EncoderLayer { kernel: 2, out: c1, stride: 2, same: false },
                EncoderLayer { kernel: 8, out: c2, stride: 8, same: false },
                EncoderLayer { kernel: 1, out: 256, stride: 1, same: false },
            ],
            zero_init_last: true,
        }
    }

    /// Resolution-preserving encoder whose single output channel is stacked with the RGB input
    /// of a detector.
    pub fn stack() -> Self {
        Self::stack_with_widths(192, 768)
    }

    pub fn stack_with_widths(c1: usize, c2: usize) -> Self {
        Self {
            layers: vec![
                EncoderLayer { kernel: 2, out: c1, stride: 1, same: true },
                EncoderLayer { kernel: 2, out: c2, stride: 1, same: true },
                EncoderLayer { kernel: 1, out: 1, stride: 1, same: true },
            ],
            zero_init_last: false,
        }
    }

    /// Total downsampling factor.
    pub fn reduction(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.out)
    }

    /// Parameter count: every convolution's weights and bias plus the scale and shift of each
    /// normalization between layers.
    pub fn parameter_count(&self) -> usize {
        let mut c_in = 1;
        let mut total = 0;
        for (i, l) in self.layers.iter().enumerate() {
            total += l.kernel * l.kernel * c_in * l.out + l.out;
            if i + 1 < self.layers.len() {
                total += 2 * l.out;
            }
            c_in = l.out;
        }
        total
    }
}

#[derive(Clone, Debug)]
pub struct DsmEncoder {
    convs: Vec<(Conv2d, bool)>,
    norms: Vec<LayerNorm2d>,
    spec: DsmEncoderSpec,
}

impl DsmEncoder {
    pub fn new(ps: &mut ParamStore, name: &str, spec: &DsmEncoderSpec) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::Config("the DSM encoder needs at least one layer".into()));
        }
        for l in &spec.layers {
            if l.kernel == 0 || l.stride == 0 || l.out == 0 {
                return Err(Error::Config(format!("invalid DSM encoder layer {l:?}")));
            }
            if l.same && l.stride != 1 {
                return Err(Error::Config("same padding needs stride 1".into()));
            }
        }
        ps.scoped(name, |ps| {
            let mut convs = Vec::new();
            let mut norms = Vec::new();
            let mut c_in = 1;
            let last = spec.layers.len() - 1;
            for (i, l) in spec.layers.iter().enumerate() {
                let lname = format!("conv{}", i + 1);
                let conv = if i == last && spec.zero_init_last {
                    Conv2d::zeros(ps, &lname, c_in, l.out, l.kernel, l.stride, 0)?
                } else {
                    Conv2d::new(ps, &lname, c_in, l.out, l.kernel, l.stride, 0)?
                };
                convs.push((conv, l.same));
                if i < last {
                    norms.push(LayerNorm2d::new(ps, &format!("norm{}", i + 1), l.out)?);
                }
                c_in = l.out;
            }
            Ok(Self {
                convs,
                norms,
                spec: spec.clone(),
            })
        })
    }

    pub fn spec(&self) -> &DsmEncoderSpec {
        &self.spec
    }

    /// Output of every layer for a `[B, 1, H, W]` DSM.
    pub fn forward_chain(&self, dsm: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = dsm.dims4()?;
        let r = self.spec.reduction();
        if c != 1 || h % r != 0 || w % r != 0 || h == 0 || w == 0 {
            return Err(Error::Model(format!(
                "DSM encoder expects [B, 1, H, W] with sides divisible by {r}, got {:?}",
                dsm.dims()
            )));
        }
        let mut x = dsm.clone();
        let mut out = Vec::with_capacity(self.convs.len());
        for (i, (conv, same)) in self.convs.iter().enumerate() {
            if *same {
                x = same_pad(&x, conv.weight.dim(2)?)?;
            }
            x = conv.forward(&x)?;
            if let Some(n) = self.norms.get(i) {
                x = n.forward(&x)?.gelu_erf()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, dsm: &Tensor) -> Result<Tensor> {
        Ok(self.forward_chain(dsm)?.pop().expect("at least one layer"))
    }
}

/// Element-wise sum of two embeddings of identical shape.
pub fn fuse(image: &Tensor, dsm: &Tensor) -> Result<Tensor> {
    if image.dims() != dsm.dims() {
        return Err(Error::Model(format!(
            "cannot fuse embeddings of shapes {:?} and {:?}",
            image.dims(),
            dsm.dims()
        )));
    }
    Ok((image + dsm)?)
}
