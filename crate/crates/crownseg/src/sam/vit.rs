//! Segmenter backed by the vision-transformer architecture from `candle-transformers`, at any
//! input size that is a multiple of 16. Weights come from a safetensors checkpoint using the
//! reference parameter names, or from a seeded initializer for offline tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder};
use candle_transformers::models::segment_anything::image_encoder::ImageEncoderViT;
use candle_transformers::models::segment_anything::mask_decoder::MaskDecoder;
use candle_transformers::models::segment_anything::prompt_encoder::PromptEncoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Segmenter, PIXEL_MEAN, PIXEL_STD};
use crate::error::{Error, Result};
use crate::nn::gaussian;

const PROMPT_DIM: usize = 256;
const PATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub global_attn: Vec<usize>,
    pub window: usize,
}

impl VitConfig {
    /// The ViT-Huge encoder.
    pub fn huge() -> Self {
        Self {
            embed_dim: 1280,
            depth: 32,
            heads: 16,
            global_attn: vec![7, 15, 23, 31],
            window: 14,
        }
    }

    /// A two-block encoder for tests.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 64,
            depth: 2,
            heads: 2,
            global_attn: vec![1],
            window: 4,
        }
    }
}

/// Tensor source for the architecture constructors that records everything it hands out.
struct Recorder {
    loaded: Option<HashMap<String, Tensor>>,
    seed: u64,
    seen: Mutex<BTreeMap<String, Tensor>>,
}

impl Recorder {
    fn sample(&self, shape: &Shape, name: &str, init: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let n = shape.elem_count();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ crownseg_core::color::fnv1a(name.as_bytes()));
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Randn { mean, stdev } => (0..n).map(|_| mean + stdev * gaussian(&mut rng)).collect(),
            Init::Uniform { lo, up } => {
                use rand::Rng;
                (0..n).map(|_| rng.random_range(lo..up)).collect()
            }
            Init::Kaiming { dist, fan, non_linearity } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    candle_nn::init::NormalOrUniform::Normal => {
                        (0..n).map(|_| std * gaussian(&mut rng)).collect()
                    }
                    candle_nn::init::NormalOrUniform::Uniform => {
                        use rand::Rng;
                        let b = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-b..b)).collect()
                    }
                }
            }
        };
        Tensor::from_vec(values, shape.clone(), dev)?.to_dtype(dtype)
    }
}

impl SimpleBackend for Recorder {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        let t = match &self.loaded {
            Some(map) => {
                let t = map.get(name).ok_or_else(|| {
                    candle_core::Error::CannotFindTensor { path: name.to_string() }.bt()
                })?;
                if t.shape() != &s {
                    return Err(candle_core::Error::UnexpectedShape {
                        msg: format!("shape mismatch for {name}"),
                        expected: s,
                        got: t.shape().clone(),
                    }
                    .bt());
                }
                t.to_dtype(dtype)?
            }
            None => self.sample(&s, name, h, dtype, dev)?,
        };
        self.seen.lock().expect("poisoned").insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let t = self
            .loaded
            .as_ref()
            .and_then(|m| m.get(name))
            .ok_or_else(|| candle_core::Error::CannotFindTensor { path: name.to_string() }.bt())?
            .to_dtype(dtype)?;
        self.seen.lock().expect("poisoned").insert(name.to_string(), t.clone());
        Ok(t)
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.loaded.as_ref().is_none_or(|m| m.contains_key(name))
    }
}

struct Shared(Arc<Recorder>);

impl SimpleBackend for Shared {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        self.0.get(s, name, h, dtype, dev)
    }
    fn get_unchecked(&self, name: &str, dtype: DType, dev: &Device) -> candle_core::Result<Tensor> {
        self.0.get_unchecked(name, dtype, dev)
    }
    fn contains_tensor(&self, name: &str) -> bool {
        self.0.contains_tensor(name)
    }
}

pub struct VitSam {
    image_size: usize,
    encoder: ImageEncoderViT,
    prompt: PromptEncoder,
    decoder: MaskDecoder,
    dense_pe: Tensor,
    params: BTreeMap<String, Tensor>,
}

impl VitSam {
    pub fn seeded(image_size: usize, cfg: &VitConfig, seed: u64) -> Result<Self> {
        Self::build(image_size, cfg, None, seed)
    }

    pub fn load(image_size: usize, cfg: &VitConfig, path: &Path) -> Result<Self> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Self::build(image_size, cfg, Some(map), 0)
    }

    fn build(
        image_size: usize,
        cfg: &VitConfig,
        loaded: Option<HashMap<String, Tensor>>,
        seed: u64,
    ) -> Result<Self> {
        if image_size == 0 || image_size % PATCH != 0 {
            return Err(Error::Config(format!(
                "segmenter image size {image_size} is not a positive multiple of {PATCH}"
            )));
        }
        let rec = Arc::new(Recorder {
            loaded,
            seed,
            seen: Mutex::new(BTreeMap::new()),
        });
        let vb = VarBuilder::from_backend(Box::new(Shared(rec.clone())), DType::F32, Device::Cpu);
        let e = image_size / PATCH;
        let encoder = ImageEncoderViT::new(
            image_size,
            PATCH,
            3,
            cfg.embed_dim,
            cfg.depth,
            cfg.heads,
            PROMPT_DIM,
            true,
            true,
            true,
            cfg.window,
            &cfg.global_attn,
            vb.pp("image_encoder"),
        )?;
        let prompt = PromptEncoder::new(PROMPT_DIM, (e, e), (image_size, image_size), 16, vb.pp("prompt_encoder"))?;
        let decoder = MaskDecoder::new(PROMPT_DIM, 3, 3, 256, vb.pp("mask_decoder"))?;
        let dense_pe = prompt.get_dense_pe()?;
        let params = rec.seen.lock().expect("poisoned").clone();
        Ok(Self {
            image_size,
            encoder,
            prompt,
            decoder,
            dense_pe,
            params,
        })
    }
}

impl Segmenter for VitSam {
    fn image_size(&self) -> usize {
        self.image_size
    }

    fn embed_dim(&self) -> usize {
        PROMPT_DIM
    }

    fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.image_size;
        if image.dims() != [1, 3, s, s] {
            return Err(Error::Model(format!(
                "segmenter expects a [1, 3, {s}, {s}] image, got {:?}",
                image.dims()
            )));
        }
        let dev = image.device();
        let mean = Tensor::new(&PIXEL_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, dev)?.reshape((1, 3, 1, 1))?;
        let x = image.to_dtype(DType::F32)?.broadcast_sub(&mean)?.broadcast_div(&std)?;
        Ok(self.encoder.forward(&x)?)
    }

    fn encode_points(&self, points: &[(f32, f32)]) -> Result<Tensor> {
        let n = points.len();
        let flat: Vec<f32> = points.iter().flat_map(|p| [p.0, p.1]).collect();
        let coords = Tensor::from_vec(flat, (n, 1, 2), &Device::Cpu)?;
        let labels = Tensor::ones((n, 1), DType::F32, &Device::Cpu)?;
        Ok(self.prompt.forward(Some((&coords, &labels)), None, None)?.0)
    }

    fn encode_boxes(&self, boxes: &Tensor) -> Result<Tensor> {
        let dtype = boxes.dtype();
        let b = boxes.to_dtype(DType::F32)?;
        let n = b.dim(0)?;
        if n == 0 {
            return Ok(Tensor::zeros((0, 2, PROMPT_DIM), dtype, &Device::Cpu)?);
        }
        // the upstream box embedding only broadcasts over a single box, so go one at a time;
        // the corner embeddings come back concatenated along the channel axis
        let tokens = (0..n)
            .map(|i| self.prompt.forward(None, Some(&b.narrow(0, i, 1)?), None).map(|t| t.0))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let tokens = Tensor::cat(&tokens, 0)?;
        Ok(tokens.reshape((n, 2, PROMPT_DIM))?.to_dtype(dtype)?)
    }

    fn no_mask_dense(&self) -> Result<Tensor> {
        Ok(self.prompt.forward(None, None, None)?.1.contiguous()?)
    }

    fn encode_masks(&self, masks: &Tensor) -> Result<Tensor> {
        Ok(self.prompt.forward(None, None, Some(&masks.to_dtype(DType::F32)?))?.1)
    }

    fn decode(
        &self,
        embedding: &Tensor,
        sparse: &Tensor,
        dense: &Tensor,
        multimask: bool,
    ) -> Result<(Tensor, Tensor)> {
        let (_, _, c) = sparse.dims3()?;
        if c != PROMPT_DIM {
            return Err(Error::Model(format!(
                "prompt tokens are {c} wide, the decoder takes {PROMPT_DIM}"
            )));
        }
        let f = |t: &Tensor| t.to_dtype(DType::F32);
        Ok(self
            .decoder
            .forward(&f(embedding)?, &self.dense_pe, &f(sparse)?, &f(dense)?, multimask)?)
    }

    fn named_parameters(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_architecture_shapes() {
        let sam = VitSam::seeded(64, &VitConfig::tiny(), 1).unwrap();
        let img = Tensor::zeros((1, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let emb = sam.encode_image(&img).unwrap();
        assert_eq!(emb.dims(), &[1, 256, 4, 4]);
        let boxes = Tensor::new(&[[4f32, 4.0, 30.0, 40.0]], &Device::Cpu).unwrap();
        let tok = sam.encode_boxes(&boxes).unwrap();
        let (m, iou) = sam.decode(&emb, &tok, &sam.no_mask_dense().unwrap(), true).unwrap();
        assert_eq!(m.dims(), &[1, 3, 16, 16]);
        assert_eq!(iou.dims(), &[1, 3]);
        let again = VitSam::seeded(64, &VitConfig::tiny(), 1).unwrap();
        assert_eq!(sam.checksum().unwrap(), again.checksum().unwrap());
        let keys = sam.component_checksums().unwrap();
        assert_eq!(keys.len(), 3);
    }

    #[test]
    fn box_batches_encode_like_single_boxes() {
        let sam = VitSam::seeded(64, &VitConfig::tiny(), 2).unwrap();
        let boxes = Tensor::new(&[[4f32, 4.0, 30.0, 40.0], [10.0, 2.0, 60.0, 20.0], [0.0, 0.0, 8.0, 8.0]], &Device::Cpu).unwrap();
        let all = sam.encode_boxes(&boxes).unwrap();
        assert_eq!(all.dims(), &[3, 2, PROMPT_DIM]);
        for i in 0..3 {
            let one = sam.encode_boxes(&boxes.narrow(0, i, 1).unwrap()).unwrap();
            let d = (all.narrow(0, i, 1).unwrap() - one).unwrap().abs().unwrap().sum_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }
}
