//! Interface shared by every trainable model.

use std::collections::BTreeMap;

use candle_core::Tensor;
use crownseg_core::schedule::ModelKind;
use crownseg_core::Detection;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::Result;
use crate::nn::ParamStore;

/// Total training loss of one sample and the value of each term.
pub struct LossReport {
    pub total: Tensor,
    pub parts: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new(terms: Vec<(&str, Tensor)>) -> Result<Self> {
        let mut parts = BTreeMap::new();
        let mut total: Option<Tensor> = None;
        for (name, t) in terms {
            parts.insert(name.to_string(), crate::nn::scalar(&t)?);
            total = Some(match total {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        Ok(Self {
            total: total.expect("at least one loss term"),
            parts,
        })
    }
}

pub trait Model {
    fn kind(&self) -> ModelKind;
    /// Trainable parameters.
    fn params(&self) -> &ParamStore;
    fn loss(&self, sample: &Sample, rng: &mut ChaCha8Rng) -> Result<LossReport>;
    /// Post-processed detections in eval mode.
    fn predict(&self, sample: &Sample) -> Result<Vec<Detection>>;
    /// Checksums of frozen components that training must leave untouched.
    fn frozen_checksums(&self) -> Result<BTreeMap<String, String>> {
        Ok(BTreeMap::new())
    }
    /// Input side length the model expects.
    fn image_size(&self) -> usize;
}
