//! Mean and standard error over seeds.

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MeanSe {
    pub mean: f64,
    /// sample standard deviation over sqrt(n); absent for a single value
    pub std_error: Option<f64>,
    pub n: usize,
}

pub fn mean_se(values: &[f64]) -> Option<MeanSe> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_error = (n > 1).then(|| {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        libm::sqrt(var) / libm::sqrt(n as f64)
    });
    Some(MeanSe { mean, std_error, n })
}
