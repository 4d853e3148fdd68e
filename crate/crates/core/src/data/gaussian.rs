use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::GaussianDataSpec;
use crate::error::{Error, Result};
use crate::sampler::sample_rng;

const JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum GaussianStructure {
    /// `Sigma = variance * I`.
    Isotropic { variance: f64 },
    /// Squared-exponential kernel over pixel coordinates.
    Smooth { variance: f64, length_scale: f64 },
}

/// Gaussian target over an `height x width` grid with a seeded mean in `[-0.5, 0.5]`.
pub fn make_gaussian_spec(
    height: usize,
    width: usize,
    structure: GaussianStructure,
    seed: u64,
) -> Result<GaussianDataSpec> {
    let d = height * width;
    if d == 0 {
        return Err(Error::InvalidArgument("empty gaussian grid".into()));
    }
    let mut rng = sample_rng(seed, 0x6761_7573);
    let mean: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    let mut cov = vec![0.0; d * d];
    match structure {
        GaussianStructure::Isotropic { variance } => {
            if !(variance > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "variance {variance} must be positive"
                )));
            }
            (0..d).for_each(|i| cov[i * d + i] = variance);
        }
        GaussianStructure::Smooth {
            variance,
            length_scale,
        } => {
            if !(variance > 0.0) || length_scale < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "invalid smooth covariance (variance {variance}, length scale {length_scale})"
                )));
            }
            for i in 0..d {
                for j in 0..d {
                    let dy = (i / width) as f64 - (j / width) as f64;
                    let dx = (i % width) as f64 - (j % width) as f64;
                    let d2 = dy * dy + dx * dx;
                    let k = if d2 == 0.0 {
                        1.0
                    } else {
                        (-d2 / (2.0 * length_scale * length_scale)).exp()
                    };
                    cov[i * d + j] = variance * k;
                }
                cov[i * d + i] += JITTER;
            }
        }
    }
    GaussianDataSpec::new(height, width, mean, cov)
}
