use nalgebra::{DMatrix, DVector};

use super::{Denoiser, Prediction};
use crate::error::{shape_err, Error, Result};
use crate::latent::LatentState;
use crate::noise::NoiseSchedule;
use crate::schedule::TimestepField;

/// Gaussian data distribution over one `height x width` channel; channels are i.i.d.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDataSpec {
    height: usize,
    width: usize,
    mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    covariance: Vec<f64>,
}

impl GaussianDataSpec {
    pub fn new(height: usize, width: usize, mean: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        let d = height * width;
        if mean.len() != d || covariance.len() != d * d {
            return Err(shape_err(format!(
                "gaussian spec over {d} pixels got mean {} / covariance {}",
                mean.len(),
                covariance.len()
            )));
        }
        for i in 0..d {
            for j in 0..i {
                let (a, b) = (covariance[i * d + j], covariance[j * d + i]);
                if (a - b).abs() > 1e-12 {
                    return Err(Error::Numerical(format!(
                        "covariance not symmetric at ({i}, {j}): {a} vs {b}"
                    )));
                }
            }
        }
        if DMatrix::from_row_slice(d, d, &covariance).cholesky().is_none() {
            return Err(Error::Numerical("covariance is not positive definite".into()));
        }
        Ok(Self {
            height,
            width,
            mean,
            covariance,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn covariance(&self) -> &[f64] {
        &self.covariance
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Exact `E[eps | x]` under the heterogeneous forward process
/// `x = A x0 + D^(1/2) eps`, `A = diag(sqrt(alpha_bar))`, `D = diag(1 - alpha_bar)`.
pub fn oracle_predict(
    spec: &GaussianDataSpec,
    x: &LatentState,
    field: &TimestepField,
    schedule: &NoiseSchedule,
) -> Result<LatentState> {
    let d = spec.dim();
    if (x.height(), x.width()) != (spec.height, spec.width)
        || (field.height(), field.width()) != (spec.height, spec.width)
    {
        return Err(shape_err(format!(
            "oracle over {}x{} got latent {}x{} and field {}x{}",
            spec.height,
            spec.width,
            x.height(),
            x.width(),
            field.height(),
            field.width()
        )));
    }
    let alpha_bar: Vec<f64> = field.values().iter().map(|&t| schedule.alpha_bar(t)).collect();
    let scale: Vec<f64> = alpha_bar.iter().map(|a| a.sqrt()).collect();
    let noise_var: Vec<f64> = alpha_bar.iter().map(|a| 1.0 - a).collect();

    let sigma = &spec.covariance;
    let system = DMatrix::from_fn(d, d, |i, j| {
        let v = scale[i] * sigma[i * d + j] * scale[j];
        if i == j {
            v + noise_var[i]
        } else {
            v
        }
    });
    let chol = system.cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "posterior system is singular; pixel timesteps {:?}",
            field.values()
        ))
    })?;

    let mut out = Vec::with_capacity(x.data().len());
    for c in 0..x.channels() {
        let xc = x.channel(c);
        let residual = DVector::from_fn(d, |i, _| xc[i] - scale[i] * spec.mean[i]);
        let y = chol.solve(&residual);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += sigma[i * d + j] * scale[j] * y[j];
            }
            let x0 = spec.mean[i] + acc;
            out.push((xc[i] - scale[i] * x0) / noise_var[i].sqrt());
        }
    }
    LatentState::from_vec(x.channels(), x.height(), x.width(), out)
}

/// Closed-form denoiser for Gaussian data; reports no attention.
#[derive(Debug, Clone)]
pub struct GaussianOracle {
    pub spec: GaussianDataSpec,
    pub schedule: NoiseSchedule,
}

impl Denoiser for GaussianOracle {
    fn predict(
        &self,
        x: &LatentState,
        field: &TimestepField,
        _tokens: Option<&[usize]>,
    ) -> Result<Prediction> {
        Ok(Prediction {
            eps: oracle_predict(&self.spec, x, field, &self.schedule)?,
            maps: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_unit_variance() {
        // cosine schedule: alpha_bar(T/2) = 0.5
        let s = NoiseSchedule::cosine(2.0);
        let ab = s.alpha_bar(1.0);
        let spec = GaussianDataSpec::new(1, 1, vec![0.0], vec![1.0]).unwrap();
        let x = LatentState::from_vec(1, 1, 1, vec![1.0]).unwrap();
        let field = TimestepField::uniform(1, 1, 2.0, 0, 1.0);
        let eps = oracle_predict(&spec, &x, &field, &s).unwrap();
        assert!((eps.data()[0] - (1.0 - ab).sqrt()).abs() < 1e-12);
        assert!((ab - 0.5).abs() < 1e-12);
        assert!((eps.data()[0] - 0.5f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn point_mass_limit() {
        let s = NoiseSchedule::cosine(10.0);
        let mean = vec![0.3, -0.7];
        let spec = GaussianDataSpec::new(1, 2, mean.clone(), vec![1e-14, 0.0, 0.0, 1e-14]).unwrap();
        let x = LatentState::from_vec(1, 1, 2, vec![0.4, 1.1]).unwrap();
        let field = TimestepField::from_values(1, 2, 10.0, 0, vec![3.0, 8.0]).unwrap();
        let eps = oracle_predict(&spec, &x, &field, &s).unwrap();
        for (p, &t) in field.values().iter().enumerate() {
            let ab = s.alpha_bar(t);
            let expected = (x.data()[p] - ab.sqrt() * mean[p]) / (1.0 - ab).sqrt();
            assert!((eps.data()[p] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        assert!(GaussianDataSpec::new(1, 2, vec![0.0; 2], vec![1.0, 0.1, 0.2, 1.0]).is_err());
        assert!(GaussianDataSpec::new(1, 2, vec![0.0; 2], vec![1.0, 2.0, 2.0, 1.0]).is_err());
    }
}
