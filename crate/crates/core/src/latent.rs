use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};

/// `channels x height x width` grid, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LatentState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err(format!(
                "latent {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Standard normal draws in storage order.
    pub fn standard_normal<R: Rng + ?Sized>(
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let data = (0..channels * height * width)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.pixels();
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn check_same_shape(&self, other: &LatentState, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::Numerical(format!(
                "{what} has non-finite value {} at element {k}",
                self.data[k]
            ))),
            None => Ok(()),
        }
    }
}
