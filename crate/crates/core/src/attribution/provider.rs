use crate::error::{Error, Result};
use crate::nn::{Network, ReluMode};
use crate::spectral::lowpass;
use crate::tensor::Tensor;

/// Source of `d logit_c / d x`, optionally low-passed per channel at `sigma`.
#[derive(Debug, Clone, Copy)]
pub struct GradientProvider<'a> {
    net: &'a Network,
    relu_mode: ReluMode,
    sigma: Option<f64>,
}

impl<'a> GradientProvider<'a> {
    pub fn new(net: &'a Network) -> Self {
        GradientProvider {
            net,
            relu_mode: ReluMode::Standard,
            sigma: None,
        }
    }

    pub fn with_sigma(self, sigma: Option<f64>) -> Result<Self> {
        if let Some(s) = sigma {
            if s.is_nan() || s < 0.0 {
                return Err(Error::NegativeSigma(s));
            }
        }
        Ok(GradientProvider { sigma, ..self })
    }

    pub fn with_relu_mode(self, relu_mode: ReluMode) -> Self {
        GradientProvider { relu_mode, ..self }
    }

    pub fn network(&self) -> &'a Network {
        self.net
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    pub fn relu_mode(&self) -> ReluMode {
        self.relu_mode
    }

    pub fn gradient(&self, x: &Tensor, class: usize) -> Result<Tensor> {
        let cache = self.net.forward(x)?;
        let g = self.net.backward_input(&cache, class, self.relu_mode)?;
        match self.sigma {
            None => Ok(g),
            Some(s) => lowpass(&g, s),
        }
    }
}
