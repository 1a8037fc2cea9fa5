//! Black-box serving surfaces.
//!
//! Attack code in this crate is only allowed to talk to a deployed model
//! through [`ServingSurface`]: probability vectors in, nothing else out. The
//! surface also counts queries so tests can audit attacker budgets, and the
//! owner-side temperature applied at serving time is invisible to callers.

use ndarray::{Array2, Array4};

use crate::error::{Error, Result};
use crate::model::ClassifierModel;
use crate::nn::softmax;

/// Probability-only access to a deployed classifier.
pub trait ServingSurface {
    fn num_classes(&self) -> usize;
    /// Class probabilities for a batch of `[0,1]` NCHW images. Rows sum to 1.
    fn predict_proba(&mut self, x: &Array4<f32>) -> Result<Array2<f32>>;
    /// Total images answered so far.
    fn queries(&self) -> usize;
}

fn check_batch(x: &Array4<f32>) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite query batch".into()));
    }
    Ok(())
}

/// Serves plain softmax probabilities.
pub struct PlainServing<'a> {
    model: &'a mut ClassifierModel,
    queries: usize,
}

impl<'a> PlainServing<'a> {
    pub fn new(model: &'a mut ClassifierModel) -> Self {
        Self { model, queries: 0 }
    }
}

impl ServingSurface for PlainServing<'_> {
    fn num_classes(&self) -> usize {
        self.model.net.num_classes()
    }

    fn predict_proba(&mut self, x: &Array4<f32>) -> Result<Array2<f32>> {
        check_batch(x)?;
        self.queries += x.dim().0;
        Ok(softmax(&self.model.logits(x)))
    }

    fn queries(&self) -> usize {
        self.queries
    }
}

/// Serves temperature-softened probabilities `softmax(z / gamma)`.
///
/// The temperature is an owner-side deployment choice; nothing in the
/// returned probabilities names it, and `gamma = 1` reduces to plain serving.
pub struct TemperedServing<'a> {
    model: &'a mut ClassifierModel,
    gamma: f32,
    queries: usize,
}

impl<'a> TemperedServing<'a> {
    pub fn new(model: &'a mut ClassifierModel, gamma: f32) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(Error::Domain(format!(
                "serving temperature must be positive and finite, got {gamma}"
            )));
        }
        Ok(Self {
            model,
            gamma,
            queries: 0,
        })
    }
}

impl ServingSurface for TemperedServing<'_> {
    fn num_classes(&self) -> usize {
        self.model.net.num_classes()
    }

    fn predict_proba(&mut self, x: &Array4<f32>) -> Result<Array2<f32>> {
        check_batch(x)?;
        self.queries += x.dim().0;
        let z = self.model.logits(x) / self.gamma;
        Ok(softmax(&z))
    }

    fn queries(&self) -> usize {
        self.queries
    }
}
