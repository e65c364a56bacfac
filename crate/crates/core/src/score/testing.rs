//! Closure-backed score models for tests.

use super::ScoreModel;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::optim::{Bound, ParamSet};

/// Score model returning `f(x)` built from tape ops, for contract checks.
pub(crate) struct FnScore<F> {
    params: ParamSet,
    shape: Vec<usize>,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Send + Sync,
{
    pub(crate) fn new(shape: &[usize], f: F) -> Self {
        Self {
            params: ParamSet::new(),
            shape: shape.to_vec(),
            f,
        }
    }
}

impl<F> ScoreModel for FnScore<F>
where
    F: Fn(&mut Tape, Var) -> Result<Var> + Send + Sync,
{
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn sample_shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn forward(&self, tape: &mut Tape, _p: &Bound, x: Var, _s: &[f64]) -> Result<Var> {
        (self.f)(tape, x)
    }
}
