//! Differentiable primitives, recorded as methods on [`Tape`](crate::tape::Tape).

mod conv;
mod elementwise;
mod norm;
mod pool;

pub(crate) use elementwise::compensated_sum;
pub(crate) use pool::bilinear_taps;

pub use conv::ConvParams;
pub use elementwise::Activation;
pub use norm::{BatchNormMode, BatchStats};

use crate::tape::{Backward, BackwardCtx};

/// Backward rule backed by a closure over the forward pass's saved context.
pub(crate) struct FnBackward<F> {
    name: &'static str,
    f: F,
}

impl<F> Backward for FnBackward<F>
where
    F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>>,
{
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, ctx: &BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> {
        (self.f)(ctx)
    }
}

pub(crate) fn rule<F>(name: &'static str, f: F) -> Box<dyn Backward>
where
    F: Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<f64>>> + 'static,
{
    Box::new(FnBackward { name, f })
}
