//! Empirical operation counting: runs a forward pass on a throwaway tape and
//! reads back the work reported by each kernel (two per multiply-accumulate).

use crate::blocks::{Dda, Ddtb};
use crate::error::Result;
use crate::network::Model;
use crate::params::{Ctx, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Operations recorded while `f` runs on a fresh tape.
pub fn count_flops<T, F>(f: F) -> Result<u64>
where
    T: Scalar,
    F: for<'t> FnOnce(&'t Tape<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::with_finite_check(false);
    f(&tape)?;
    Ok(tape.flops())
}

/// Forward work of the whole network for an input of `input_shape`.
pub fn empirical_op_counter<T: Scalar>(model: &Model<T>, input_shape: &[usize]) -> Result<u64> {
    count_flops(|tape| {
        let x = tape.constant(Tensor::zeros(input_shape));
        model.forward(tape, x)
    })
}

/// Forward work of a single transformer block.
pub fn count_block<T: Scalar>(
    block: &Ddtb,
    params: &ParamStore<T>,
    input_shape: &[usize],
) -> Result<u64> {
    count_flops(|tape| {
        let ctx = Ctx::new(tape, params);
        block.forward(&ctx, tape.constant(Tensor::zeros(input_shape)))
    })
}

/// Forward work of a single dual-branch attention module.
pub fn count_dda<T: Scalar>(
    dda: &Dda,
    params: &ParamStore<T>,
    input_shape: &[usize],
) -> Result<u64> {
    count_flops(|tape| {
        let ctx = Ctx::new(tape, params);
        dda.forward(&ctx, tape.constant(Tensor::zeros(input_shape)))
    })
}
