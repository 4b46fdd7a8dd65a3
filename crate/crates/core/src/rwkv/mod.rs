//! Time Mix / Channel Mix blocks with carried recurrent state.
//!
//! Every block function processes a chunk of rows strictly in order and
//! leaves the state as it would be after feeding the rows one at a time, so
//! a sequence split into chunks with the state carried between them gives the
//! same outputs as one pass over the whole sequence.

mod block;
mod state;

pub use block::{
    block_forward, channel_mix, ddlerp, init_block, time_mix, BlockConfig, BlockVars,
};
pub use state::{BlockState, RwkvState};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor};

#[derive(Clone, Copy)]
enum Part {
    TimeMix,
    ChannelMix,
    Block,
}

fn run_chunk<T: Scalar>(
    part: Part,
    x: &Tensor<T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::contract(format!(
            "chunk must be a non-empty [N, D] matrix, got {:?}",
            x.shape()
        )));
    }
    let mut g = Graph::inference();
    let p = BlockVars::load(&mut g, store, prefix)?;
    let xv = g.constant(x.clone());
    let out = match part {
        Part::TimeMix => time_mix(&mut g, xv, state, &p, cfg)?,
        Part::ChannelMix => channel_mix(&mut g, xv, state, &p, cfg)?,
        Part::Block => block_forward(&mut g, xv, state, &p, cfg)?,
    };
    Ok(g.value(out).clone())
}

/// Time Mix over a chunk of already-normalised rows.
pub fn time_mix_chunk<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    run_chunk(Part::TimeMix, x, state, store, prefix, cfg)
}

/// Time Mix for a single token.
pub fn time_mix_step<T: Scalar>(
    x_t: &[T],
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Vec<T>> {
    let x = Tensor::new(&[1, x_t.len()], x_t.to_vec())?;
    Ok(time_mix_chunk(&x, state, store, prefix, cfg)?.into_data())
}

pub fn channel_mix_chunk<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    run_chunk(Part::ChannelMix, x, state, store, prefix, cfg)
}

pub fn channel_mix_step<T: Scalar>(
    x_t: &[T],
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Vec<T>> {
    let x = Tensor::new(&[1, x_t.len()], x_t.to_vec())?;
    Ok(channel_mix_chunk(&x, state, store, prefix, cfg)?.into_data())
}

/// One full block over a chunk of rows.
pub fn block_chunk<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BlockState<T>,
    store: &ParamStore<T>,
    prefix: &str,
    cfg: &BlockConfig,
) -> Result<Tensor<T>> {
    run_chunk(Part::Block, x, state, store, prefix, cfg)
}
