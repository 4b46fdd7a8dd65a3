use crate::error::{Error, Result};
use crate::numerics::Scalar;

/// Recurrent state carried by one block between chunks.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockState<T> {
    /// Last token seen by Time Mix (after the first layer norm).
    pub ts_time: Vec<T>,
    /// Last token seen by Channel Mix (after the second layer norm).
    pub ts_chan: Vec<T>,
    /// Per-head `d_head x d_head` key/value accumulators, head-major.
    pub wkv: Vec<T>,
}

impl<T: Scalar> BlockState<T> {
    pub fn zeros(dim: usize, heads: usize) -> Self {
        let dh = dim / heads.max(1);
        Self {
            ts_time: vec![T::zero(); dim],
            ts_chan: vec![T::zero(); dim],
            wkv: vec![T::zero(); dim * dh],
        }
    }

    pub fn dim(&self) -> usize {
        self.ts_time.len()
    }

    pub(crate) fn check(&self, dim: usize, heads: usize) -> Result<()> {
        let dh = dim / heads.max(1);
        if self.ts_time.len() != dim || self.ts_chan.len() != dim || self.wkv.len() != dim * dh {
            return Err(Error::contract(format!(
                "state slot sized for D={} does not fit block with D={dim}, H={heads}",
                self.ts_time.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ts_time.len() + self.ts_chan.len() + self.wkv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Carried state for a stack of blocks. A fresh state is all zero.
#[derive(Clone, Debug, PartialEq)]
pub struct RwkvState<T> {
    pub blocks: Vec<BlockState<T>>,
}

impl<T: Scalar> RwkvState<T> {
    pub fn new(depth: usize, dim: usize, heads: usize) -> Self {
        Self {
            blocks: (0..depth).map(|_| BlockState::zeros(dim, heads)).collect(),
        }
    }

    pub fn slot(&mut self, block: usize) -> Result<&mut BlockState<T>> {
        let depth = self.blocks.len();
        self.blocks.get_mut(block).ok_or_else(|| {
            Error::contract(format!(
                "state slot for block {block} not initialised (state holds {depth})"
            ))
        })
    }

    pub fn is_fresh(&self) -> bool {
        self.blocks.iter().all(|b| {
            b.ts_time
                .iter()
                .chain(&b.ts_chan)
                .chain(&b.wkv)
                .all(|x| *x == T::zero())
        })
    }

    /// Number of scalars held.
    pub fn footprint(&self) -> usize {
        self.blocks.iter().map(BlockState::len).sum()
    }
}
