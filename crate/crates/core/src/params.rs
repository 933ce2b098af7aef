//! Named parameter blocks shared by the optimizer and the checkpoint format.

use ndarray::{ArrayViewD, ArrayViewMutD};

use crate::error::{Error, Result};

/// A model whose learnable state is a fixed, ordered list of named arrays.
///
/// `blocks` and `blocks_mut` must list the same names in the same order.
/// Gradients are represented by a value of the same type, so an optimizer
/// can zip a model's blocks with its gradient's blocks.
pub trait ParamBlocks {
    fn blocks(&self) -> Vec<(String, ArrayViewD<'_, f64>)>;
    fn blocks_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)>;

    /// Frozen blocks are saved and loaded but never updated by an optimizer.
    fn is_frozen(&self, _name: &str) -> bool {
        false
    }

    fn num_params(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }
}

pub fn zeros_like<T: ParamBlocks + Clone>(model: &T) -> T {
    let mut out = model.clone();
    for (_, mut b) in out.blocks_mut() {
        b.fill(0.0);
    }
    out
}

/// Copies every block of `src` into `dst`; names and shapes must agree.
pub fn copy_blocks<A: ParamBlocks, B: ParamBlocks>(src: &A, dst: &mut B) -> Result<()> {
    let src_blocks = src.blocks();
    let mut dst_blocks = dst.blocks_mut();
    if src_blocks.len() != dst_blocks.len() {
        return Err(Error::Dimension(format!(
            "parameter block count {} does not match {}",
            src_blocks.len(),
            dst_blocks.len()
        )));
    }
    for ((sn, s), (dn, d)) in src_blocks.iter().zip(dst_blocks.iter_mut()) {
        if sn != dn || s.shape() != d.shape() {
            return Err(Error::Dimension(format!(
                "parameter block {sn} {:?} does not match {dn} {:?}",
                s.shape(),
                d.shape()
            )));
        }
        d.assign(s);
    }
    Ok(())
}

pub(crate) fn scalar_view(v: &f64) -> ArrayViewD<'_, f64> {
    ArrayViewD::from_shape(ndarray::IxDyn(&[]), std::slice::from_ref(v)).expect("0-d view")
}

pub(crate) fn scalar_view_mut(v: &mut f64) -> ArrayViewMutD<'_, f64> {
    ArrayViewMutD::from_shape(ndarray::IxDyn(&[]), std::slice::from_mut(v)).expect("0-d view")
}
