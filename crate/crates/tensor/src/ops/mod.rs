pub mod activation;
pub mod conv;
pub mod custom;
pub mod elementwise;
pub mod loss;
pub mod matmul;
pub mod norm;
pub mod pool;
pub mod shape;
pub mod softmax;

use crate::{Result, TensorError};

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(TensorError::shape(op, shape, format!("expected rank {rank}")));
    }
    Ok(())
}
