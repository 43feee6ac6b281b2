pub mod conv;
pub(crate) mod gemm;
pub mod layout;
pub mod loss;
pub mod norm;
