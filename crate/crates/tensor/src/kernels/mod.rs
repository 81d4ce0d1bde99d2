pub mod conv;
pub mod elementwise;
pub mod gemm;
pub mod norm;
pub mod sample;
