pub mod data;
pub mod eval;
pub mod infer;
pub mod model;
pub mod tensor;
pub mod train;
