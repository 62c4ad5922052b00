pub(crate) mod activation;
pub(crate) mod conv;
mod elementwise;
mod linalg;
mod loss;
pub(crate) mod norm;
pub(crate) mod pool;
pub(crate) mod reduce;
mod shape;
