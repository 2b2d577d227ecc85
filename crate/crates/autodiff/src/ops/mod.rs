mod activation;
mod conv;
pub(crate) mod elementwise;
mod filter;
mod loss;
mod norm;
mod reduce;
mod resize;
pub(crate) mod shape;
mod softmax;
