pub(crate) mod broadcast;
mod elementwise;
pub(crate) mod image;
mod linalg;
mod nn;
mod reduce;
pub(crate) mod shape;
