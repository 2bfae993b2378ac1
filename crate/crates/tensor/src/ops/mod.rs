mod conv;
mod elementwise;
pub(crate) mod linalg;
mod norm;
mod shape;

pub use shape::{AxisPad, PadMode};
