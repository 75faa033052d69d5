pub use crate::verify::{finite_difference, random_tensor};
