pub mod linalg;
pub mod discretize;
pub mod steppers;
pub mod newton;
pub mod analysis;
