pub mod autodiff;
pub mod spatial;
pub mod operators;
pub mod assignment;
pub mod losses;
pub mod data;
pub mod metrics;
pub mod model;
pub mod gradcheck;
