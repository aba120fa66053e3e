pub mod data;
pub mod features;
pub mod linalg;
pub mod metrics;
pub mod paris;
pub mod pipeline;
pub mod representer;
pub mod seed;
