pub mod central;
pub mod conic;
pub mod linalg;
pub mod metrics;
pub mod scenario;
pub mod sensing;
pub mod uncertainty;
