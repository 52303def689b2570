pub use nalgebra;

pub mod hypmesh;
pub mod quat;
pub mod spinops;
pub mod variational;
pub mod saddle;
