pub mod image_io;
pub mod pfm;
pub mod ply;
pub mod sidecar;
