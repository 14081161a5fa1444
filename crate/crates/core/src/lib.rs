pub mod linalg;
pub mod mesh;
pub mod geometry;
pub mod assembly;
pub mod solver;
pub mod postprocess;
pub mod app;
