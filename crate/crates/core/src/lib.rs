pub mod data;
pub mod experiment;
pub mod linalg;
pub mod mps;
pub mod oracle;
pub mod theory;
pub mod trainer;
pub mod verify;
