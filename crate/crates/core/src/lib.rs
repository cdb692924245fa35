pub mod compute;
pub mod error;
pub mod facility;
pub mod gateway;
pub mod mesh;
pub mod policy;
pub mod scope;
pub mod streaming;
pub mod time;
pub mod tokens;
pub mod workflows;
