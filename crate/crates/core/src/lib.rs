pub mod audio_io;
pub mod error;
pub mod frontend;

pub use error::{Error, Result};
pub mod augment;
pub mod anc;
pub mod separation;
pub mod recognizer;
pub mod speaker;
pub mod corpus;
pub mod eval;
pub mod gate;
