//! Answer-localness Gaussian bias and syntactic visibility-mask attention
//! inside a small trainable encoder-decoder, with the preprocessing that
//! feeds it.

pub mod attention;
pub mod checkpoint;
pub mod conllu;
pub mod data;
pub mod error;
pub mod keysent;
pub mod localness;
pub mod model;
pub mod numkit;
pub mod pipeline;
pub mod synmask;
pub mod tape;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
pub use numkit::{Matrix, NEG_INF};
