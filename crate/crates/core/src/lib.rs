pub mod agfd;
pub mod assignment;
pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod lapd;
pub mod matrix;
pub mod nn;
pub mod selection;
pub mod toydetr;

pub use error::{Error, Result};
