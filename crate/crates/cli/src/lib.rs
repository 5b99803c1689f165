//! Entry points behind the `revealtoy` binary: dataset generation, training,
//! decomposition, evaluation, the gradient check and the HTTP service.

pub mod api;
pub mod commands;
pub mod server;
