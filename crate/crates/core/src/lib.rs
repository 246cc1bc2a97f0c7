//! Principal spectrum points of time-periodic cooperative nonlocal dispersal
//! operators
//!
//! ```text
//! L[u] = -tau u_t + D(x,t) P[u] + A(x,t) u,   P_i[u](x) = int_Omega k_i(x,y,t) u_i(y) dy
//! ```
//!
//! on 1D and 2D boxes, with the principal spectrum point computed as
//! `s(L) = tau ln r(V(1,0))` from the period map of the linear evolution.

pub mod approximation;
pub mod asymptotics;
pub mod cli_io;
pub mod error;
pub mod expr;
pub mod fields;
pub mod floquet;
pub mod grid;
pub mod linalg;
pub mod local_limit;
pub mod models;
pub mod operator;
pub mod presets;
pub mod propagate;
pub mod variational;

pub use error::{NlsError, Result};
