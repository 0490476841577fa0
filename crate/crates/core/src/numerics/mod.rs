//! Dense row-major tensors, deterministic kernels, and the reverse-mode tape.

pub mod alloc;
pub mod counter;
pub mod kernels;
pub mod tape;
mod tensor;

pub use kernels::{gelu, layer_norm, matmul, softmax_rows, LN_EPS};
pub use tape::{Backward, BackwardCtx, Gradients, ParamId, Tape, Var};
pub use tensor::{Real, Tensor};

/// Floating-point precision selectable at run time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            _ => Err(crate::Error::config(format!("unknown precision {s:?} (expected f32 or f64)"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}
