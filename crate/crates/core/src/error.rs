use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible for `op`.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A call violated an operation's precondition.
    Contract(String),
    /// Invalid configuration value.
    Config(String),
    /// An attention query row has every key masked out.
    FullyMasked { row: usize },
    /// Training produced a non-finite value.
    Diverged { epoch: usize, step: usize, tensor: String },
    /// Synthetic data could not be generated as requested.
    Generation(String),
    /// Error raised by a caller-supplied hook (checkpoint writer etc).
    Hook(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::FullyMasked { row } => {
                write!(f, "attention query row {row} has every key masked")
            }
            Error::Diverged {
                epoch,
                step,
                tensor,
            } => write!(
                f,
                "training diverged at epoch {epoch}, step {step}: first non-finite tensor is {tensor}"
            ),
            Error::Generation(msg) => write!(f, "synthetic generation failed: {msg}"),
            Error::Hook(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}
