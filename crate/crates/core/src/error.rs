use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unknown token symbol {0:?}")]
    UnknownSymbol(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token sequence is not a complete preorder expression")]
    IncompleteExpression,
    #[error("expression has {expected} constant tokens but {got} values")]
    ConstantCount { expected: usize, got: usize },
    #[error("no token is allowed after a prefix of length {prefix_len}")]
    EmptyMask { prefix_len: usize },
    #[error("expression evaluated to a non-finite value")]
    Evaluation,
    #[error("expression is unreachable under the constraints (token {step} is masked)")]
    Unreachable { step: usize },
    #[error("tree has {got} constants, at most {max} can be marginalised")]
    TooManyConstants { got: usize, max: usize },
    #[error("empty tree set")]
    EmptyTreeSet,
    #[error("quadrature did not converge for tree {display}")]
    Quadrature { display: String },
    #[error("non-finite parameters after epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
