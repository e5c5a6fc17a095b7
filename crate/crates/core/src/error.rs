use thiserror::Error;

/// A caller broke an operation's precondition.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("contract violation: {0}")]
pub struct ContractViolation(pub String);

impl ContractViolation {
    pub fn new(msg: impl Into<String>) -> Self {
        ContractViolation(msg.into())
    }
}
