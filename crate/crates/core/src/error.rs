//! Coarse error classification shared by every service, used by the gateway
//! to pick a response status and audit decision.

use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    BadRequest,
    Unauthenticated,
    Forbidden,
    /// A policy rule (membership, ACL, allocation) denied the action.
    PolicyDenied,
    NotFound,
    Conflict,
    Unavailable,
    Internal,
}

impl ErrorKind {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::BadRequest => 400,
            ErrorKind::Unauthenticated => 401,
            ErrorKind::Forbidden | ErrorKind::PolicyDenied => 403,
            ErrorKind::NotFound => 404,
            ErrorKind::Conflict => 409,
            ErrorKind::Unavailable => 503,
            ErrorKind::Internal => 500,
        }
    }
}

/// Implemented by every service error so the gateway can classify it.
pub trait Classify {
    fn kind(&self) -> ErrorKind;

    /// Stable machine-readable code, e.g. `"exceeds_cluster_size"`.
    fn code(&self) -> &'static str;
}
