//! Batch front-end for preparing data, training, evaluating, analyzing and
//! reporting one-class domain-adaptation experiments.

pub mod checkpoint;
pub mod commands;
pub mod config;

use ocda_core::Error;

/// Process exit status for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match classify(err) {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl ErrorClass {
    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::Config => "config",
            ErrorClass::Data => "data",
            ErrorClass::Numeric => "numeric",
        }
    }
}

pub fn classify(err: &anyhow::Error) -> ErrorClass {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    match core {
        Some(Error::Numeric(_)) => ErrorClass::Numeric,
        Some(Error::Config(_) | Error::Spec(_) | Error::Layout(_)) => ErrorClass::Config,
        Some(_) => ErrorClass::Data,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => ErrorClass::Data,
        None => ErrorClass::Config,
    }
}

/// One-line JSON error record for stderr.
pub fn error_record(err: &anyhow::Error) -> String {
    let class = classify(err);
    let message = err
        .chain()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join(": ");
    serde_json::json!({
        "error": class.name(),
        "code": exit_code(err),
        "message": message,
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_error_kind() {
        let cfg: anyhow::Error = Error::Config("x".into()).into();
        assert_eq!(exit_code(&cfg), 2);
        let data: anyhow::Error = Error::InsufficientData("x".into()).into();
        assert_eq!(exit_code(&data), 3);
        let nan = anyhow::Error::from(Error::Numeric("nan".into())).context("training seed 1");
        assert_eq!(exit_code(&nan), 4);
        let rec = error_record(&nan);
        assert!(!rec.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&rec).unwrap();
        assert_eq!(v["code"], 4);
        assert_eq!(v["error"], "numeric");
    }
}
