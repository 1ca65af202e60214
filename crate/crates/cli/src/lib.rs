//! Command-line front end for the one-class novelty-detection pipeline.
//!
//! The binary (`unode`) exposes one subcommand per stage — augmentation
//! weighting, training, scoring, the evaluation protocols, and the Gaussian
//! error-model check — all driven by a single flat `key = value`
//! configuration file plus a few overriding flags. Exit codes are part of
//! the interface: see [`exit_code`].

pub mod commands;
pub mod config;

use unode_core::Error;

/// Process exit code for an error: 1 for configuration and usage problems,
/// 2 for unreadable or malformed data and artifacts, 3 for numeric failures
/// (diverged loss, simulation outside its confidence band).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 1,
        Error::Io(_) | Error::Parse(_) | Error::Shape(_) => 2,
        Error::Numeric(_) => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), 1);
        assert_eq!(exit_code(&Error::InvalidArgument("x".into())), 1);
        assert_eq!(exit_code(&Error::Parse("x".into())), 2);
        assert_eq!(exit_code(&Error::Shape("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, "x"))),
            2
        );
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
    }
}
