use pmad::Error;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidConfig(_)
            | Error::InvalidGamma(_)
            | Error::InvalidKernel(_)
            | Error::InvalidRate(_)
            | Error::InvalidFractions(..)
            | Error::UnknownLayer(_) => CliError::Usage(msg),
            Error::NonFiniteValue(_) | Error::NotScalarLoss(_) | Error::DetachedTensor | Error::MissingGradient(_) => {
                CliError::Numeric(msg)
            }
            _ => CliError::Data(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_category() {
        assert_eq!(CliError::from(Error::InvalidConfig("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(Error::CorruptCheckpoint("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(Error::NonFiniteValue("loss".into())).exit_code(), 3);
    }
}
