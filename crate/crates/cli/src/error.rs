use armpc::dataset::DatasetError;
use armpc::features::FeatureError;
use armpc::mpc::MpcError;
use armpc::plant::PlantError;
use armpc::qp::QpError;
use armpc::runtime::RuntimeError;
use armpc::svr::SvrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Data(_) => 2,
            AppError::Numerical(_) => 3,
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Data(format!("I/O: {e}"))
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Data(format!("JSON: {e}"))
    }
}

impl From<PlantError> for AppError {
    fn from(e: PlantError) -> Self {
        match e {
            PlantError::SingularInnovation => AppError::Numerical(e.to_string()),
            _ => AppError::Data(format!("config: {e}")),
        }
    }
}

impl From<FeatureError> for AppError {
    fn from(e: FeatureError) -> Self {
        AppError::Data(e.to_string())
    }
}

impl From<QpError> for AppError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Factorization => AppError::Numerical(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<MpcError> for AppError {
    fn from(e: MpcError) -> Self {
        match e {
            MpcError::Qp(q) => q.into(),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<SvrError> for AppError {
    fn from(e: SvrError) -> Self {
        AppError::Data(format!("model: {e}"))
    }
}

impl From<RuntimeError> for AppError {
    fn from(e: RuntimeError) -> Self {
        match e {
            RuntimeError::Mpc(m) => m.into(),
            RuntimeError::Plant(p) => p.into(),
            RuntimeError::Feature(f) => f.into(),
            RuntimeError::Svr(s) => s.into(),
            RuntimeError::Io(io) => io.into(),
            RuntimeError::Invalid(s) => AppError::Data(s),
        }
    }
}

impl From<DatasetError> for AppError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::BaselineInfeasible(_) => AppError::Numerical(e.to_string()),
            DatasetError::Mpc(m) => m.into(),
            DatasetError::Runtime(r) => r.into(),
            _ => AppError::Data(format!("dataset: {e}")),
        }
    }
}
