use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("energy {energy} is at band edge of level {level}")]
    BandEdge { energy: f64, level: usize },

    #[error("ill-conditioned dual basis at level {level}: |P| = {overlap}")]
    DualBasis { level: usize, overlap: f64 },

    #[error("trapped-mode or resolution failure: condition estimate {cond:.3e}")]
    IllConditioned { cond: f64 },

    #[error("resonant merge: condition estimate {cond:.3e}")]
    ResonantMerge { cond: f64 },

    #[error("intervals [{a0}, {a1}] and [{b0}, {b1}] are not adjacent")]
    NotAdjacent { a0: f64, a1: f64, b0: f64, b1: f64 },

    #[error("excluded frequency {xi}: must avoid {excluded}")]
    ExcludedFrequency { xi: f64, excluded: String },

    #[error("missing samples: {0}")]
    MissingSamples(String),

    #[error("mismatch: {0}")]
    Mismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("iterate {iter}: {source}")]
    Iterate {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("experiment {hash:016x}: {source}")]
    Experiment {
        hash: u64,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
