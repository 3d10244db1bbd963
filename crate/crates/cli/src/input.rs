//! Reading plant, graph and spectrum inputs, and mapping failures to exit codes.

use std::fmt;
use std::fs;
use std::path::Path;

use distobs::assembler::SpectrumRequest;
use distobs::graph::{GraphFile, NeighborGraph};
use distobs::linalg::{Plant, PlantFile, C64};
use distobs::spectra::{SpectrumFile, SpectrumSpec};
use distobs::Error;
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_HYPOTHESIS: u8 = 2;
pub const EXIT_SYNTHESIS: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self::new(EXIT_IO, message)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::ZeroChannel(_) | Error::HypothesesViolated(_) | Error::SourceNotObservable(_) | Error::NotControllable => {
                EXIT_HYPOTHESIS
            }
            Error::AttemptsExhausted { .. }
            | Error::CompensatorNonConvergence { .. }
            | Error::ReductionFailed(_)
            | Error::Uncertified(_)
            | Error::EigenFailure => EXIT_SYNTHESIS,
            _ => EXIT_IO,
        };
        Self::new(code, e.to_string())
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Outcome<T> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn ensure_parent(path: &Path) -> Outcome<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: &str) -> Outcome<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

pub fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifacts serialize");
    s.push('\n');
    s
}

/// Loads the plant; a zero channel is a hypothesis failure, other defects
/// are input errors.
pub fn load_plant(path: &Path) -> Outcome<Plant> {
    let file: PlantFile = read_json(path)?;
    Plant::try_from(file).map_err(|e| match e {
        Error::ZeroChannel(_) => Failure::from(e),
        other => Failure::io(format!("{}: {other}", path.display())),
    })
}

pub fn load_graph(path: &Path) -> Outcome<NeighborGraph> {
    let file: GraphFile = read_json(path)?;
    NeighborGraph::try_from(file).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SpectraFile {
    One(SpectrumFile),
    Many(Vec<SpectrumFile>),
}

fn spec_from_file(f: &SpectrumFile) -> Outcome<SpectrumSpec> {
    let lambdas = f.lambdas.iter().map(|z| C64::new(z[0], z[1])).collect();
    Ok(SpectrumSpec::new(lambdas)?)
}

/// One eigenvalue: `re` or `re:im`.
fn parse_eigenvalue(s: &str) -> Outcome<C64> {
    let bad = || Failure::io(format!("cannot parse eigenvalue '{s}'"));
    let mut parts = s.split(':');
    let re: f64 = parts.next().ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
    let im: f64 = match parts.next() {
        Some(p) => p.trim().parse().map_err(|_| bad())?,
        None => 0.0,
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(C64::new(re, im))
}

/// `--spectrum` is a JSON file (one `{"lambdas": [[re, im], ...]}` object or
/// a list of them, one per component) or an inline comma list such as
/// `-1,-2,-1:1,-1:-1`. Inline lists use `;` to separate components.
pub fn spectrum_request(spectrum: Option<&str>, rate: Option<f64>) -> Outcome<SpectrumRequest> {
    match (spectrum, rate) {
        (Some(_), Some(_)) => Err(Failure::io("give either --spectrum or --rate, not both")),
        (None, None) => Err(Failure::io("one of --spectrum or --rate is required")),
        (None, Some(rho)) => {
            if !(rho.is_finite() && rho > 0.0) {
                return Err(Failure::io(format!("--rate must be positive, got {rho}")));
            }
            Ok(SpectrumRequest::Rate(rho))
        }
        (Some(s), None) => {
            let path = Path::new(s);
            if path.is_file() {
                let specs = match read_json::<SpectraFile>(path)? {
                    SpectraFile::One(f) => vec![spec_from_file(&f)?],
                    SpectraFile::Many(list) => list.iter().map(spec_from_file).collect::<Outcome<_>>()?,
                };
                return Ok(SpectrumRequest::Explicit(specs));
            }
            let specs = s
                .split(';')
                .map(|part| {
                    let lambdas = part.split(',').map(parse_eigenvalue).collect::<Outcome<Vec<_>>>()?;
                    Ok(SpectrumSpec::new(lambdas)?)
                })
                .collect::<Outcome<Vec<_>>>()?;
            Ok(SpectrumRequest::Explicit(specs))
        }
    }
}
