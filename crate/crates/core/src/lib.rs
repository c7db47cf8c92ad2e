//! Structure-preserving cell-trajectory prediction: a GENERIC integrator with
//! learned gradient matrices, an environmental correction network, a learned
//! combiner, a mitosis classifier and the supporting simulator and data
//! pipeline.

pub mod autodiff;
pub mod combiner;
pub mod dataset;
pub mod error;
pub mod generic;
pub mod mitosis;
pub mod model;
pub mod rollout;
pub mod simulator;
pub mod training;

use std::path::Path;

pub use error::{Error, Result};

/// Writes through a sibling temporary file and renames, so a failed write
/// never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}


#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            pub struct $name;
        };
    }
    chapter!(Introduction, "introduction.md");
    chapter!(Autodiff, "autodiff.md");
    chapter!(Simulation, "simulation.md");
    chapter!(Data, "data.md");
    chapter!(Generic, "generic.md");
    chapter!(Combiner, "combiner.md");
    chapter!(Training, "training.md");
    chapter!(Rollout, "rollout.md");
    chapter!(Mitosis, "mitosis.md");
    chapter!(Cli, "cli.md");
}
