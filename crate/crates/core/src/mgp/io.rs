use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlockStructure, FitDiagnostics, MgpHyperparams, PosteriorSeries};
use crate::error::{Error, Result};
use crate::hormone::HormoneId;

/// On-disk record of one individual's fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModelFile {
    pub individual_id: String,
    pub blocks: BlockStructure,
    pub hyper: MgpHyperparams,
    pub diagnostics: FitDiagnostics,
    /// Days the model was conditioned on.
    pub observed_days: Vec<usize>,
}

pub fn write_fitted_model(path: &Path, model: &FittedModelFile) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, model)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fitted_model(path: &Path) -> Result<FittedModelFile> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let model: FittedModelFile = serde_json::from_reader(BufReader::new(f))?;
    model.hyper.validate(&model.blocks)?;
    Ok(model)
}

#[derive(Serialize)]
struct PosteriorRow<'a> {
    individual_id: &'a str,
    day: usize,
    hormone: HormoneId,
    mean: f64,
    variance: f64,
}

/// Long-format export: `individual_id,day,hormone,mean,variance`.
pub fn write_posterior_csv<'a>(
    path: &Path,
    posteriors: impl IntoIterator<Item = &'a PosteriorSeries>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for post in posteriors {
        for (i, &day) in post.days.iter().enumerate() {
            for h in HormoneId::ALL {
                w.serialize(PosteriorRow {
                    individual_id: &post.individual_id,
                    day,
                    hormone: h,
                    mean: post.mean[(h.index(), i)],
                    variance: post.variance(h, i),
                })?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
