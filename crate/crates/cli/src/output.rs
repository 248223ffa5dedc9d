use std::fs::File;
use std::io::BufWriter;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Envelope written around every result document.
#[derive(Debug, Serialize)]
pub struct Document<'a, T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: u64,
    /// s
    pub wall_time: f64,
    pub config: &'a RunConfig,
    pub result: T,
}

pub fn write_document<T: Serialize>(
    out: &Path,
    command: &'static str,
    cfg: &RunConfig,
    started: Instant,
    result: T,
) -> Result<(), CliError> {
    let doc = Document {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        wall_time: started.elapsed().as_secs_f64(),
        config: cfg,
        result,
    };
    let path = out.join(format!("{command}.json"));
    let file = File::create(&path).map_err(|e| io_err(&path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &doc).map_err(|e| CliError::Internal(e.to_string()))
}

pub fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = out.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| io_err(&path, e))
}

pub fn csv_err(e: csv::Error) -> CliError {
    CliError::Internal(format!("writing CSV: {e}"))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Internal(format!("{}: {e}", path.display()))
}
