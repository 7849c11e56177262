//! Reading and writing the files the commands exchange, and the error type
//! that carries an exit status.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use npuppet_core::image::ImageError;
use npuppet_core::model::{DeformModel, ModelManifest};
use npuppet_core::puppet::PuppetError;
use npuppet_core::train::TrainConfig;
use npuppet_core::{Error, Image, Puppet};

/// A failed command: the message for stderr and the process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    /// Bad input: flags, files or values.
    pub const VALIDATION: u8 = 2;
    /// The computation itself failed (non-finite values, divergence,
    /// a collapsed mask).
    pub const NUMERIC: u8 = 3;

    pub fn invalid(message: impl Into<String>) -> Self {
        Failure {
            code: Self::VALIDATION,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { Self::NUMERIC } else { Self::VALIDATION },
            message: e.to_string(),
        }
    }
}

impl From<PuppetError> for Failure {
    fn from(e: PuppetError) -> Self {
        Error::from(e).into()
    }
}

impl From<ImageError> for Failure {
    fn from(e: ImageError) -> Self {
        Error::from(e).into()
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Parses JSON; errors name the file and the path of the offending field.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            Failure::invalid(format!("{origin}: {}", e.inner()))
        } else {
            Failure::invalid(format!("{origin}: at `{path}`: {}", e.inner()))
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("values serialize");
    std::fs::write(path, text + "\n").map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| Failure::invalid(format!("{}: {e}", path.display())))
}

pub fn load_image(path: &Path) -> CliResult<Image> {
    Ok(Image::load_png(path)?)
}

/// PNG paths given directly, with directories expanded to the PNG files
/// they contain, in name order.
pub fn expand_frames(paths: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let entries = std::fs::read_dir(p).map_err(|e| Failure::invalid(format!("{}: {e}", p.display())))?;
            let mut pngs: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            pngs.sort();
            out.extend(pngs);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(Failure::invalid("--frames: no PNG files found"));
    }
    Ok(out)
}

pub fn load_frames(paths: &[PathBuf]) -> CliResult<Vec<Image>> {
    expand_frames(paths)?.iter().map(|p| load_image(p)).collect()
}

pub fn load_puppet(path: &Path) -> CliResult<Puppet> {
    Ok(Puppet::load(path)?)
}

pub fn load_model(path: &Path) -> CliResult<(DeformModel, ModelManifest)> {
    Ok(DeformModel::load(path)?)
}

/// Seed override from the environment, if set.
pub fn seed_override() -> CliResult<Option<u64>> {
    match std::env::var("NPUPPET_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::invalid(format!("NPUPPET_SEED: expected an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// The run configuration: the TOML file when given, else the one recorded in
/// the model manifest, else the defaults. `NPUPPET_SEED` replaces the seed.
pub fn load_config(path: Option<&Path>, manifest: Option<&ModelManifest>) -> CliResult<TrainConfig> {
    let mut cfg = match (path, manifest.and_then(|m| m.training.as_ref())) {
        (Some(p), _) => TrainConfig::load(p)?,
        (None, Some(recorded)) => {
            let cfg: TrainConfig = parse_json(&recorded.to_string(), "model manifest `training`")?;
            cfg.validate()?;
            cfg
        }
        (None, None) => TrainConfig::default(),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    Ok(cfg)
}
