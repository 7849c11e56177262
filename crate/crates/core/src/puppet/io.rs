//! JSON puppet and outline files.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geom::Point2;
use crate::image::Image;

use super::{Layer, PartSpec, Puppet, PuppetError};

/// On-disk puppet. The texture is a PNG path relative to the JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PuppetFile {
    pub vertices: Vec<Point2>,
    pub faces: Vec<[usize; 3]>,
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub joints: Vec<[usize; 2]>,
    pub uv: Vec<Point2>,
    pub texture: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlinePart {
    pub name: String,
    pub outline: Vec<Point2>,
    pub texture: String,
}

/// Input to the puppet builder; parts are listed back to front.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutlineFile {
    pub parts: Vec<OutlinePart>,
}

/// Parses JSON, reporting the path of the offending field on failure.
pub(crate) fn parse_json<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, PuppetError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| PuppetError::File {
        path: origin.to_string(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

fn read(path: &Path) -> Result<String, PuppetError> {
    std::fs::read_to_string(path).map_err(|e| PuppetError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn sibling(path: &Path, rel: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(rel)
}

impl PuppetFile {
    pub fn parse(text: &str) -> Result<Self, PuppetError> {
        parse_json(text, "puppet")
    }

    pub fn from_puppet(p: &Puppet, texture: &str) -> Self {
        PuppetFile {
            vertices: p.rest_vertices.clone(),
            faces: p.faces.clone(),
            layers: p.layers.clone(),
            joints: p.joints.clone(),
            uv: p.uv.clone(),
            texture: texture.to_string(),
        }
    }

    pub fn into_puppet(self, texture: Image) -> Result<Puppet, PuppetError> {
        let p = Puppet {
            rest_vertices: self.vertices,
            faces: self.faces,
            layers: self.layers,
            joints: self.joints,
            uv: self.uv,
            texture: texture.to_rgba(),
        };
        p.validate()?;
        Ok(p)
    }
}

impl Puppet {
    /// Loads and validates a puppet JSON file and its texture.
    pub fn load(path: impl AsRef<Path>) -> Result<Puppet, PuppetError> {
        let path = path.as_ref();
        let file: PuppetFile = parse_json(&read(path)?, &path.display().to_string())?;
        let texture = Image::load_png(sibling(path, &file.texture))?;
        file.into_puppet(texture)
    }

    /// Writes the puppet JSON and, next to it, the texture as
    /// `<stem>.texture.png`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PuppetError> {
        let path = path.as_ref();
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "puppet".into());
        let tex_name = format!("{stem}.texture.png");
        self.texture.save_png(sibling(path, &tex_name))?;
        let json = serde_json::to_string_pretty(&PuppetFile::from_puppet(self, &tex_name))
            .expect("puppet serializes");
        std::fs::write(path, json).map_err(|e| PuppetError::File {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self, texture: &str) -> serde_json::Value {
        serde_json::to_value(PuppetFile::from_puppet(self, texture)).expect("puppet serializes")
    }
}

/// Reads an outline file and the part textures it references.
pub fn load_outline_file(path: impl AsRef<Path>) -> Result<Vec<PartSpec>, PuppetError> {
    let path = path.as_ref();
    let file: OutlineFile = parse_json(&read(path)?, &path.display().to_string())?;
    file.parts
        .into_iter()
        .map(|part| {
            Ok(PartSpec {
                texture: Image::load_png(sibling(path, &part.texture))?,
                name: part.name,
                outline: part.outline,
            })
        })
        .collect()
}
