//! Checkpoint directories: `manifest.txt` plus one tensor file per parameter.
//!
//! The manifest holds the encoder configuration keys, `format`, `dtype`,
//! `param_count`, and any caller-supplied extra entries. Tensor files are named
//! `<param name>.mael`.

use std::fs;
use std::path::Path;

use super::config::{EncoderConfig, MANIFEST_KEYS};
use super::model::Model;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::tensor::{io, Scalar, DType};

pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT: &str = "maelre-checkpoint-1";

pub fn save<T: Scalar>(model: &Model<T>, dir: &Path, extra: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = model.config().to_manifest();
    m.set("format", FORMAT);
    m.set("dtype", if T::DTYPE == DType::F32 { "f32" } else { "f64" });
    m.set("param_count", model.param_count());
    for key in extra.keys() {
        m.set(key, extra.get(key).unwrap_or_default());
    }
    for p in model.params() {
        io::write(&dir.join(format!("{}.mael", p.name)), &p.value)?;
    }
    let text = format!("# model checkpoint\n{m}");
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a checkpoint, converting stored tensors to `T`. Returns the model
/// and the full manifest.
pub fn load<T: Scalar>(dir: &Path) -> Result<(Model<T>, Manifest)> {
    let m = Manifest::load(&dir.join(MANIFEST_FILE))?;
    match m.get("format") {
        Some(FORMAT) => {}
        other => {
            return Err(Error::Format(format!(
                "unsupported checkpoint format {other:?} in {}",
                dir.display()
            )))
        }
    }
    let config = EncoderConfig::from_manifest(&m)?;
    let mut model = Model::<T>::build(&config, 0)?;
    for i in 0..model.params().len() {
        let name = model.params()[i].name.clone();
        let t = io::read::<T>(&dir.join(format!("{name}.mael")))?;
        model.set_param(i, t)?;
    }
    let count: usize = m.require("param_count")?;
    if count != model.param_count() {
        return Err(Error::Format(format!(
            "manifest records {count} parameters, files hold {}",
            model.param_count()
        )));
    }
    Ok((model, m))
}

/// Keys a checkpoint manifest may contain beyond caller extras.
pub fn known_keys() -> Vec<&'static str> {
    let mut k = MANIFEST_KEYS.to_vec();
    k.extend(["format", "dtype", "param_count"]);
    k
}
