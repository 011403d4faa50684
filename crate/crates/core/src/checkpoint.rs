//! Checkpoint directories: `manifest.json` plus one ".ten" file per named
//! parameter.
//!
//! The manifest pins the model configuration, the training phase, and the
//! exact name -> shape map of every tensor. Loading validates all three
//! directions: every expected parameter must be present with the declared
//! shape, and no extra tensors may be listed. Reloading reproduces forward
//! outputs bit-exactly (".ten" payloads are raw little-endian bits).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::captioner::CaptionerConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, LanguageEncoderConfig};
use crate::tensor::{read_ten, write_ten, Element, Tensor};

/// Training phase a checkpoint was produced by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "captioner")]
    Captioner,
    #[serde(rename = "classifier")]
    Classifier,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub phase: Phase,
    pub captioner: CaptionerConfig,
    /// Present only for classifier-phase checkpoints.
    pub encoder: Option<LanguageEncoderConfig>,
    pub fusion_mode: Option<FusionMode>,
    pub classes: Option<Vec<String>>,
    /// Name -> shape of every stored tensor.
    pub tensors: BTreeMap<String, Vec<usize>>,
}

fn manifest_path(dir: &Path) -> std::path::PathBuf {
    dir.join("manifest.json")
}

fn tensor_path(dir: &Path, name: &str) -> std::path::PathBuf {
    dir.join(format!("{name}.ten"))
}

/// Write a checkpoint: `collect` must call its visitor once per parameter.
pub fn save_checkpoint<E: Element>(
    dir: &Path,
    mut manifest: Manifest,
    collect: &dyn Fn(&mut dyn FnMut(&str, &Tensor<E>)),
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut fail: Option<Error> = None;
    collect(&mut |name, t| {
        if fail.is_some() {
            return;
        }
        if tensors.insert(name.to_string(), t.shape().to_vec()).is_some() {
            fail = Some(Error::Integrity(format!("duplicate parameter name {name}")));
            return;
        }
        if let Err(e) = write_ten(&tensor_path(dir, name), t) {
            fail = Some(e);
        }
    });
    if let Some(e) = fail {
        return Err(e);
    }
    manifest.tensors = tensors;
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(manifest_path(dir), body + "\n")?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let body = fs::read_to_string(&path)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&body).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Fill a freshly built model from a checkpoint: `apply` must visit every
/// parameter slot the model expects. Each slot must appear in the manifest
/// with a matching shape, and every manifest entry must be consumed.
pub fn load_into<E: Element>(
    dir: &Path,
    manifest: &Manifest,
    apply: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Tensor<E>)),
) -> Result<()> {
    let mut remaining = manifest.tensors.clone();
    let mut fail: Option<Error> = None;
    apply(&mut |name, slot| {
        if fail.is_some() {
            return;
        }
        let Some(declared_shape) = remaining.remove(name) else {
            fail = Some(Error::Integrity(format!("parameter {name} missing from manifest")));
            return;
        };
        if declared_shape != slot.shape() {
            fail = Some(Error::Integrity(format!(
                "parameter {name}: manifest shape {declared_shape:?} does not match model shape {:?}",
                slot.shape()
            )));
            return;
        }
        let loaded = match read_ten::<E>(&tensor_path(dir, name)) {
            Ok(t) => t,
            Err(e) => {
                fail = Some(Error::Integrity(format!("parameter {name}: {e}")));
                return;
            }
        };
        if loaded.shape() != slot.shape() {
            fail = Some(Error::Integrity(format!(
                "parameter {name}: file shape {:?} does not match model shape {:?}",
                loaded.shape(),
                slot.shape()
            )));
            return;
        }
        match slot.param_like(loaded.data().to_vec()) {
            Ok(t) => *slot = t,
            Err(e) => fail = Some(e),
        }
    });
    if let Some(e) = fail {
        return Err(e);
    }
    if let Some(extra) = remaining.keys().next() {
        return Err(Error::Integrity(format!(
            "manifest lists tensor {extra} the model does not expect"
        )));
    }
    Ok(())
}
