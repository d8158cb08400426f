//! Model files: a magic line, a one-line JSON manifest, then every parameter
//! as little-endian `f64` in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Ablations, Model, ModelConfig, ModelError};
use crate::data::FeatureSchema;
use crate::params::ParamStore;

const MAGIC: &str = "OPTMSM-MODEL 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_hash: String,
    pub schema: FeatureSchema,
    pub config: ModelConfig,
    pub ablations: Ablations,
    pub params: Vec<ParamEntry>,
}

pub fn write_model<W: Write>(mut w: W, model: &Model, store: &ParamStore) -> Result<(), ModelError> {
    let manifest = ModelManifest {
        schema_hash: model.schema().hash(),
        schema: model.schema().clone(),
        config: model.config().clone(),
        ablations: model.ablations(),
        params: store
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| ModelError::Persist(e.to_string()))?;
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{json}")?;
    for p in store.iter() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_model(path: impl AsRef<Path>, model: &Model, store: &ParamStore) -> Result<(), ModelError> {
    write_model(BufWriter::new(File::create(path)?), model, store)
}

/// Reads a model file, rebuilding the architecture from its manifest and
/// verifying every parameter name and shape against it.
pub fn read_model<R: Read>(reader: R) -> Result<(Model, ParamStore, ModelManifest), ModelError> {
    let mut r = BufReader::new(reader);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(ModelError::Persist(format!("bad magic line `{}`", line.trim_end())));
    }
    line.clear();
    r.read_line(&mut line)?;
    let manifest: ModelManifest =
        serde_json::from_str(line.trim_end()).map_err(|e| ModelError::Persist(format!("manifest: {e}")))?;
    if manifest.schema.hash() != manifest.schema_hash {
        return Err(ModelError::Persist(format!(
            "schema hash {} does not match embedded schema ({})",
            manifest.schema_hash,
            manifest.schema.hash()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (model, mut store) = Model::new(&manifest.schema, &manifest.config, manifest.ablations, &mut rng)?;
    if store.len() != manifest.params.len() {
        return Err(ModelError::Persist(format!(
            "config implies {} parameters, file lists {}",
            store.len(),
            manifest.params.len()
        )));
    }
    for (id, entry) in store.ids().collect::<Vec<_>>().into_iter().zip(&manifest.params) {
        let p = store.get(id);
        if p.name != entry.name || p.value.shape() != entry.shape.as_slice() {
            return Err(ModelError::Persist(format!(
                "parameter mismatch: config expects {} {:?}, file has {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                entry.shape
            )));
        }
        let mut buf = [0u8; 8];
        for v in store.value_mut(id).data_mut() {
            r.read_exact(&mut buf)
                .map_err(|e| ModelError::Persist(format!("truncated tensor data for {}: {e}", entry.name)))?;
            *v = f64::from_le_bytes(buf);
        }
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(ModelError::Persist(format!("{} trailing bytes", rest.len())));
    }
    Ok((model, store, manifest))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(Model, ParamStore, ModelManifest), ModelError> {
    read_model(File::open(path)?)
}
