//! Checkpoints: one `MPF1` tensor per parameter group plus a JSON manifest
//! holding shapes, the step counter and optimizer settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::fusion::FusionParams;
use crate::io::tensor::{read_tensor, write_tensor, Tensor};
use crate::numerics::Matrix;
use crate::prediction::{LevelFusionParams, LevelWeights, PredictionParams};
use crate::training::{ModelParams, TrainState};
use crate::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    step: u64,
    lr: f64,
    seed: u64,
    levels: usize,
    width: usize,
    dim: usize,
    n: usize,
    tensors: Vec<TensorRef>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRef {
    name: String,
    file: String,
    dims: Vec<usize>,
}

fn param_tensors(params: &ModelParams) -> Vec<(String, Tensor)> {
    let mut out = vec![
        ("rho".to_string(), Tensor::vector(vec![params.fusion.rho()])),
        (
            "w_p".to_string(),
            Tensor::vector(params.prediction.w_p.clone()),
        ),
        (
            "w_in".to_string(),
            Tensor::vector(params.prediction.fusion.w_in.clone()),
        ),
        (
            "w_out".to_string(),
            Tensor::vector(params.prediction.fusion.w_out.clone()),
        ),
    ];
    for (l, lw) in params.prediction.fusion.levels.iter().enumerate() {
        out.push((format!("w_{}", l + 1), Tensor::from_matrix(&lw.w)));
        out.push((format!("b_{}", l + 1), Tensor::vector(lw.b.clone())));
    }
    let n = params.background_text.len();
    let dim = params.background_text.first().map_or(0, Vec::len);
    let flat: Vec<f64> = params.background_text.iter().flatten().copied().collect();
    out.push((
        "bg_text".to_string(),
        Tensor::new(
            vec![n.max(1), dim.max(1)],
            if flat.is_empty() { vec![0.0] } else { flat },
        )
        .expect("consistent by construction"),
    ));
    out
}

pub fn save_checkpoint(dir: impl AsRef<Path>, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let tensors = param_tensors(&state.params);
    let mut refs = Vec::new();
    for (name, tensor) in &tensors {
        let file = format!("{name}.mpf");
        write_tensor(dir.join(&file), tensor)?;
        refs.push(TensorRef {
            name: name.clone(),
            file,
            dims: tensor.dims.clone(),
        });
    }
    let manifest = CheckpointManifest {
        step: state.step,
        lr: state.lr,
        seed: state.seed,
        levels: state.params.prediction.fusion.levels.len(),
        width: state.params.prediction.fusion.width(),
        dim: state.params.background_text.first().map_or(0, Vec::len),
        n: state.params.background_text.len(),
        tensors: refs,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?,
    )?;
    Ok(())
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("checkpoint: {e}")))?;

    let mut lookup = std::collections::BTreeMap::new();
    for r in &manifest.tensors {
        let tensor = read_tensor(dir.join(&r.file))?;
        if tensor.dims != r.dims {
            return Err(Error::Config(format!(
                "checkpoint tensor {} has dims {:?}, manifest says {:?}",
                r.name, tensor.dims, r.dims
            )));
        }
        lookup.insert(r.name.clone(), tensor);
    }
    let mut take = |name: &str| -> Result<Tensor> {
        lookup
            .remove(name)
            .ok_or_else(|| Error::Config(format!("checkpoint tensor {name} missing")))
    };

    let rho = take("rho")?.into_vector()?;
    let w_p = take("w_p")?.into_vector()?;
    let w_in = take("w_in")?.into_vector()?;
    let w_out = take("w_out")?.into_vector()?;
    let mut levels = Vec::with_capacity(manifest.levels);
    for l in 0..manifest.levels {
        let w: Matrix = take(&format!("w_{}", l + 1))?.into_matrix()?;
        let b = take(&format!("b_{}", l + 1))?.into_vector()?;
        levels.push(LevelWeights { w, b });
    }
    let bg = take("bg_text")?;
    let (bg_rows, bg_dim) = match bg.dims.as_slice() {
        &[r, c] => (r, c),
        other => {
            return Err(Error::Config(format!(
                "bg_text rank {:?} unexpected",
                other
            )));
        }
    };
    let background_text: Vec<Vec<f64>> = bg
        .data
        .chunks(bg_dim)
        .take(bg_rows)
        .map(<[f64]>::to_vec)
        .collect();

    let params = ModelParams {
        fusion: FusionParams::from_rho(rho[0]),
        prediction: PredictionParams {
            w_p,
            fusion: LevelFusionParams {
                w_in,
                levels,
                w_out,
            },
        },
        background_text,
    };
    Ok(TrainState {
        params,
        step: manifest.step,
        lr: manifest.lr,
        seed: manifest.seed,
    })
}
