//! Model checkpoints: a directory of HTF parameter tensors plus a JSON
//! manifest recording the architecture, the head layout, and the SHA-256 of
//! the hierarchy the model was trained against. Loading rebuilds the
//! network and refuses hierarchy mismatches, so a checkpoint can never be
//! silently reused under a different label system.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bhccm::{FusionMode, HeadSpec, SegNetConfig, ToySegNet};
use crate::hierarchy::Hierarchy;
use crate::htf::{self, HtfError};
use crate::rng;

const FORMAT: &str = "hieraseg-checkpoint-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Htf(#[from] HtfError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Manifest { path: String, msg: String },
    #[error("checkpoint format {got:?}, expected {FORMAT:?}")]
    Format { got: String },
    #[error("checkpoint was built for hierarchy {want}, got {got}")]
    HierarchyHash { want: String, got: String },
    #[error("parameter {name} missing from checkpoint")]
    MissingParam { name: String },
    #[error("parameter {name} has {got} values, expected {want}")]
    ParamSize { name: String, got: usize, want: usize },
    #[error("unknown fusion mode {0:?}")]
    BadFusion(String),
    #[error("unknown head kind {0:?}")]
    BadHead(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Serialize, Deserialize)]
struct ArchManifest {
    in_channels: usize,
    widths: Vec<usize>,
    c_dim: usize,
    dec_kernel: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadManifest {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    classes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    class_counts: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fusion: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mb_bias: Option<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    hierarchy_sha256: String,
    arch: ArchManifest,
    head: HeadManifest,
    /// Parameter name -> relative HTF path.
    params: BTreeMap<String, String>,
}

fn head_manifest(net: &ToySegNet) -> HeadManifest {
    match &net.head {
        crate::bhccm::Head::Flat(conv) => HeadManifest {
            kind: "flat".into(),
            classes: Some(conv.out_channels()),
            class_counts: None,
            fusion: None,
            mb_bias: None,
        },
        crate::bhccm::Head::Hiera(head) => HeadManifest {
            kind: "bhccm".into(),
            classes: None,
            class_counts: Some(head.class_counts().to_vec()),
            fusion: Some(head.fusion().as_str().into()),
            // Bias layout is recoverable from the stored parameter names.
            mb_bias: Some(true),
        },
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// Write the model and its hierarchy binding under `dir`.
pub fn save(net: &ToySegNet, hierarchy: &Hierarchy, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("params")).map_err(|e| io_err(dir, e))?;
    let mut params = BTreeMap::new();
    for (name, tensor) in net.params() {
        let rel = format!("params/{name}.htf");
        htf::write_tensor(&dir.join(&rel), &tensor)?;
        params.insert(name, rel);
    }
    let cfg = net.config();
    let manifest = CheckpointManifest {
        format: FORMAT.into(),
        hierarchy_sha256: hierarchy.canonical_hash(),
        arch: ArchManifest {
            in_channels: cfg.in_channels,
            widths: cfg.widths.clone(),
            c_dim: cfg.c_dim,
            dec_kernel: cfg.dec_kernel,
        },
        head: head_manifest(net),
        params,
    };
    let path = dir.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, body).map_err(|e| io_err(&path, e))
}

/// Read a checkpoint back; `hierarchy` must hash-match the stored binding.
pub fn load(dir: &Path, hierarchy: &Hierarchy) -> Result<ToySegNet> {
    let path = dir.join("manifest.json");
    let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&body).map_err(|e| CheckpointError::Manifest {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
    if manifest.format != FORMAT {
        return Err(CheckpointError::Format { got: manifest.format });
    }
    let want = hierarchy.canonical_hash();
    if manifest.hierarchy_sha256 != want {
        return Err(CheckpointError::HierarchyHash { want, got: manifest.hierarchy_sha256 });
    }

    let head = match manifest.head.kind.as_str() {
        "flat" => HeadSpec::Flat {
            classes: manifest.head.classes.ok_or_else(|| CheckpointError::Manifest {
                path: path.display().to_string(),
                msg: "flat head without class count".into(),
            })?,
        },
        "bhccm" => {
            let fusion_name = manifest.head.fusion.clone().unwrap_or_default();
            let fusion = FusionMode::parse(&fusion_name)
                .ok_or(CheckpointError::BadFusion(fusion_name))?;
            HeadSpec::Hiera {
                class_counts: manifest.head.class_counts.clone().unwrap_or_default(),
                fusion,
                mb_bias: manifest.head.mb_bias.unwrap_or(true),
            }
        }
        other => return Err(CheckpointError::BadHead(other.into())),
    };
    let cfg = SegNetConfig {
        in_channels: manifest.arch.in_channels,
        widths: manifest.arch.widths.clone(),
        c_dim: manifest.arch.c_dim,
        dec_kernel: manifest.arch.dec_kernel,
    };
    // Parameter values are overwritten below; the init stream is arbitrary.
    let net = ToySegNet::new(&mut rng::stream(0, "checkpoint-rebuild"), cfg, &head);

    for (name, tensor) in net.params() {
        let rel = manifest
            .params
            .get(&name)
            .ok_or_else(|| CheckpointError::MissingParam { name: name.clone() })?;
        let (data, _dims) = htf::read(&dir.join(rel))?;
        if data.len() != tensor.numel() {
            return Err(CheckpointError::ParamSize {
                name,
                got: data.len(),
                want: tensor.numel(),
            });
        }
        tensor.set_data(&data);
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::samples;
    use rand::Rng;

    fn mm5b() -> Hierarchy {
        Hierarchy::from_json(samples::MM5B_JSON).unwrap()
    }

    fn small_net(h: &Hierarchy) -> ToySegNet {
        let cfg = SegNetConfig { in_channels: 4, widths: vec![6, 8], c_dim: 8, dec_kernel: 1 };
        ToySegNet::new(
            &mut rng::stream(3, "ckpt-test"),
            cfg,
            &HeadSpec::for_hierarchy(h, FusionMode::Bidirectional),
        )
    }

    #[test]
    fn round_trip_restores_every_parameter_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let h = mm5b();
        let net = small_net(&h);
        save(&net, &h, dir.path()).unwrap();
        let back = load(dir.path(), &h).unwrap();

        let a = net.params();
        let b = back.params();
        assert_eq!(a.len(), b.len());
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            for (x, y) in ta.to_vec().iter().zip(tb.to_vec()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{na}");
            }
        }

        // Same input, same logits.
        let mut r = rng::stream(5, "ckpt-input");
        let data = (0..4 * 64).map(|_| r.gen_range(-1.0..1.0)).collect();
        let img = crate::tensor::Tensor::from_vec(data, &[1, 4, 8, 8]).unwrap();
        let la = net.forward_hiera(&img).unwrap();
        let lb = back.forward_hiera(&img).unwrap();
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn hierarchy_hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let h = mm5b();
        let net = small_net(&h);
        save(&net, &h, dir.path()).unwrap();
        let other = Hierarchy::from_json(samples::CROP_JSON).unwrap();
        assert!(matches!(
            load(dir.path(), &other),
            Err(CheckpointError::HierarchyHash { .. })
        ));
    }

    #[test]
    fn missing_parameter_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let h = mm5b();
        let net = small_net(&h);
        save(&net, &h, dir.path()).unwrap();
        // Drop one entry from the manifest.
        let path = dir.path().join("manifest.json");
        let body = std::fs::read_to_string(&path).unwrap();
        let body = body.replacen("\"enc.0.weight\": \"params/enc.0.weight.htf\",", "", 1);
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            load(dir.path(), &h),
            Err(CheckpointError::MissingParam { .. })
        ));
    }
}
