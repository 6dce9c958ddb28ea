//! Model persistence: a human-readable `manifest.json` describing the model
//! and its parameter blobs, next to a `params.bin` holding every tensor as
//! little-endian f32 in manifest order. Round trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Layer, Model, ModelConfig};

const FORMAT: &str = "flgc-checkpoint";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Serialize, Deserialize, Clone, Debug, PartialEq)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    /// Index into the model's layer list.
    layer: usize,
    role: String,
    shape: Vec<usize>,
    /// Byte offset into params.bin.
    offset: u64,
    /// Element count; the blob spans 4 * len bytes.
    len: u64,
}

#[derive(Serialize, Deserialize, Clone, Debug)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    model: ModelConfig,
    step: u64,
    params_len: u64,
    params_sha256: String,
    blobs: Vec<BlobEntry>,
}

/// One persisted tensor: (role, shape, data). Shapes are given explicitly
/// because vectors (biases, batchnorm channels) carry none of their own.
type SlotRef<'a> = (&'static str, Vec<usize>, &'a [f32]);

fn layer_slots(layer: &Layer<f32>) -> Vec<SlotRef<'_>> {
    match layer {
        Layer::Conv(l) => vec![
            ("weight", l.w.shape().to_vec(), l.w.data()),
            ("bias", vec![l.b.len()], &l.b),
        ],
        Layer::DwConv(l) => vec![
            ("weight", l.w.shape().to_vec(), l.w.data()),
            ("bias", vec![l.b.len()], &l.b),
        ],
        Layer::Flgc(h) => vec![
            ("weight", h.layer.weight.shape().to_vec(), h.layer.weight.data()),
            ("bias", vec![h.layer.bias.len()], &h.layer.bias),
            ("s_meta", h.layer.s_meta.shape().to_vec(), h.layer.s_meta.data()),
            ("t_meta", h.layer.t_meta.shape().to_vec(), h.layer.t_meta.data()),
        ],
        Layer::BatchNorm(l) => vec![
            ("gamma", vec![l.gamma.len()], &l.gamma),
            ("beta", vec![l.beta.len()], &l.beta),
            ("running_mean", vec![l.running_mean.len()], &l.running_mean),
            ("running_var", vec![l.running_var.len()], &l.running_var),
        ],
        Layer::Relu | Layer::AvgPool { .. } => Vec::new(),
        Layer::Fc(l) => vec![
            ("weight", l.w.shape().to_vec(), l.w.data()),
            ("bias", vec![l.b.len()], &l.b),
        ],
    }
}

fn layer_slots_mut(layer: &mut Layer<f32>) -> Vec<(&'static str, &mut [f32])> {
    match layer {
        Layer::Conv(l) => vec![("weight", l.w.data_mut()), ("bias", &mut l.b)],
        Layer::DwConv(l) => vec![("weight", l.w.data_mut()), ("bias", &mut l.b)],
        Layer::Flgc(h) => vec![
            ("weight", h.layer.weight.data_mut()),
            ("bias", &mut h.layer.bias),
            ("s_meta", h.layer.s_meta.data_mut()),
            ("t_meta", h.layer.t_meta.data_mut()),
        ],
        Layer::BatchNorm(l) => vec![
            ("gamma", &mut l.gamma),
            ("beta", &mut l.beta),
            ("running_mean", &mut l.running_mean),
            ("running_var", &mut l.running_var),
        ],
        Layer::Relu | Layer::AvgPool { .. } => Vec::new(),
        Layer::Fc(l) => vec![("weight", l.w.data_mut()), ("bias", &mut l.b)],
    }
}

/// Writes `manifest.json` and `params.bin` under `dir`, creating it if
/// needed. Non-finite parameters are rejected before anything is written.
pub fn save(model: &Model<f32>, dir: &Path) -> Result<()> {
    let mut blobs = Vec::new();
    let mut bytes: Vec<u8> = Vec::new();
    for (li, layer) in model.layers.iter().enumerate() {
        for (role, shape, data) in layer_slots(layer) {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {li} {role}")));
            }
            let expect: usize = shape.iter().product();
            debug_assert_eq!(expect, data.len());
            blobs.push(BlobEntry {
                layer: li,
                role: role.to_string(),
                shape,
                offset: bytes.len() as u64,
                len: data.len() as u64,
            });
            for v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        model: model.config.clone(),
        step: model.step,
        params_len: bytes.len() as u64,
        params_sha256: hex(&Sha256::digest(&bytes)),
        blobs,
    };
    fs::create_dir_all(dir)?;
    fs::write(dir.join(PARAMS_FILE), &bytes)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Loads a checkpoint directory back into a model, verifying the format tag,
/// version, blob table, checksum, and that every parameter is finite.
pub fn load(dir: &Path) -> Result<Model<f32>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::format(&manifest_path, format!("bad manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::format(&manifest_path, format!("format {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("version {} (supported: {VERSION})", manifest.version),
        ));
    }

    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path)?;
    if bytes.len() as u64 != manifest.params_len {
        return Err(Error::format(
            &params_path,
            format!("{} bytes, manifest says {}", bytes.len(), manifest.params_len),
        ));
    }
    let digest = hex(&Sha256::digest(&bytes));
    if digest != manifest.params_sha256 {
        return Err(Error::format(
            &params_path,
            format!("sha256 mismatch: {digest} vs {}", manifest.params_sha256),
        ));
    }

    let mut model = Model::<f32>::build(&manifest.model)?;
    let mut cursor: u64 = 0;
    let mut entries = manifest.blobs.iter();
    for (li, layer) in model.layers.iter_mut().enumerate() {
        for (role, slot) in layer_slots_mut(layer) {
            let entry = entries.next().ok_or_else(|| {
                Error::format(&manifest_path, format!("missing blob for layer {li} {role}"))
            })?;
            let expect: u64 = slot.len() as u64;
            if entry.layer != li
                || entry.role != role
                || entry.len != expect
                || entry.shape.iter().product::<usize>() as u64 != expect
            {
                return Err(Error::format(
                    &manifest_path,
                    format!(
                        "blob mismatch at layer {li} {role}: entry {}/{} len {} shape {:?}, want len {expect}",
                        entry.layer, entry.role, entry.len, entry.shape
                    ),
                ));
            }
            if entry.offset != cursor {
                return Err(Error::format(
                    &manifest_path,
                    format!("blob offset {} for layer {li} {role}, want {cursor}", entry.offset),
                ));
            }
            let start = cursor as usize;
            let end = start + slot.len() * 4;
            if end > bytes.len() {
                return Err(Error::format(&params_path, format!("truncated at layer {li} {role}")));
            }
            for (k, v) in slot.iter_mut().enumerate() {
                let o = start + 4 * k;
                *v = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
            }
            if slot.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {li} {role}")));
            }
            cursor = end as u64;
        }
    }
    if let Some(extra) = entries.next() {
        return Err(Error::format(
            &manifest_path,
            format!("unconsumed blob entry: layer {} {}", extra.layer, extra.role),
        ));
    }
    if cursor != manifest.params_len {
        return Err(Error::format(
            &params_path,
            format!("{cursor} bytes consumed of {}", manifest.params_len),
        ));
    }
    model.step = manifest.step;
    Ok(model)
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::write_synthetic_mnist;
    use crate::flgc::GroupingMode;
    use crate::model::mini_dsc;
    use crate::train::{train, TrainConfig};
    use crate::Tensor;
    use std::path::PathBuf;

    fn scratch(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("flgc-ckpt-{tag}-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    fn trained_model(tag: &str) -> Model<f32> {
        let data_dir = scratch(&format!("{tag}-data"));
        write_synthetic_mnist(&data_dir, 24, 8, 5).unwrap();
        let data = crate::data::load_mnist(&data_dir, crate::data::Split::Train).unwrap();
        let cfg = mini_dsc(4, GroupingMode::Learned, 7);
        let mut model = Model::<f32>::build(&cfg).unwrap();
        let mut tc = TrainConfig::new(3, 0.05);
        tc.batch_size = 8;
        train(&mut model, &data, &tc, |_| {}).unwrap();
        model
    }

    fn all_tensors(model: &Model<f32>) -> Vec<Vec<f32>> {
        model.layers.iter().flat_map(|l| layer_slots(l).into_iter().map(|(_, _, d)| d.to_vec())).collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = trained_model("rt");
        assert!(model.step > 0);
        let dir = scratch("rt");
        save(&model, &dir).unwrap();
        let loaded = load(&dir).unwrap();
        assert_eq!(loaded.step, model.step);
        assert_eq!(loaded.config, model.config);
        let a = all_tensors(&model);
        let b = all_tensors(&loaded);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.len(), y.len());
            for (p, q) in x.iter().zip(y) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
        // Eval logits agree bitwise, running statistics included.
        let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 7) as f32 * 0.1);
        let la = model.forward_eval(&x).unwrap();
        let lb = loaded.forward_eval(&x).unwrap();
        assert_eq!(la.data(), lb.data());
    }

    #[test]
    fn blob_table_is_consistent() {
        let model = trained_model("blob");
        let dir = scratch("blob");
        save(&model, &dir).unwrap();
        let manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
        let total: u64 = manifest.blobs.iter().map(|b| b.len).sum();
        assert_eq!(total * 4, manifest.params_len);
        let file_len = fs::metadata(dir.join(PARAMS_FILE)).unwrap().len();
        assert_eq!(file_len, manifest.params_len);
        // Offsets are contiguous and ascending.
        let mut cursor = 0;
        for b in &manifest.blobs {
            assert_eq!(b.offset, cursor);
            assert_eq!(b.shape.iter().product::<usize>() as u64, b.len);
            cursor += b.len * 4;
        }
        // Every parameterized layer kind shows up in the table.
        for role in ["weight", "bias", "s_meta", "t_meta", "gamma", "running_var"] {
            assert!(manifest.blobs.iter().any(|b| b.role == role), "missing {role}");
        }
    }

    #[test]
    fn edited_blob_length_is_rejected() {
        let model = trained_model("len");
        let dir = scratch("len");
        save(&model, &dir).unwrap();
        let path = dir.join(MANIFEST_FILE);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        manifest.blobs[0].len += 1;
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        match load(&dir) {
            Err(Error::Format { .. }) => {}
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a model"),
        }
    }

    #[test]
    fn truncated_params_are_rejected() {
        let model = trained_model("trunc");
        let dir = scratch("trunc");
        save(&model, &dir).unwrap();
        let path = dir.join(PARAMS_FILE);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match load(&dir) {
            Err(Error::Format { .. }) => {}
            Err(e) => panic!("expected format error, got {e}"),
            Ok(_) => panic!("expected format error, got a model"),
        }
    }

    #[test]
    fn corrupted_params_fail_the_checksum() {
        let model = trained_model("sum");
        let dir = scratch("sum");
        save(&model, &dir).unwrap();
        let path = dir.join(PARAMS_FILE);
        let mut bytes = fs::read(&path).unwrap();
        bytes[10] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        match load(&dir) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("sha256"), "{reason}"),
            Err(e) => panic!("expected checksum error, got {e}"),
            Ok(_) => panic!("expected checksum error, got a model"),
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let model = trained_model("ver");
        let dir = scratch("ver");
        save(&model, &dir).unwrap();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 9");
        fs::write(&path, text).unwrap();
        match load(&dir) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("version"), "{reason}"),
            Err(e) => panic!("expected version error, got {e}"),
            Ok(_) => panic!("expected version error, got a model"),
        }
    }

    #[test]
    fn non_finite_parameters_are_rejected_both_ways() {
        let mut model = trained_model("nan");
        let dir = scratch("nan");
        // Saving a poisoned model fails up front.
        if let Layer::Conv(l) = &mut model.layers[0] {
            l.w.data_mut()[0] = f32::NAN;
        } else {
            panic!("layer 0 is conv");
        }
        match save(&model, &dir) {
            Err(Error::NonFinite(_)) => {}
            other => panic!("expected non-finite error, got {other:?}"),
        }
        // A checkpoint whose bytes decode to NaN fails on load even with a
        // consistent checksum.
        if let Layer::Conv(l) = &mut model.layers[0] {
            l.w.data_mut()[0] = 0.5;
        }
        save(&model, &dir).unwrap();
        let ppath = dir.join(PARAMS_FILE);
        let mut bytes = fs::read(&ppath).unwrap();
        bytes[..4].copy_from_slice(&f32::NAN.to_le_bytes());
        let digest = hex(&Sha256::digest(&bytes));
        fs::write(&ppath, &bytes).unwrap();
        let mpath = dir.join(MANIFEST_FILE);
        let mut manifest: Manifest =
            serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        manifest.params_sha256 = digest;
        fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
        match load(&dir) {
            Err(Error::NonFinite(_)) => {}
            Err(e) => panic!("expected non-finite error, got {e}"),
            Ok(_) => panic!("expected non-finite error, got a model"),
        }
    }
}
