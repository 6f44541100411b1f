use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{Model, ModelConfig, TacoError};
use crate::nn::{Adam, ParamStore};

const MAGIC: &[u8; 8] = b"CUCKPT1\0";

/// Everything needed to resume training bit-for-bit: config, parameters,
/// optimizer moments, and the step/seed bookkeeping.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Adam>,
    pub step: u64,
    pub seed: u64,
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensor_map(
    w: &mut impl Write,
    tensors: impl Iterator<Item = (String, Array2<f64>)>,
    count: u32,
) -> std::io::Result<()> {
    write_u32(w, count)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        write_u32(w, bytes.len() as u32)?;
        w.write_all(bytes)?;
        write_u32(w, t.nrows() as u32)?;
        write_u32(w, t.ncols() as u32)?;
        for &x in t.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensor_map(r: &mut impl Read) -> Result<BTreeMap<String, Array2<f64>>, TacoError> {
    let count = read_u32(r)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(TacoError::BadCheckpoint("tensor name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TacoError::BadCheckpoint("tensor name is not utf-8".into()))?;
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        for x in data.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        let arr = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| TacoError::BadCheckpoint(format!("bad tensor shape: {e}")))?;
        if out.insert(name.clone(), arr).is_some() {
            return Err(TacoError::BadCheckpoint(format!("duplicate tensor {name:?}")));
        }
    }
    Ok(out)
}

/// Binary layout: magic, JSON config block, named f64 parameter tensors,
/// optional Adam state (step, lr, first/second moments), train step, seed.
/// All scalars little-endian; f64 payloads make save/load an exact identity.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TacoError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let config_json = serde_json::to_vec(&ckpt.model.config)
        .map_err(|e| TacoError::BadCheckpoint(format!("config serialization: {e}")))?;
    write_u32(&mut w, config_json.len() as u32)?;
    w.write_all(&config_json)?;

    let count = ckpt.model.params.len() as u32;
    write_tensor_map(
        &mut w,
        ckpt.model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.clone())),
        count,
    )?;

    match &ckpt.optimizer {
        None => w.write_all(&[0u8])?,
        Some(opt) => {
            w.write_all(&[1u8])?;
            let (step, m, v) = opt.state();
            write_u64(&mut w, step)?;
            w.write_all(&opt.lr.to_le_bytes())?;
            write_tensor_map(&mut w, m.iter().map(|(n, t)| (n.clone(), t.clone())), m.len() as u32)?;
            write_tensor_map(&mut w, v.iter().map(|(n, t)| (n.clone(), t.clone())), v.len() as u32)?;
        }
    }
    write_u64(&mut w, ckpt.step)?;
    write_u64(&mut w, ckpt.seed)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TacoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TacoError::BadCheckpoint("bad magic".into()));
    }
    let config_len = read_u32(&mut r)? as usize;
    if config_len > 1 << 20 {
        return Err(TacoError::BadCheckpoint("config block too large".into()));
    }
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json)?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| TacoError::BadCheckpoint(format!("config parse: {e}")))?;
    config.validate()?;

    let tensors = read_tensor_map(&mut r)?;
    let mut params = ParamStore::new();
    for (name, t) in tensors {
        params.insert(&name, t);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let mut lr_b = [0u8; 8];
            r.read_exact(&mut lr_b)?;
            let lr = f64::from_le_bytes(lr_b);
            let m = read_tensor_map(&mut r)?;
            let v = read_tensor_map(&mut r)?;
            Some(Adam::restore(lr, step, m, v))
        }
        other => {
            return Err(TacoError::BadCheckpoint(format!(
                "bad optimizer flag {other}"
            )))
        }
    };
    let step = read_u64(&mut r)?;
    let seed = read_u64(&mut r)?;

    // Cross-check the tensor set against a fresh init of the same config.
    let reference = Model::init(config.clone(), 0)?;
    for name in reference.params.names() {
        if !params.contains(name) {
            return Err(TacoError::BadCheckpoint(format!("missing tensor {name:?}")));
        }
        if params.get(name).dim() != reference.params.get(name).dim() {
            return Err(TacoError::BadCheckpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                params.get(name).dim(),
                reference.params.get(name).dim()
            )));
        }
    }
    if params.len() != reference.params.len() {
        return Err(TacoError::BadCheckpoint("unexpected extra tensors".into()));
    }

    Ok(Checkpoint {
        model: Model { config, params },
        optimizer,
        step,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taco_lite::CuMode;

    fn toy_ckpt() -> Checkpoint {
        let mut cfg = crate::taco_lite::ModelConfig::toy(CuMode::Pse, 10);
        cfg.mel_bins = 8;
        cfg.postnet_channels = 8;
        let model = Model::init(cfg, 21).unwrap();
        Checkpoint {
            model,
            optimizer: Some(Adam::new(2e-3)),
            step: 17,
            seed: 21,
        }
    }

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/model.ckpt");
        let ckpt = toy_ckpt();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.seed, 21);
        assert_eq!(loaded.model.config, ckpt.model.config);
        for (name, t) in ckpt.model.params.iter() {
            let l = loaded.model.params.get(name);
            assert!(
                t.iter()
                    .zip(l.iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "tensor {name} changed"
            );
        }
        let opt = loaded.optimizer.unwrap();
        assert_eq!(opt.lr, 2e-3);
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT\0rest").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TacoError::BadCheckpoint(_))
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.ckpt");
        save_checkpoint(&path, &toy_ckpt()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn tampered_tensor_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shape.ckpt");
        let mut ckpt = toy_ckpt();
        // swap one tensor for a wrongly shaped one
        ckpt.model.params.insert("dec.proj_stop.w", Array2::zeros((3, 3)));
        save_checkpoint(&path, &ckpt).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TacoError::BadCheckpoint(_))
        ));
    }
}
