//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "EVICKPT1"
//! meta     u32 length + UTF-8 `key=value` lines (model config, then caller notes)
//! count    u32
//! entry    u32 name length, name, u32 ndim, ndim × u64 dims, f64 values
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::model::{EviModel, ModelConfig, ModelError, TeacherInput};

const MAGIC: &[u8; 8] = b"EVICKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A loaded model plus the free-form notes saved alongside it.
pub struct Checkpoint {
    pub model: EviModel,
    pub notes: Vec<(String, String)>,
}

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    let join = |v: &[usize]| {
        v.iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",")
    };
    vec![
        ("model.cardinalities".into(), join(&cfg.cardinalities)),
        ("model.embed_dim".into(), cfg.embed_dim.to_string()),
        ("model.n_experts".into(), cfg.n_experts.to_string()),
        ("model.expert_dim".into(), cfg.expert_dim.to_string()),
        ("model.tower_hidden".into(), join(&cfg.tower_hidden)),
        ("model.cond_dim".into(), cfg.cond_dim.to_string()),
        (
            "model.transfer_layers".into(),
            cfg.transfer_layers.to_string(),
        ),
        (
            "model.teacher".into(),
            match cfg.teacher {
                TeacherInput::Conditioned => "conditioned",
                TeacherInput::Plain => "plain",
            }
            .into(),
        ),
        ("model.imputation".into(), cfg.imputation.to_string()),
    ]
}

fn parse_config(meta: &[(String, String)]) -> Result<ModelConfig, CheckpointError> {
    let get = |k: &str| {
        meta.iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| CheckpointError::Corrupt(format!("missing {k}")))
    };
    let num = |k: &str| -> Result<usize, CheckpointError> {
        get(k)?
            .parse()
            .map_err(|_| CheckpointError::Corrupt(format!("bad {k}")))
    };
    let list = |k: &str| -> Result<Vec<usize>, CheckpointError> {
        get(k)?
            .split(',')
            .map(|x| {
                x.parse()
                    .map_err(|_| CheckpointError::Corrupt(format!("bad {k}")))
            })
            .collect()
    };
    let mut cfg = ModelConfig::new(list("model.cardinalities")?);
    cfg.embed_dim = num("model.embed_dim")?;
    cfg.n_experts = num("model.n_experts")?;
    cfg.expert_dim = num("model.expert_dim")?;
    cfg.tower_hidden = list("model.tower_hidden")?;
    cfg.cond_dim = num("model.cond_dim")?;
    cfg.transfer_layers = num("model.transfer_layers")?;
    cfg.teacher = match get("model.teacher")? {
        "conditioned" => TeacherInput::Conditioned,
        "plain" => TeacherInput::Plain,
        other => {
            return Err(CheckpointError::Corrupt(format!(
                "bad teacher mode {other:?}"
            )))
        }
    };
    cfg.imputation = get("model.imputation")?
        .parse()
        .map_err(|_| CheckpointError::Corrupt("bad model.imputation".into()))?;
    Ok(cfg)
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<(), CheckpointError> {
    let v =
        u32::try_from(v).map_err(|_| CheckpointError::Corrupt("length overflows u32".into()))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn get_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Writes `model` to `w`. Notes must not contain newlines or `=` in keys.
pub fn write_checkpoint(
    w: &mut impl Write,
    model: &EviModel,
    notes: &[(String, String)],
) -> Result<(), CheckpointError> {
    if notes
        .iter()
        .any(|(k, v)| k.contains(['=', '\n']) || v.contains('\n') || k.starts_with("model."))
    {
        return Err(CheckpointError::Corrupt("invalid note key or value".into()));
    }
    w.write_all(MAGIC)?;
    let meta: String = config_lines(model.config())
        .iter()
        .chain(notes)
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect();
    put_u32(w, meta.len())?;
    w.write_all(meta.as_bytes())?;
    let params = model.params();
    put_u32(w, params.len())?;
    for (name, t) in params.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.shape().len())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a checkpoint written by [`write_checkpoint`], rebuilding the model.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::BadMagic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let meta_len = get_u32(r)?;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let meta = String::from_utf8(meta)
        .map_err(|_| CheckpointError::Corrupt("metadata is not UTF-8".into()))?;
    let mut pairs = Vec::new();
    for line in meta.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CheckpointError::Corrupt(format!("bad metadata line {line:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let mut model = EviModel::build(parse_config(&pairs)?)?;
    let count = get_u32(r)?;
    if count != model.params().len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} parameters, found {count}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let name_len = get_u32(r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let ndim = get_u32(r)?;
        let shape = (0..ndim)
            .map(|_| get_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| CheckpointError::Corrupt(format!("unknown parameter {name}")))?;
        if model.params().get(id).shape() != shape.as_slice() {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for {name}"
            )));
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_bits(get_u64(r)?));
        }
        *model.params_mut().get_mut(id) = Tensor::new(shape, values).map_err(ModelError::from)?;
    }
    let notes = pairs
        .into_iter()
        .filter(|(k, _)| !k.starts_with("model."))
        .collect();
    Ok(Checkpoint { model, notes })
}

pub fn save(
    path: &Path,
    model: &EviModel,
    notes: &[(String, String)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model, notes)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EviModel {
        let mut cfg = ModelConfig::new(vec![3, 4]);
        cfg.expert_dim = 6;
        cfg.n_experts = 2;
        cfg.tower_hidden = vec![5, 4, 3];
        cfg.cond_dim = 2;
        EviModel::new(cfg, 9).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = small();
        let mut buf = Vec::new();
        let notes = vec![("method".to_string(), "evi".to_string())];
        write_checkpoint(&mut buf, &m, &notes).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.model.config(), m.config());
        assert_eq!(back.notes, notes);
        for ((na, a), (nb, b)) in m.params().iter().zip(back.model.params().iter()) {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(matches!(
            read_checkpoint(&mut &b"NOTACKPTxxxx"[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &small(), &[]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
