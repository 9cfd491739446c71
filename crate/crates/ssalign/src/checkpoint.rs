//! Versioned binary checkpoints: a JSON config echo followed by flat f32
//! parameter arrays, batch-norm running moments, and (optionally) optimizer
//! momentum buffers. Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{init_model, EncoderConfig, HeadConfig, ModelParams};
use crate::optim::OptimizerState;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    encoder: EncoderConfig,
    heads: Vec<HeadConfig>,
    epoch: usize,
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(data.len() as u32)?;
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R) -> std::io::Result<Vec<f32>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(r.read_f32::<LittleEndian>()?);
    }
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelParams<f32>,
    epoch: usize,
    opt: Option<&OptimizerState<f32>>,
) -> Result<()> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::create(path).map_err(ctx)?;
    let mut w = BufWriter::new(file);
    let meta = Meta {
        encoder: model.encoder_cfg().clone(),
        heads: model.head_cfgs(),
        epoch,
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        let params = model.params();
        w.write_u32::<LittleEndian>(params.len() as u32)?;
        for p in params {
            write_f32s(&mut w, p.data())?;
        }
        let stats = model.bn_stats();
        w.write_u32::<LittleEndian>(stats.len() as u32)?;
        for s in stats {
            write_f32s(&mut w, &s.mean)?;
            write_f32s(&mut w, &s.var)?;
        }
        match opt {
            Some(o) => {
                w.write_u8(1)?;
                let bufs = o.buffers();
                w.write_u32::<LittleEndian>(bufs.len() as u32)?;
                for b in bufs {
                    match b {
                        Some(v) => {
                            w.write_u8(1)?;
                            write_f32s(&mut w, v)?;
                        }
                        None => w.write_u8(0)?,
                    }
                }
            }
            None => w.write_u8(0)?,
        }
        w.flush()
    })()
    .map_err(ctx)
}

pub struct Checkpoint {
    pub model: ModelParams<f32>,
    pub epoch: usize,
    pub opt_buffers: Option<Vec<Option<Vec<f32>>>>,
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ctx = |e| Error::io(path.display().to_string(), e);
    let file = std::fs::File::open(path).map_err(ctx)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ctx)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(ctx)?;
    if version != VERSION {
        return Err(Error::Version(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let json_len = r.read_u32::<LittleEndian>().map_err(ctx)? as usize;
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(ctx)?;
    let meta: Meta =
        serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad meta: {e}")))?;

    let mut model: ModelParams<f32> = init_model(&meta.encoder, &meta.heads, 0)?;
    let n_params = r.read_u32::<LittleEndian>().map_err(ctx)? as usize;
    if n_params != model.param_count() {
        return Err(Error::Format(format!(
            "checkpoint has {n_params} parameters, config implies {}",
            model.param_count()
        )));
    }
    for p in model.params_mut() {
        let data = read_f32s(&mut r).map_err(ctx)?;
        if data.len() != p.numel() {
            return Err(Error::Format("parameter length mismatch".into()));
        }
        p.data_mut().copy_from_slice(&data);
    }
    let n_stats = r.read_u32::<LittleEndian>().map_err(ctx)? as usize;
    {
        let mut stats = model.bn_stats_mut();
        if n_stats != stats.len() {
            return Err(Error::Format("batch-norm stats count mismatch".into()));
        }
        for s in stats.iter_mut() {
            s.mean = read_f32s(&mut r).map_err(ctx)?;
            s.var = read_f32s(&mut r).map_err(ctx)?;
        }
    }
    let has_opt = r.read_u8().map_err(ctx)?;
    let opt_buffers = if has_opt == 1 {
        let n = r.read_u32::<LittleEndian>().map_err(ctx)? as usize;
        let mut bufs = Vec::with_capacity(n);
        for _ in 0..n {
            let present = r.read_u8().map_err(ctx)?;
            bufs.push(if present == 1 {
                Some(read_f32s(&mut r).map_err(ctx)?)
            } else {
                None
            });
        }
        Some(bufs)
    } else {
        None
    };
    Ok(Checkpoint {
        model,
        epoch: meta.epoch,
        opt_buffers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HeadKind;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = EncoderConfig {
            in_channels: 1,
            widths: vec![8, 16, 64],
            feature_dim: 64,
            residual: true,
        };
        let heads = vec![
            HeadConfig {
                task_id: 0,
                output_dim: 10,
                kind: HeadKind::Classification,
            },
            HeadConfig {
                task_id: 2,
                output_dim: 2,
                kind: HeadKind::Regression,
            },
        ];
        let model: ModelParams<f32> = init_model(&cfg, &heads, 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &model, 7, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.epoch, 7);
        assert_eq!(loaded.model, model);
        // saving the loaded model reproduces identical bytes
        let path2 = dir.path().join("ckpt2.bin");
        save_checkpoint(&path2, &loaded.model, 7, None).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }
}
