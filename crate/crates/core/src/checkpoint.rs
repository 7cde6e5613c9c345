//! Binary checkpoints. Layout, all little-endian:
//!
//! `MODEPINN` magic, version (u32), seed (u64), architecture as JSON (u64
//! length + bytes), then for every layer of the coordinate encoder, parameter
//! encoder and decoder in order: weight matrix, bias vector, frozen flag (u8),
//! adapter tag (u8) and, for a non-zero tag, the rank (u64) and adapter tensors.
//!
//! Floats are stored bit-for-bit, so save → load → save is byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::adapters::{Adapter, AdapterKind, BiasOnlyParams, Ia3Params, LoraParams, ModeParams, SvdDiagParams};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SvdFactors};
use crate::model::{build_p2inn, ArchConfig, P2innModel, Part};

const MAGIC: &[u8; 8] = b"MODEPINN";
pub const VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_vec(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    Matrix::column_vector(v).write_to(w)
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r)?))
}

fn get_flag(r: &mut impl Read) -> Result<bool> {
    match get_bytes::<1>(r)?[0] {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(Error::Checkpoint(format!("bad flag byte {b}"))),
    }
}

fn get_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    Ok(Matrix::read_from(r)?.into_data())
}

fn write_adapter(w: &mut impl Write, a: &Adapter) -> std::io::Result<()> {
    match a {
        Adapter::Mode(p) => {
            p.phi.write_to(w)?;
            put_f64(w, p.tau)?;
            put_vec(w, &p.delta_b)?;
            p.factors.write_to(w)?;
            w.write_all(&[p.train_tau as u8, p.train_delta_b as u8])
        }
        Adapter::SvdDiag(p) => {
            put_vec(w, &p.alpha)?;
            p.factors.write_to(w)
        }
        Adapter::Lora(p) => {
            p.a.write_to(w)?;
            p.b.write_to(w)
        }
        Adapter::Ia3(p) => put_vec(w, &p.scale),
        Adapter::BiasOnly(p) => put_vec(w, &p.delta_b),
    }
}

fn read_adapter(r: &mut impl Read, kind: AdapterKind) -> Result<Adapter> {
    Ok(match kind {
        AdapterKind::Mode => Adapter::Mode(ModeParams {
            phi: Matrix::read_from(r)?,
            tau: get_f64(r)?,
            delta_b: get_vec(r)?,
            factors: SvdFactors::read_from(r)?,
            train_tau: get_flag(r)?,
            train_delta_b: get_flag(r)?,
        }),
        AdapterKind::SvdDiag => Adapter::SvdDiag(SvdDiagParams {
            alpha: get_vec(r)?,
            factors: SvdFactors::read_from(r)?,
        }),
        AdapterKind::Lora => {
            let a = Matrix::read_from(r)?;
            let b = Matrix::read_from(r)?;
            let r = a.rows();
            Adapter::Lora(LoraParams { a, b, r })
        }
        AdapterKind::Ia3 => Adapter::Ia3(Ia3Params { scale: get_vec(r)? }),
        AdapterKind::BiasOnly => Adapter::BiasOnly(BiasOnlyParams { delta_b: get_vec(r)? }),
        AdapterKind::Full | AdapterKind::None => {
            return Err(Error::Checkpoint(format!("'{kind}' is not a per-layer adapter")))
        }
    })
}

pub fn write_checkpoint(model: &P2innModel, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    put_u64(w, model.seed)?;
    let arch = serde_json::to_vec(&model.arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u64(w, arch.len() as u64)?;
    w.write_all(&arch)?;
    for (_, mlp) in model.parts() {
        for layer in &mlp.layers {
            layer.weight.write_to(w)?;
            put_vec(w, &layer.bias)?;
            w.write_all(&[layer.frozen as u8])?;
            match &layer.adapter {
                None => w.write_all(&[AdapterKind::None.tag()])?,
                Some(a) => {
                    w.write_all(&[a.kind().tag()])?;
                    put_u64(w, a.rank() as u64)?;
                    write_adapter(w, a)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<P2innModel> {
    if &get_bytes::<8>(r)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint".into()));
    }
    let version = u32::from_le_bytes(get_bytes(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = get_u64(r)?;
    let len = get_u64(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {len}")));
    }
    let mut arch = vec![0u8; len];
    r.read_exact(&mut arch)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let arch: ArchConfig = serde_json::from_slice(&arch).map_err(|e| Error::Checkpoint(e.to_string()))?;
    // The skeleton fixes layer shapes and activations; every tensor is then overwritten.
    let mut model = build_p2inn(&arch, seed)?;
    for part in [Part::Coord, Part::Param, Part::Decoder] {
        for layer in &mut model.part_mut(part).layers {
            let weight = Matrix::read_from(r)?;
            let bias = get_vec(r)?;
            if weight.shape() != layer.weight.shape() || bias.len() != layer.bias.len() {
                return Err(Error::Checkpoint(format!("layer shape mismatch in {}", part.name())));
            }
            layer.weight = weight;
            layer.bias = bias;
            layer.frozen = get_flag(r)?;
            let tag = get_bytes::<1>(r)?[0];
            let kind = AdapterKind::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("unknown adapter tag {tag}")))?;
            layer.adapter = match kind {
                AdapterKind::None => None,
                kind => {
                    let rank = get_u64(r)? as usize;
                    let a = read_adapter(r, kind)?;
                    if a.rank() != rank {
                        return Err(Error::Checkpoint(format!("rank {rank} disagrees with stored tensors")));
                    }
                    Some(a)
                }
            };
        }
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save(model: &P2innModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<P2innModel> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(m: &P2innModel) -> Vec<u8> {
        let mut v = Vec::new();
        write_checkpoint(m, &mut v).unwrap();
        v
    }

    #[test]
    fn round_trip_every_adapter() {
        for kind in [
            AdapterKind::None,
            AdapterKind::Mode,
            AdapterKind::SvdDiag,
            AdapterKind::Lora,
            AdapterKind::Ia3,
            AdapterKind::BiasOnly,
            AdapterKind::Full,
        ] {
            let mut m = build_p2inn(&ArchConfig::desk(3), 5).unwrap();
            let range = m.default_adapted_layers();
            m.attach_adapters(kind, 3, range, 9).unwrap();
            // Move trainables off their init so the round trip is non-trivial.
            let flat: Vec<f64> = m.trainable_flat().iter().enumerate().map(|(i, v)| v + 1e-3 * (i as f64).sin()).collect();
            m.set_trainable_flat(&flat).unwrap();
            let b = bytes(&m);
            let back = read_checkpoint(&mut b.as_slice()).unwrap();
            assert_eq!(back, m, "{kind}");
            assert_eq!(bytes(&back), b, "{kind}");
        }
    }

    #[test]
    fn mode_flags_survive() {
        let mut m = build_p2inn(&ArchConfig::desk(3), 1).unwrap();
        let range = m.default_adapted_layers();
        m.attach_adapters(AdapterKind::Mode, 4, range, 0).unwrap();
        for p in m.mode_params_mut() {
            p.tau = 0.0;
            p.train_tau = false;
        }
        let back = read_checkpoint(&mut bytes(&m).as_slice()).unwrap();
        assert_eq!(back.trainable_count(), m.trainable_count());
        assert_eq!(back.forward_u(0.3, 0.2, &[1.0, 0.0, 0.0]).unwrap(), m.forward_u(0.3, 0.2, &[1.0, 0.0, 0.0]).unwrap());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let m = build_p2inn(&ArchConfig::desk(3), 0).unwrap();
        let b = bytes(&m);
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Checkpoint(_))));
        assert!(read_checkpoint(&mut &b[..b.len() - 3]).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(read_checkpoint(&mut long.as_slice()).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = build_p2inn(&ArchConfig::desk(2), 3).unwrap();
        save(&m, &path).unwrap();
        assert_eq!(load(&path).unwrap(), m);
    }
}
