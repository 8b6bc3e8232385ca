//! Versioned binary checkpoint container: named tensors with shapes and
//! little-endian f64 payloads, round-trip exact.
//!
//! Layout: magic `SWCKPT`, u16 version, u32 entry count, then per entry a
//! length-prefixed UTF-8 name, u32 rank, u64 dims, and the raw payload.

use crate::auxnet::AuxNet;
use crate::error::Error;
use crate::model::{ModelConfig, ResidualModel};
use crate::tensor::Tensor;
use crate::Result;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 6] = b"SWCKPT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.entries {
            let bytes = name.as_bytes();
            w.write_all(&(bytes.len() as u32).to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::parse(
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = read_u16(&mut r)?;
        if version != VERSION {
            return Err(Error::parse(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u32(&mut r)? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|e| Error::parse(format!("bad tensor name: {e}")))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = Vec::with_capacity(len);
            let mut buf = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            entries.push((name, Tensor::new(shape, data)?));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

/// Pack a model (and any auxiliary nets) into one container.
pub fn pack_model(model: &ResidualModel, aux_nets: Option<&[AuxNet]>) -> Checkpoint {
    let mut ckpt = Checkpoint::new();
    ckpt.push("input.w", model.input.w.clone());
    ckpt.push("input.b", model.input.b.clone());
    for (i, b) in model.blocks.iter().enumerate() {
        ckpt.push(format!("block{i}.w1"), b.w1.clone());
        ckpt.push(format!("block{i}.b1"), b.b1.clone());
        ckpt.push(format!("block{i}.w2"), b.w2.clone());
        ckpt.push(format!("block{i}.b2"), b.b2.clone());
    }
    ckpt.push("output.w", model.output.w.clone());
    ckpt.push("output.b", model.output.b.clone());
    if let Some(nets) = aux_nets {
        for (k, net) in nets.iter().enumerate() {
            for (i, b) in net.blocks.iter().enumerate() {
                ckpt.push(format!("aux{k}.block{i}.w1"), b.w1.clone());
                ckpt.push(format!("aux{k}.block{i}.b1"), b.b1.clone());
                ckpt.push(format!("aux{k}.block{i}.w2"), b.w2.clone());
                ckpt.push(format!("aux{k}.block{i}.b2"), b.b2.clone());
            }
        }
    }
    ckpt
}

/// Rebuild a model from a container written by [`pack_model`].
pub fn unpack_model(ckpt: &Checkpoint, cfg: ModelConfig) -> Result<ResidualModel> {
    let mut model = ResidualModel::zeros(cfg)?;
    let need = |name: &str| {
        ckpt.get(name)
            .cloned()
            .ok_or_else(|| Error::parse(format!("checkpoint is missing tensor {name}")))
    };
    model.input.w = need("input.w")?;
    model.input.b = need("input.b")?;
    for i in 0..cfg.blocks {
        model.blocks[i].w1 = need(&format!("block{i}.w1"))?;
        model.blocks[i].b1 = need(&format!("block{i}.b1"))?;
        model.blocks[i].w2 = need(&format!("block{i}.w2"))?;
        model.blocks[i].b2 = need(&format!("block{i}.b2"))?;
    }
    model.output.w = need("output.w")?;
    model.output.b = need("output.b")?;
    Ok(model)
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn model_round_trip_is_exact() {
        let cfg = ModelConfig {
            raw_dim: 2,
            width: 3,
            hidden: 4,
            classes: 2,
            blocks: 2,
            residual_scale: 1.0,
        };
        let model = ResidualModel::init(cfg, &mut SeededRng::new(3)).unwrap();
        let mut buf = Vec::new();
        pack_model(&model, None).write_to(&mut buf).unwrap();
        let back = unpack_model(&Checkpoint::read_from(&buf[..]).unwrap(), cfg).unwrap();
        assert_eq!(back, model);

        // And through a file via save/load.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        pack_model(&model, None).save(&path).unwrap();
        let loaded = unpack_model(&Checkpoint::load(&path).unwrap(), cfg).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::read_from(&b"not a checkpoint"[..]).is_err());
    }

    #[test]
    fn aux_nets_share_the_container() {
        let cfg = ModelConfig {
            raw_dim: 2,
            width: 3,
            hidden: 4,
            classes: 2,
            blocks: 2,
            residual_scale: 1.0,
        };
        let mut rng = SeededRng::new(9);
        let model = ResidualModel::init(cfg, &mut rng).unwrap();
        let aux = vec![crate::auxnet::AuxNet::init(3, 2, 1, &mut rng).unwrap()];
        let ckpt = pack_model(&model, Some(&aux));
        assert!(ckpt.get("aux0.block0.w1").is_some());
        assert_eq!(ckpt.get("aux0.block0.w1").unwrap(), &aux[0].blocks[0].w1);
    }
}
