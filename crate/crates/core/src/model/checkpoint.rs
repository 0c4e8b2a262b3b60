//! Model checkpoint container.
//!
//! Layout (little endian): magic `PALNCKPT`, `u32` version, config hash,
//! variant tag, seed, architecture, then every parameter block as
//! `(name, role, rows, cols, values)` and finally the prototype matrix.

use std::path::Path;

use super::{Architecture, BlockRole, ModelParams, PrototypeBank};
use crate::binio::{read_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PALNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub variant: String,
    pub seed: u64,
    pub model: ModelParams,
    pub prototypes: PrototypeBank,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.arch == other.arch && self.rng_seed == other.rng_seed && self.blocks == other.blocks
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, CHECKPOINT_VERSION);
        self.write(&mut w);
        w.into_bytes()
    }

    fn write(&self, w: &mut Writer) {
        w.str(&self.config_hash);
        w.str(&self.variant);
        w.u64(self.seed);
        w.u64(self.model.rng_seed());
        let a = self.model.architecture();
        for d in [a.input_dim, a.width, a.num_stages, a.groups, a.proj_hidden, a.proj_dim, a.num_classes] {
            w.u32(d as u32);
        }
        w.u32(self.model.blocks().len() as u32);
        for b in self.model.blocks() {
            w.str(&b.name);
            w.u8(b.role.code());
            w.matrix(&b.value);
        }
        w.matrix(self.prototypes.values());
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(MAGIC, CHECKPOINT_VERSION);
        self.write(&mut w);
        w.finish(path)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open(data, MAGIC, CHECKPOINT_VERSION)?;
        let config_hash = r.str()?;
        let variant = r.str()?;
        let seed = r.u64()?;
        let rng_seed = r.u64()?;
        let mut d = [0usize; 7];
        for v in d.iter_mut() {
            *v = r.u32()? as usize;
        }
        let arch = Architecture {
            input_dim: d[0],
            width: d[1],
            num_stages: d[2],
            groups: d[3],
            proj_hidden: d[4],
            proj_dim: d[5],
            num_classes: d[6],
        };
        arch.validate().map_err(|e| r.err(format!("invalid architecture: {e}")))?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::new();
        for _ in 0..n {
            let name = r.str()?;
            let role = BlockRole::from_code(r.u8()?).ok_or_else(|| r.err("unknown block role"))?;
            blocks.push((name, role, r.matrix()?));
        }
        let protos = r.matrix()?;
        r.expect_end()?;
        let model = ModelParams::from_blocks(arch, rng_seed, blocks)?;
        let prototypes = PrototypeBank::new(protos).map_err(|e| r.err(e.to_string()))?;
        if prototypes.dim() != arch.proj_dim {
            return Err(Error::Contract("prototype dimension does not match projection dimension".into()));
        }
        Ok(Checkpoint { config_hash, variant, seed, model, prototypes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let arch = Architecture {
            input_dim: 5,
            width: 4,
            num_stages: 2,
            groups: 2,
            proj_hidden: 4,
            proj_dim: 3,
            num_classes: 2,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        Checkpoint {
            config_hash: "abc123".into(),
            variant: "jt-ent".into(),
            seed: 9,
            model: ModelParams::new(arch, 9).unwrap(),
            prototypes: PrototypeBank::random(3, 5, &mut rng),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        ck.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), ck);
    }

    #[test]
    fn truncated_and_mismatched_files_fail() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[8] = 7;
        assert!(matches!(Checkpoint::from_bytes(&v), Err(Error::UnsupportedVersion { found: 7, .. })));
    }
}
