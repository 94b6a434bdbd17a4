//! Binary checkpoint: supernet weights plus the search-space and training
//! configurations and the sampling rng state. Layout: an 8-byte magic, a
//! little-endian u64 JSON header length, the JSON header, then raw f64
//! little-endian parameter data in header order.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamKind;
use crate::supernet::{build_supernet, SearchSpaceConfig, Supernet};
use crate::trainer::TrainConfig;

const MAGIC: &[u8; 8] = b"MSNASCK1";

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    kind: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    search_space: SearchSpaceConfig,
    train_config: TrainConfig,
    rng_seed: Vec<u8>,
    rng_word_pos: u128,
    params: Vec<ParamHeader>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub supernet: Supernet,
    pub train_config: TrainConfig,
    pub rng: ChaCha8Rng,
}

fn kind_str(kind: ParamKind) -> &'static str {
    match kind {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Norm => "norm",
    }
}

pub fn save_checkpoint<P: AsRef<Path>>(
    path: P,
    supernet: &Supernet,
    train_config: &TrainConfig,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let header = Header {
        search_space: supernet.config.clone(),
        train_config: train_config.clone(),
        rng_seed: rng.get_seed().to_vec(),
        rng_word_pos: rng.get_word_pos(),
        params: supernet
            .store
            .params()
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                kind: kind_str(p.kind).to_string(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in supernet.store.params() {
        for v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(
        std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?,
    );
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a checkpoint file".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut supernet = build_supernet(&header.search_space, 0)?;
    if header.params.len() != supernet.store.len() {
        return Err(Error::Data(format!(
            "checkpoint has {} parameters, architecture wants {}",
            header.params.len(),
            supernet.store.len()
        )));
    }
    for (i, ph) in header.params.iter().enumerate() {
        let id = supernet
            .store
            .id_of(&ph.name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {}", ph.name)))?;
        if id != i || supernet.store.value(id).shape() != ph.shape.as_slice() {
            return Err(Error::Data(format!("parameter layout mismatch at {}", ph.name)));
        }
        let n: usize = ph.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        supernet.store.set_value(id, crate::tensor::Tensor::from_vec(&ph.shape, data)?);
    }

    let seed: [u8; 32] = header
        .rng_seed
        .as_slice()
        .try_into()
        .map_err(|_| Error::Data("bad rng seed length".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(header.rng_word_pos);

    Ok(Checkpoint { supernet, train_config: header.train_config, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::supernet::{GroupSpec, Ratio};
    use rand::RngCore;

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let config = SearchSpaceConfig {
            stages: 2,
            num_classes: 3,
            image_channels: 1,
            stem_kernel: 3,
            stem_stride: 1,
            resolution_pool: vec![8],
            depth_pool: vec![1, 2],
            kernel_pool: vec![3],
            cum_width_ratio_pool: vec![Ratio::new(1, 2).unwrap(), Ratio::one()],
            groups: vec![GroupSpec { blocks: 2, width: 4, hidden: 6, stride: 1 }],
        };
        let sn = build_supernet(&config, 77).unwrap();
        let tc = TrainConfig { epochs: 3, seed: 9, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64(); // advance so the word position is nontrivial
        let dir = std::env::temp_dir().join("msnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("ck.bin");
        save_checkpoint(&path, &sn, &tc, &rng).unwrap();

        let mut loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.supernet.config, config);
        assert_eq!(loaded.train_config, tc);
        for id in 0..sn.store.len() {
            assert_eq!(loaded.supernet.store.value(id).data(), sn.store.value(id).data());
        }
        // Restored rng continues the same stream.
        let mut orig = rng;
        assert_eq!(orig.next_u64(), loaded.rng.next_u64());
    }

    #[test]
    fn garbage_file_is_rejected() {
        let dir = std::env::temp_dir().join("msnas_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
