//! Versioned binary checkpoint container.
//!
//! Layout (little-endian): magic, format version, config hash, stage tag,
//! seed, model variant, a string meta map, then every named parameter array
//! with its shape and raw f64 data. Round-trips are bitwise exact.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::nn::Matrix;
use crate::policy::{Actor, ActorParams, CriticParams, MaskMode, MlpActorParams, MlpConfig, ModelConfig};
use crate::{Result, UmcError};

const MAGIC: &[u8; 8] = b"UMCCKPT\x01";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub stage: String,
    pub seed: u64,
    pub variant: String,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Matrix)>,
}

impl Checkpoint {
    /// Capture an actor/critic pair; arrays are namespaced `actor/` and
    /// `critic/` in store order.
    pub fn capture(
        actor: &Actor,
        critic: &CriticParams,
        config_hash: u64,
        stage: &str,
        seed: u64,
    ) -> Self {
        let mut meta = BTreeMap::new();
        meta.insert("n_joints".into(), actor.n_joints().to_string());
        match actor {
            Actor::Transformer(a) => {
                meta.insert("d_model".into(), a.cfg.d_model.to_string());
                meta.insert("blocks".into(), a.cfg.blocks.to_string());
                meta.insert("heads".into(), a.cfg.heads.to_string());
                meta.insert("d_ff".into(), a.cfg.d_ff.to_string());
                meta.insert(
                    "mask_mode".into(),
                    match a.cfg.mask_mode {
                        MaskMode::Column => "column",
                        MaskMode::RowAndColumn => "row-column",
                    }
                    .to_string(),
                );
            }
            Actor::Mlp(a) => {
                meta.insert(
                    "mlp_hidden".into(),
                    a.cfg.hidden.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(","),
                );
            }
        }
        meta.insert("critic_d_model".into(), critic.cfg.d_model.to_string());
        meta.insert("critic_blocks".into(), critic.cfg.blocks.to_string());
        meta.insert("critic_heads".into(), critic.cfg.heads.to_string());
        meta.insert("critic_d_ff".into(), critic.cfg.d_ff.to_string());

        let mut arrays = Vec::new();
        for e in actor.store().entries() {
            arrays.push((format!("actor/{}", e.name), e.value.clone()));
        }
        for e in critic.store.entries() {
            arrays.push((format!("critic/{}", e.name), e.value.clone()));
        }
        Checkpoint {
            config_hash,
            stage: stage.to_string(),
            seed,
            variant: actor.variant().to_string(),
            meta,
            arrays,
        }
    }

    fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| UmcError::Checkpoint(format!("missing or invalid meta key {key}")))
    }

    /// Rebuild the actor/critic pair this checkpoint captured.
    pub fn restore(&self) -> Result<(Actor, CriticParams)> {
        let n_joints = self.meta_usize("n_joints")?;
        let mask_mode = match self.meta.get("mask_mode").map(String::as_str) {
            Some("row-column") => MaskMode::RowAndColumn,
            _ => MaskMode::Column,
        };
        let mut actor = match self.variant.as_str() {
            "transformer" => {
                let cfg = ModelConfig {
                    n_joints,
                    d_model: self.meta_usize("d_model")?,
                    blocks: self.meta_usize("blocks")?,
                    heads: self.meta_usize("heads")?,
                    d_ff: self.meta_usize("d_ff")?,
                    mask_mode,
                };
                Actor::Transformer(ActorParams::init(cfg, 0)?)
            }
            "mlp" => {
                let hidden = self
                    .meta
                    .get("mlp_hidden")
                    .map(|s| {
                        s.split(',')
                            .filter(|p| !p.is_empty())
                            .map(|p| p.parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .transpose()
                    .map_err(|e| UmcError::Checkpoint(format!("bad mlp_hidden: {e}")))?
                    .unwrap_or_default();
                Actor::Mlp(MlpActorParams::init(MlpConfig { n_joints, hidden }, 0)?)
            }
            other => return Err(UmcError::Checkpoint(format!("unknown variant {other}"))),
        };
        let critic_cfg = ModelConfig {
            n_joints,
            d_model: self.meta_usize("critic_d_model")?,
            blocks: self.meta_usize("critic_blocks")?,
            heads: self.meta_usize("critic_heads")?,
            d_ff: self.meta_usize("critic_d_ff")?,
            mask_mode: MaskMode::Column,
        };
        let mut critic = CriticParams::init(critic_cfg, 0)?;

        for (name, value) in &self.arrays {
            let (store, key) = if let Some(k) = name.strip_prefix("actor/") {
                (actor.store_mut(), k)
            } else if let Some(k) = name.strip_prefix("critic/") {
                (&mut critic.store, k)
            } else {
                return Err(UmcError::Checkpoint(format!("unscoped array {name}")));
            };
            let id = store
                .try_id(key)
                .ok_or_else(|| UmcError::Checkpoint(format!("unexpected array {name}")))?;
            if !store.value(id).same_shape(value) {
                return Err(UmcError::Checkpoint(format!(
                    "shape mismatch for {name}: {}x{} vs {}x{}",
                    value.rows(),
                    value.cols(),
                    store.value(id).rows(),
                    store.value(id).cols()
                )));
            }
            *store.value_mut(id) = value.clone();
        }
        Ok((actor, critic))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    put_str(&mut buf, &ckpt.stage);
    buf.extend_from_slice(&ckpt.seed.to_le_bytes());
    put_str(&mut buf, &ckpt.variant);
    buf.extend_from_slice(&(ckpt.meta.len() as u32).to_le_bytes());
    for (k, v) in &ckpt.meta {
        put_str(&mut buf, k);
        put_str(&mut buf, v);
    }
    buf.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, m) in &ckpt.arrays {
        put_str(&mut buf, name);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        for x in m.as_slice() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(UmcError::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| UmcError::Checkpoint(format!("bad utf8: {e}")))
    }
}

fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(UmcError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(UmcError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_hash = r.u64()?;
    let stage = r.str()?;
    let seed = r.u64()?;
    let variant = r.str()?;
    let n_meta = r.u32()?;
    let mut meta = BTreeMap::new();
    for _ in 0..n_meta {
        let k = r.str()?;
        let v = r.str()?;
        meta.insert(k, v);
    }
    let n_arrays = r.u32()?;
    let mut arrays = Vec::with_capacity(n_arrays as usize);
    for _ in 0..n_arrays {
        let name = r.str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Matrix::from_vec(rows, cols, data)));
    }
    Ok(Checkpoint { config_hash, stage, seed, variant, meta, arrays })
}

/// Atomic write: temp file in the target directory, then rename.
pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt);
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| UmcError::io(dir.display().to_string(), e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| UmcError::io(tmp.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| UmcError::io(tmp.display().to_string(), e))?;
    f.sync_all().ok();
    drop(f);
    fs::rename(&tmp, path).map_err(|e| UmcError::io(path.display().to_string(), e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| UmcError::io(path.display().to_string(), e))?;
    decode(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_pair() -> (Actor, CriticParams) {
        let cfg = ModelConfig { n_joints: 3, d_model: 8, blocks: 1, heads: 2, d_ff: 8, mask_mode: MaskMode::Column };
        (Actor::Transformer(ActorParams::init(cfg, 5).unwrap()), CriticParams::init(cfg, 6).unwrap())
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let (actor, critic) = sample_pair();
        let ckpt = Checkpoint::capture(&actor, &critic, 0xDEAD_BEEF, "stage1", 42);
        let dir = std::env::temp_dir().join("umc_ckpt_test");
        let path = dir.join("a.umc");
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let (actor2, critic2) = loaded.restore().unwrap();
        for (a, b) in actor.store().entries().iter().zip(actor2.store().entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.as_slice(), b.value.as_slice());
        }
        for (a, b) in critic.store.entries().iter().zip(critic2.store.entries()) {
            assert_eq!(a.value.as_slice(), b.value.as_slice());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mlp_roundtrip() {
        let mlp = Actor::Mlp(
            MlpActorParams::init(MlpConfig { n_joints: 3, hidden: vec![8, 4] }, 7).unwrap(),
        );
        let cfg = ModelConfig { n_joints: 3, d_model: 8, blocks: 1, heads: 2, d_ff: 8, mask_mode: MaskMode::Column };
        let critic = CriticParams::init(cfg, 8).unwrap();
        let ckpt = Checkpoint::capture(&mlp, &critic, 1, "final", 9);
        let dir = std::env::temp_dir().join("umc_ckpt_test_mlp");
        let path = dir.join("m.umc");
        save(&path, &ckpt).unwrap();
        let (restored, _) = load(&path).unwrap().restore().unwrap();
        assert_eq!(restored.variant(), "mlp");
        assert_eq!(restored.store().param_count(), mlp.store().param_count());
        for (a, b) in mlp.store().entries().iter().zip(restored.store().entries()) {
            assert_eq!(a.value.as_slice(), b.value.as_slice());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_data_is_rejected() {
        let (actor, critic) = sample_pair();
        let ckpt = Checkpoint::capture(&actor, &critic, 2, "final", 1);
        let mut bytes = encode(&ckpt);
        bytes[0] ^= 0xFF;
        assert!(decode(&bytes).is_err());
        let ok = encode(&ckpt);
        assert!(decode(&ok[..ok.len() - 4]).is_err());
    }
}
