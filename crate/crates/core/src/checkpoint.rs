//! Versioned binary container for trained policies.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "ASAPCKPT" | u32 version | u64 total length
//! u32 header length | header JSON (policy config, train config, update counter)
//! u64 length | named parameter tensors
//! u64 length | named normalization buffers
//! u32 CRC-32 of all preceding bytes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::nn::{decode_named_tensors, encode_named_tensors, RunningStats, Tensor};
use crate::policy::{PolicyConfig, PolicyNet};
use crate::ppo::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ASAPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    policy: PolicyConfig,
    train: TrainConfig,
    update: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub policy: PolicyNet,
    pub train_config: TrainConfig,
    pub update: u64,
}

impl Checkpoint {
    /// Fails with an incompatibility error naming both values when the stored
    /// architecture differs from `runtime`.
    pub fn ensure_compatible(&self, runtime: &PolicyConfig) -> Result<()> {
        check_compatible(self.policy.config(), runtime)
    }
}

pub fn check_compatible(stored: &PolicyConfig, runtime: &PolicyConfig) -> Result<()> {
    let pairs = [
        ("embed_dim", stored.embed_dim, runtime.embed_dim),
        ("heads", stored.heads, runtime.heads),
        ("encoder_layers", stored.encoder_layers, runtime.encoder_layers),
        ("ff_dim", stored.ff_dim, runtime.ff_dim),
        ("critic_hidden", stored.critic_hidden, runtime.critic_hidden),
        ("context_extra", stored.context_extra, runtime.context_extra),
    ];
    for (name, s, r) in pairs {
        if s != r {
            return Err(Error::Incompatible(format!("checkpoint {name} = {s}, runtime {name} = {r}")));
        }
    }
    if stored.residual != runtime.residual {
        return Err(Error::Incompatible(format!(
            "checkpoint residual = {}, runtime residual = {}",
            stored.residual, runtime.residual
        )));
    }
    if stored.clip_c != runtime.clip_c {
        return Err(Error::Incompatible(format!(
            "checkpoint clip_c = {}, runtime clip_c = {}",
            stored.clip_c, runtime.clip_c
        )));
    }
    Ok(())
}

pub fn encode_checkpoint(policy: &PolicyNet, train: &TrainConfig, update: u64) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        policy: policy.config().clone(),
        train: train.clone(),
        update,
    })
    .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let params = encode_named_tensors(&policy.params().named_tensors());
    let mut bn = Vec::new();
    for (i, s) in policy.bn_running().iter().enumerate() {
        bn.push((format!("bn.{i}.mean"), Tensor::new(vec![s.mean.len()], s.mean.clone())?));
        bn.push((format!("bn.{i}.var"), Tensor::new(vec![s.var.len()], s.var.clone())?));
    }
    let bn = encode_named_tensors(&bn);

    let mut out = Vec::with_capacity(header.len() + params.len() + bn.len() + 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    out.extend_from_slice(&params);
    out.extend_from_slice(&(bn.len() as u64).to_le_bytes());
    out.extend_from_slice(&bn);
    let total = (out.len() + 4) as u64;
    out[12..20].copy_from_slice(&total.to_le_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len().saturating_sub(self.pos) < n {
            return Err(Error::Integrity(format!("checkpoint truncated in {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic bytes)".into()));
    }
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    let total = c.u64("length")?;
    if total != bytes.len() as u64 {
        return Err(Error::Integrity(format!(
            "checkpoint length {} but header records {total}",
            bytes.len()
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Integrity("checkpoint checksum mismatch".into()));
    }
    let hlen = c.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(c.take(hlen, "header")?)
        .map_err(|e| Error::Integrity(format!("checkpoint header: {e}")))?;
    let plen = c.u64("parameter length")? as usize;
    let params = decode_named_tensors(c.take(plen, "parameters")?)?;
    let blen = c.u64("buffer length")? as usize;
    let bn = decode_named_tensors(c.take(blen, "buffers")?)?;
    if c.pos != body.len() {
        return Err(Error::Integrity("unexpected bytes after checkpoint sections".into()));
    }

    header.policy.validate()?;
    let mut policy = PolicyNet::new(header.policy.clone(), 0)?;
    policy.params_mut().load_named(params)?;
    if bn.len() % 2 != 0 {
        return Err(Error::Integrity("normalization buffers are not mean/var pairs".into()));
    }
    let stats = bn
        .chunks(2)
        .map(|pair| RunningStats {
            mean: pair[0].1.data().to_vec(),
            var: pair[1].1.data().to_vec(),
            momentum: 0.1,
        })
        .collect();
    policy.set_bn_running(stats)?;
    Ok(Checkpoint {
        policy,
        train_config: header.train,
        update: header.update,
    })
}

pub fn save_checkpoint(policy: &PolicyNet, train: &TrainConfig, update: u64, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(policy, train, update)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> PolicyNet {
        let cfg = PolicyConfig {
            embed_dim: 16,
            heads: 4,
            encoder_layers: 1,
            ff_dim: 16,
            critic_hidden: 8,
            ..PolicyConfig::default()
        };
        PolicyNet::new(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let mut p = net();
        let mut stats = p.bn_running().to_vec();
        stats[0].mean[3] = 0.25;
        p.set_bn_running(stats).unwrap();
        let bytes = encode_checkpoint(&p, &TrainConfig::desk(), 42).unwrap();
        let c = decode_checkpoint(&bytes).unwrap();
        assert_eq!(c.update, 42);
        assert_eq!(c.train_config, TrainConfig::desk());
        assert_eq!(c.policy.params().named_tensors(), p.params().named_tensors());
        assert_eq!(c.policy.bn_running(), p.bn_running());
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = encode_checkpoint(&net(), &TrainConfig::desk(), 1).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Integrity(_))));
        for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode_checkpoint(&flipped), Err(Error::Integrity(_))));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(decode_checkpoint(&version), Err(Error::Incompatible(_))));
    }

    #[test]
    fn incompatible_config_names_both_values() {
        let c = decode_checkpoint(&encode_checkpoint(&net(), &TrainConfig::desk(), 1).unwrap()).unwrap();
        let err = c.ensure_compatible(&PolicyConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Incompatible(m) if m.contains("16") && m.contains("128")), "{err}");
    }
}
