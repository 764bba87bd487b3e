use std::collections::HashMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named trainable tensors with their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
    grads_fresh: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            grad: vec![0.0; value.len()],
            value,
        });
        Ok(ParamId(id))
    }

    /// Adds a parameter initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.uniform_range(-bound, bound));
        self.add(name, t)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.entries[id.0].grad.iter_mut().zip(g) {
            *a += b;
        }
        self.grads_fresh = true;
    }

    /// True once a backward pass has written gradients since the last reset.
    pub fn has_grads(&self) -> bool {
        self.grads_fresh
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.grads_fresh = false;
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / (norm + 1e-6);
            for e in &mut self.entries {
                e.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &[f64])> {
        self.entries.iter_mut().map(|e| (&mut e.value, e.grad.as_slice()))
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrites values from `tensors`; every stored name must be present with
    /// a matching shape and no extras are allowed.
    pub fn load_named(&mut self, tensors: Vec<(String, Tensor)>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Incompatible(format!(
                "expected {} parameter tensors, found {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Incompatible(format!("unknown parameter {name:?}")))?;
            let cur = &mut self.entries[id.0].value;
            if cur.shape() != t.shape() {
                return Err(Error::Incompatible(format!(
                    "parameter {name:?}: runtime shape {:?}, stored shape {:?}",
                    cur.shape(),
                    t.shape()
                )));
            }
            *cur = t;
        }
        Ok(())
    }
}

/// Encodes named tensors as: `u32 count`, then per tensor `u32 name_len`,
/// UTF-8 name, `u32 ndim`, `u64` dims, and `f64` values, all little-endian.
pub fn encode_named_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!(
                "tensor payload truncated at byte {} (needed {n} more)",
                self.pos
            )));
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
}

pub fn decode_named_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf, pos: 0 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(Error::Integrity(format!("tensor {name:?} has {ndim} dimensions")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(n.checked_mul(8).ok_or_else(|| Error::Integrity("tensor too large".into()))?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_parts(shape, data)));
    }
    if r.pos != buf.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after tensor payload",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn tensor_codec_round_trip_and_truncation() {
        let t = vec![
            ("a.w".to_string(), Tensor::new(vec![2, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap()),
            ("b".to_string(), Tensor::scalar(7.0)),
        ];
        let bytes = encode_named_tensors(&t);
        assert_eq!(decode_named_tensors(&bytes).unwrap(), t);
        for cut in [1, 9, bytes.len() - 1] {
            assert!(matches!(decode_named_tensors(&bytes[..cut]), Err(Error::Integrity(_))));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_named_tensors(&extra), Err(Error::Integrity(_))));
    }

    #[test]
    fn clip_grad_norm_scales_to_bound() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2])).unwrap();
        s.accumulate_grad(id, &[3.0, 4.0]);
        let before = s.clip_grad_norm(0.5);
        assert!((before - 5.0).abs() < 1e-12);
        assert!((s.grad_norm() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn load_named_checks_shapes() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2, 2])).unwrap();
        let err = s.load_named(vec![("w".into(), Tensor::zeros(&[4]))]).unwrap_err();
        assert!(matches!(err, Error::Incompatible(m) if m.contains("[2, 2]") && m.contains("[4]")));
    }
}
