//! Self-describing binary checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic            8 bytes  "REINRECK"
//! format version   u32
//! n, m, |A|        3 × u64
//! section count    u32
//! per section:     name (u32 length + UTF-8), tensor count u32
//!   per tensor:    name (u32 length + UTF-8), rows u64, cols u64,
//!                  rows·cols × f64 (row-major)
//! ```
//!
//! The `policy` section holds the π tensors in [`TensorId::ALL`] order; the
//! optional `behavior` section holds `V'`. Floats are stored as raw bits, so
//! a save/load round trip is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::behavior::BehaviorHead;
use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::policy::{ModelDims, PolicyParameters, TensorId};

pub const MAGIC: &[u8; 8] = b"REINRECK";
pub const FORMAT_VERSION: u32 = 1;

const POLICY_SECTION: &str = "policy";
const BEHAVIOR_SECTION: &str = "behavior";
const BEHAVIOR_TENSOR: &str = "V_behavior";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyParameters,
    pub behavior: Option<BehaviorHead>,
}

impl Checkpoint {
    pub fn new(policy: PolicyParameters, behavior: Option<BehaviorHead>) -> Self {
        Checkpoint { policy, behavior }
    }

    pub fn dims(&self) -> ModelDims {
        self.policy.dims()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for d in [dims.state_dim, dims.embed_dim, dims.num_actions] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let sections = 1 + u32::from(self.behavior.is_some());
        out.extend_from_slice(&sections.to_le_bytes());

        write_str(&mut out, POLICY_SECTION);
        out.extend_from_slice(&(TensorId::ALL.len() as u32).to_le_bytes());
        for (id, t) in self.policy.tensors() {
            write_tensor(&mut out, id.name(), t);
        }
        if let Some(head) = &self.behavior {
            write_str(&mut out, BEHAVIOR_SECTION);
            out.extend_from_slice(&1u32.to_le_bytes());
            write_tensor(&mut out, BEHAVIOR_TENSOR, &head.v);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("bad magic; not a checkpoint".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let dims = ModelDims::new(r.u64()? as usize, r.u64()? as usize, r.u64()? as usize)
            .map_err(|e| Error::Format(e.to_string()))?;
        let sections = r.u32()?;
        let mut policy = None;
        let mut behavior = None;
        for _ in 0..sections {
            let name = r.string()?;
            let count = r.u32()? as usize;
            match name.as_str() {
                POLICY_SECTION => {
                    if count != TensorId::ALL.len() {
                        return Err(Error::Format(format!(
                            "policy section has {count} tensors, expected {}",
                            TensorId::ALL.len()
                        )));
                    }
                    let mut tensors = Vec::with_capacity(count);
                    for id in TensorId::ALL {
                        let (tname, mat) = r.tensor()?;
                        if tname != id.name() {
                            return Err(Error::Format(format!(
                                "expected tensor {id}, found {tname}"
                            )));
                        }
                        tensors.push(mat);
                    }
                    policy = Some(
                        PolicyParameters::from_tensors(dims, tensors)
                            .map_err(|e| Error::Format(e.to_string()))?,
                    );
                }
                BEHAVIOR_SECTION => {
                    if count != 1 {
                        return Err(Error::Format(format!(
                            "behavior section has {count} tensors, expected 1"
                        )));
                    }
                    let (tname, mat) = r.tensor()?;
                    if tname != BEHAVIOR_TENSOR {
                        return Err(Error::Format(format!(
                            "expected tensor {BEHAVIOR_TENSOR}, found {tname}"
                        )));
                    }
                    behavior = Some(
                        BehaviorHead::from_mat(mat, dims).map_err(|e| Error::Format(e.to_string()))?,
                    );
                }
                other => return Err(Error::Format(format!("unknown section `{other}`"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        let policy = policy.ok_or_else(|| Error::Format("missing policy section".into()))?;
        Ok(Checkpoint { policy, behavior })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Mat) {
    write_str(out, name);
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for x in t.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("tensor or section name is not UTF-8".into()))
    }

    fn tensor(&mut self) -> Result<(String, Mat)> {
        let name = self.string()?;
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = self.take(len.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok((name, Mat::from_vec(rows, cols, data)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::behavior_probs;
    use crate::numerics::RngStream;
    use crate::policy::UserState;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, a in 1usize..12, with_head in any::<bool>()) {
            let dims = ModelDims::new(n, m, a).unwrap();
            let mut rng = RngStream::new(seed, 0);
            let policy = PolicyParameters::random(dims, 3.0, &mut rng);
            let behavior = with_head.then(|| BehaviorHead::init(dims, &mut rng));
            let ck = Checkpoint::new(policy, behavior);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn behavior_outputs_survive_round_trip() {
        let dims = ModelDims::new(3, 2, 5).unwrap();
        let mut rng = RngStream::new(9, 0);
        let ck = Checkpoint::new(
            PolicyParameters::random(dims, 1.0, &mut rng),
            Some(BehaviorHead::init(dims, &mut rng)),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let s = UserState { s: vec![0.3, -0.7, 1.1], step: 2 };
        let a = behavior_probs(&s, ck.behavior.as_ref().unwrap()).unwrap();
        let b = behavior_probs(&s, back.behavior.as_ref().unwrap()).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let dims = ModelDims::new(2, 2, 3).unwrap();
        let ck = Checkpoint::new(PolicyParameters::zeros(dims), None);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
