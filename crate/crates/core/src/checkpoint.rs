//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SLMCKPT\0"  u32 version
//! u32 len, config echo (UTF-8)
//! u64 step
//! u32 count, then per tensor: u32 len, name, u8 decay, u32 ndims, u64 dims.., f32 data..
//! u8 has_optimizer [u64 t, then m and v for every tensor in order]
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SlmError};
use crate::model::ParamStore;
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SLMCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_echo: String,
    pub step: u64,
    pub params: ParamStore,
    pub optimizer: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    out.reserve(xs.len() * 4);
    for x in xs {
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
            .ok_or_else(|| SlmError::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| SlmError::format("length overflows usize"))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SlmError::format("invalid UTF-8 in checkpoint"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| SlmError::format("tensor too large"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.config_echo.len() as u32);
        out.extend_from_slice(self.config_echo.as_bytes());
        put_u64(&mut out, self.step);
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.decay));
            put_u32(&mut out, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f32s(&mut out, p.value.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                put_u64(&mut out, st.t);
                for m in &st.m {
                    put_f32s(&mut out, m);
                }
                for v in &st.v {
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8).ok() != Some(MAGIC.as_slice()) {
            return Err(SlmError::format("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(SlmError::format(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let config_echo = r.string()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ParamStore::default();
        for _ in 0..count {
            let name = r.string()?;
            let decay = r.u8()? != 0;
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let n = n.ok_or_else(|| SlmError::format(format!("tensor {name} too large")))?;
            let data = r.f32s(n)?;
            let t = Tensor::new(&dims, data).map_err(|e| SlmError::format(format!("tensor {name}: {e}")))?;
            if params.get(&name).is_some() {
                return Err(SlmError::format(format!("duplicate tensor {name}")));
            }
            params.push(name, t, decay);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let sizes: Vec<usize> = params.iter().map(|p| p.value.numel()).collect();
                let m = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                let v = sizes.iter().map(|&n| r.f32s(n)).collect::<Result<Vec<_>>>()?;
                Some(AdamState { t, m, v })
            }
            f => return Err(SlmError::format(format!("bad optimizer flag {f}"))),
        };
        if r.pos != buf.len() {
            return Err(SlmError::format("trailing bytes after checkpoint"));
        }
        Ok(Checkpoint {
            config_echo,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| SlmError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| SlmError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
