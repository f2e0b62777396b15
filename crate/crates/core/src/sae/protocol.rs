//! Binary framing for talking to an out-of-process prior.
//!
//! A frame is `"LPRO" | version u8 | opcode u8 | payload length u32 LE | payload`.
//! Tensors inside payloads are `ndim u8 | dims u32 LE... | f32 LE data`.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LPRO";
pub const VERSION: u8 = 1;
/// Refuse to allocate for absurd payload lengths.
pub const MAX_PAYLOAD: u32 = 1 << 30;

pub const GRAD_OK: u8 = 0;
pub const GRAD_UNSUPPORTED: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Hello = 0x01,
    Encode = 0x02,
    Decode = 0x03,
    Consistency = 0x04,
    GradLogcond = 0x05,
    Error = 0x7F,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0x01 => Opcode::Hello,
            0x02 => Opcode::Encode,
            0x03 => Opcode::Decode,
            0x04 => Opcode::Consistency,
            0x05 => Opcode::GradLogcond,
            0x7F => Opcode::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub opcode: u8,
    pub payload: Vec<u8>,
}

pub fn write_frame<W: Write + ?Sized>(w: &mut W, opcode: u8, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_PAYLOAD)
        .ok_or_else(|| Error::Protocol(format!("payload of {} bytes is too large", payload.len())))?;
    let mut header = [0u8; 10];
    header[..4].copy_from_slice(&MAGIC);
    header[4] = VERSION;
    header[5] = opcode;
    header[6..].copy_from_slice(&len.to_le_bytes());
    w.write_all(&header)?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

/// Fill `buf` completely. Returns `Ok(false)` on EOF before the first byte.
fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8], what: &str) -> Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => {
                return Err(Error::Truncated(format!(
                    "{what}: got {got} of {} bytes",
                    buf.len()
                )))
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Read one frame. `Ok(None)` means the peer closed the stream between frames.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<Frame>> {
    let mut header = [0u8; 10];
    if !read_full(r, &mut header, "frame header")? {
        return Ok(None);
    }
    if header[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::Protocol(format!(
            "unsupported protocol version {}",
            header[4]
        )));
    }
    let opcode = header[5];
    let len = u32::from_le_bytes(header[6..].try_into().expect("4 bytes"));
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("payload length {len} exceeds limit")));
    }
    let mut payload = vec![0u8; len as usize];
    if !payload.is_empty() && !read_full(r, &mut payload, "frame payload")? {
        return Err(Error::Truncated(format!("frame payload: got 0 of {len} bytes")));
    }
    Ok(Some(Frame { opcode, payload }))
}

/// Builder for frame payloads.
#[derive(Default, Debug)]
pub struct PayloadWriter {
    buf: Vec<u8>,
}

impl PayloadWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// Values are narrowed to `f32`.
    pub fn tensor(&mut self, t: &Tensor) -> Result<&mut Self> {
        let ndim = u8::try_from(t.ndim())
            .map_err(|_| Error::Protocol(format!("{} dimensions do not fit the wire format", t.ndim())))?;
        self.u8(ndim);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Protocol(format!("extent {d} does not fit in u32")))?;
            self.u32(d);
        }
        self.buf.reserve(4 * t.len());
        for &v in t.data() {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(self)
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

/// Cursor over a frame payload.
#[derive(Debug)]
pub struct PayloadReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().expect("4 bytes")))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u8()? as usize;
        if ndim == 0 {
            return Err(Error::Protocol("zero-dimensional tensor".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Protocol(format!("invalid tensor shape {shape:?}")))?;
        let bytes = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Protocol("tensor too large".into()))?,
            "tensor data",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Protocol(e.to_string()))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    /// Reject trailing bytes.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Protocol(format!(
                "{} trailing payload bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Server capabilities announced in reply to HELLO.
///
/// Payload: latent shape (`ndim u8`, dims `u32`), cond dim `u32`, timestep
/// count `u32`, then each timestep as `u32`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloInfo {
    pub latent_shape: Vec<usize>,
    pub cond_dim: usize,
    pub timesteps: Vec<u32>,
}

impl HelloInfo {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = PayloadWriter::new();
        let ndim = u8::try_from(self.latent_shape.len())
            .map_err(|_| Error::Protocol("latent rank too large".into()))?;
        w.u8(ndim);
        for &d in &self.latent_shape {
            w.u32(u32::try_from(d).map_err(|_| Error::Protocol("latent extent too large".into()))?);
        }
        w.u32(u32::try_from(self.cond_dim).map_err(|_| Error::Protocol("cond dim too large".into()))?);
        w.u32(self.timesteps.len() as u32);
        for &t in &self.timesteps {
            w.u32(t);
        }
        Ok(w.finish())
    }

    pub fn decode(payload: &[u8]) -> Result<Self> {
        let mut r = PayloadReader::new(payload);
        let ndim = r.u8()? as usize;
        let latent_shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let cond_dim = r.u32()? as usize;
        let n = r.u32()? as usize;
        let timesteps = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self {
            latent_shape,
            cond_dim,
            timesteps,
        })
    }
}

pub fn consistency_payload(z_t: &Tensor, t: u32, c: &Tensor) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    w.tensor(z_t)?.u32(t).tensor(c)?;
    Ok(w.finish())
}

pub fn grad_logcond_payload(
    z_next: &Tensor,
    z_prev: &Tensor,
    t_prev: u32,
    t_next: u32,
    c: &Tensor,
) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    w.tensor(z_next)?
        .tensor(z_prev)?
        .u32(t_prev)
        .u32(t_next)
        .tensor(c)?;
    Ok(w.finish())
}

pub fn tensor_payload(t: &Tensor) -> Result<Vec<u8>> {
    let mut w = PayloadWriter::new();
    w.tensor(t)?;
    Ok(w.finish())
}

pub fn single_tensor(payload: &[u8]) -> Result<Tensor> {
    let mut r = PayloadReader::new(payload);
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    #[test]
    fn frame_layout() {
        let mut buf = Vec::new();
        write_frame(&mut buf, Opcode::Decode as u8, &[9, 8, 7]).unwrap();
        assert_eq!(buf, [b'L', b'P', b'R', b'O', 1, 3, 3, 0, 0, 0, 9, 8, 7]);
        let f = read_frame(&mut Cursor::new(buf)).unwrap().unwrap();
        assert_eq!(f.opcode, 3);
        assert_eq!(f.payload, vec![9, 8, 7]);
    }

    #[test]
    fn tensor_layout() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let p = tensor_payload(&t).unwrap();
        let mut want = vec![2u8, 1, 0, 0, 0, 2, 0, 0, 0];
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(p, want);
    }

    #[test]
    fn malformed_frames() {
        assert!(read_frame(&mut Cursor::new(Vec::<u8>::new())).unwrap().is_none());
        let e = read_frame(&mut Cursor::new(b"LPR".to_vec())).unwrap_err();
        assert!(matches!(e, Error::Truncated(_)));
        let e = read_frame(&mut Cursor::new(b"XPRO\x01\x01\0\0\0\0".to_vec())).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
        let e = read_frame(&mut Cursor::new(b"LPRO\x02\x01\0\0\0\0".to_vec())).unwrap_err();
        assert!(matches!(e, Error::Protocol(_)));
        let e = read_frame(&mut Cursor::new(b"LPRO\x01\x01\x05\0\0\0ab".to_vec())).unwrap_err();
        assert!(matches!(e, Error::Truncated(_)));
        assert!(single_tensor(&[0]).is_err());
        assert!(single_tensor(&[1, 2, 0, 0, 0, 0, 0]).is_err());
        let mut p = tensor_payload(&Tensor::zeros(&[2])).unwrap();
        p.push(0);
        assert!(single_tensor(&p).is_err());
    }

    #[test]
    fn hello_round_trip() {
        let info = HelloInfo {
            latent_shape: vec![4, 8, 8],
            cond_dim: 77,
            timesteps: vec![999, 749, 499, 249],
        };
        assert_eq!(HelloInfo::decode(&info.encode().unwrap()).unwrap(), info);
    }

    proptest! {
        #[test]
        fn f32_tensors_round_trip_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) % 0x7f00_0000) as f64)
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = single_tensor(&tensor_payload(&t).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
