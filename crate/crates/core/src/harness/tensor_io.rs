//! Binary tensor files: `"LTEN" | version u8 | ndim u8 | dims u32 LE | f32 LE data`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LTEN";
pub const VERSION: u8 = 1;

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let ndim = u8::try_from(t.ndim())
        .map_err(|_| Error::Format(format!("{} dimensions exceed the format limit", t.ndim())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(ndim);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 6 {
        return Err(Error::Truncated(format!("header needs 6 bytes, file has {}", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {}", bytes[4])));
    }
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::Format("zero-dimensional tensors are not supported".into()));
    }
    let dims_end = 6 + 4 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Truncated(format!(
            "{ndim} dimensions need {dims_end} header bytes, file has {}",
            bytes.len()
        )));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Format(format!("invalid shape {shape:?}")))?;
    let want = n
        .checked_mul(4)
        .and_then(|b| b.checked_add(dims_end))
        .ok_or_else(|| Error::Format("tensor too large".into()))?;
    if bytes.len() < want {
        return Err(Error::Truncated(format!(
            "expected {} data bytes, found {}",
            want - dims_end,
            bytes.len() - dims_end
        )));
    }
    if bytes.len() > want {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - want)));
    }
    let data = bytes[dims_end..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)?)?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn file_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.lten");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Tensor::randn(&[3, 5, 7], &mut rng).round_to_f32();
        save_tensor(&path, &t).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn layout() {
        let t = Tensor::new(vec![2], vec![1.0, 0.5]).unwrap();
        let b = encode_tensor(&t).unwrap();
        assert_eq!(&b[..10], &[b'L', b'T', b'E', b'N', 1, 1, 2, 0, 0, 0]);
        assert_eq!(&b[10..14], &1.0f32.to_le_bytes());
    }

    #[test]
    fn malformed_files() {
        let t = Tensor::zeros(&[2, 3]);
        let b = encode_tensor(&t).unwrap();
        let e = decode_tensor(&b[..b.len() - 1]).unwrap_err();
        assert!(e.to_string().contains("truncated payload"), "{e}");
        assert!(matches!(decode_tensor(&b[..7]), Err(Error::Truncated(_))));
        assert!(matches!(decode_tensor(&b[..3]), Err(Error::Truncated(_))));
        let zero_dim = [b'L', b'T', b'E', b'N', 1, 0];
        assert!(matches!(decode_tensor(&zero_dim), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));
        let mut long = b.clone();
        long.push(0);
        assert!(decode_tensor(&long).is_err());
        assert!(load_tensor("/nonexistent/file.lten").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_any_shape(dims in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, &mut rng).round_to_f32();
            let back = decode_tensor(&encode_tensor(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
