//! `.lst` tensor files and PGM/PPM previews.
//!
//! Layout, little-endian, no padding:
//!
//! ```text
//! b"LSET" | u16 version (=1) | u8 dtype (0=f32, 1=u8) | u8 ndim | ndim × u32 extent | payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor, TensorData, IGNORE};

pub const MAGIC: [u8; 4] = *b"LSET";
pub const VERSION: u16 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

pub fn encode(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match t.data() {
        TensorData::F32(_) => DTYPE_F32,
        TensorData::U8(_) => DTYPE_U8,
    });
    out.push(t.dims().len() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match t.data() {
        TensorData::F32(v) => {
            out.reserve(v.len() * 4);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::U8(v) => out.extend_from_slice(v),
    }
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode(t, &mut out);
    out
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at.checked_add(n).filter(|&e| e <= buf.len()).ok_or(Error::Truncated {
        expected: *at + n,
        found: buf.len(),
    })?;
    let s = &buf[*at..end];
    *at = end;
    Ok(s)
}

/// Decode one tensor from the front of `buf`, returning it and the number of
/// bytes consumed.
pub fn decode_prefix(buf: &[u8]) -> Result<(Tensor, usize)> {
    let mut at = 0;
    let magic: [u8; 4] = take(buf, &mut at, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes(take(buf, &mut at, 2)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = take(buf, &mut at, 1)?[0];
    let elem = match dtype {
        DTYPE_F32 => 4usize,
        DTYPE_U8 => 1,
        other => return Err(Error::UnknownDtype(other)),
    };
    let ndim = take(buf, &mut at, 1)?[0] as usize;
    let mut raw_dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        raw_dims.push(u32::from_le_bytes(take(buf, &mut at, 4)?.try_into().unwrap()) as u64);
    }
    let count = raw_dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(elem as u64))
        .filter(|&n| n <= isize::MAX as u64)
        .ok_or_else(|| Error::DimsOverflow(raw_dims.clone()))?;
    let bytes = take(buf, &mut at, count as usize)?;
    let dims: Vec<usize> = raw_dims.iter().map(|&d| d as usize).collect();
    let data = match dtype {
        DTYPE_F32 => TensorData::F32(
            bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        ),
        _ => TensorData::U8(bytes.to_vec()),
    };
    Ok((Tensor::new(dims, data)?, at))
}

/// Decode a buffer holding exactly one tensor.
pub fn from_bytes(buf: &[u8]) -> Result<Tensor> {
    let (t, used) = decode_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::Truncated {
            expected: used,
            found: buf.len(),
        });
    }
    Ok(t)
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// 8-bit binary PGM of a `[0,1]` map.
pub fn write_pgm(path: impl AsRef<Path>, height: usize, width: usize, values: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| to_byte(v)));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// PGM of a label map, class ids spread over `0..=255`; ignore pixels are white.
pub fn write_label_pgm(path: impl AsRef<Path>, labels: &LabelMap, classes: usize) -> Result<()> {
    let scale = 1.0 / (classes.max(2) - 1) as f32;
    let values: Vec<f32> = labels
        .data()
        .iter()
        .map(|&l| if l == IGNORE { 1.0 } else { l as f32 * scale })
        .collect();
    write_pgm(path, labels.height(), labels.width(), &values)
}

/// Binary PPM from a planar `3×H×W` image.
pub fn write_ppm(path: impl AsRef<Path>, height: usize, width: usize, planar: &[f32]) -> Result<()> {
    let path = path.as_ref();
    let hw = height * width;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut buf = format!("P6\n{width} {height}\n255\n").into_bytes();
    for px in 0..hw {
        for c in 0..3 {
            buf.push(to_byte(planar[c * hw + px]));
        }
    }
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_u8(vec![2, 3], vec![1, 2, 3, 4, 5, 6]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(
            b,
            [
                b'L', b'S', b'E', b'T', 1, 0, 1, 2, 2, 0, 0, 0, 3, 0, 0, 0, 1, 2, 3, 4, 5, 6
            ]
        );
        let f = Tensor::from_f32(vec![1], vec![1.0]).unwrap();
        assert_eq!(&to_bytes(&f)[6..], &[0, 1, 1, 0, 0, 0, 0, 0, 0x80, 0x3f]);
    }

    #[test]
    fn bad_magic() {
        let mut b = to_bytes(&Tensor::from_u8(vec![1], vec![7]).unwrap());
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(from_bytes(&b), Err(Error::BadMagic(m)) if &m == b"XXXX"));
    }

    #[test]
    fn payload_length_mismatch_is_truncation() {
        let b = to_bytes(&Tensor::from_u8(vec![4], vec![1, 2, 3, 4]).unwrap());
        assert!(matches!(
            from_bytes(&b[..b.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut longer = b.clone();
        longer.push(9);
        assert!(matches!(from_bytes(&longer), Err(Error::Truncated { .. })));
    }

    #[test]
    fn huge_dims_overflow() {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&1u16.to_le_bytes());
        b.push(0);
        b.push(4);
        for _ in 0..4 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(from_bytes(&b), Err(Error::DimsOverflow(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.lst");
        let t = Tensor::from_f32(vec![2, 2], vec![0.5, -0.0, f32::MIN_POSITIVE, 3.25]).unwrap();
        write_tensor(&p, &t).unwrap();
        let back = read_tensor(&p).unwrap();
        assert_eq!(
            back.as_f32().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            t.as_f32().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(std::fs::read(&p).unwrap(), to_bytes(&back));
    }

    #[test]
    fn pgm_rounds_half_up() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.pgm");
        write_pgm(&p, 1, 3, &[0.0, 0.5, 1.0]).unwrap();
        let b = std::fs::read(&p).unwrap();
        assert_eq!(&b[b.len() - 3..], &[0, 128, 255]);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop_oneof![
                prop::collection::vec(any::<u32>(), n).prop_map({
                    let dims = dims.clone();
                    move |bits| {
                        Tensor::from_f32(
                            dims.clone(),
                            bits.into_iter().map(f32::from_bits).collect(),
                        )
                        .unwrap()
                    }
                }),
                prop::collection::vec(any::<u8>(), n)
                    .prop_map(move |v| Tensor::from_u8(dims.clone(), v).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(t in arb_tensor()) {
            let bytes = to_bytes(&t);
            let back = from_bytes(&bytes).unwrap();
            prop_assert_eq!(to_bytes(&back), bytes);
            prop_assert_eq!(back.dims(), t.dims());
        }
    }
}
