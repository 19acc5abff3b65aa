//! VOL3: a fixed 36-byte little-endian header followed by `z·y·x` f32
//! values with x fastest.
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `VOL3`                  |
//! | 4      | 2    | version (1)                   |
//! | 6      | 1    | dtype (0 = f32)               |
//! | 7      | 1    | reserved                      |
//! | 8      | 12   | dims z, y, x (u32)            |
//! | 20     | 12   | spacing z, y, x (f32, mm)     |
//! | 32     | 1    | unit (0 = HU, 1 = normalized) |
//! | 33     | 3    | reserved                      |

use std::path::Path;

use super::binary::{format_error, put_f32s, read_all, write_atomic, Reader};
use crate::error::Result;
use crate::preprocess::{Intensity, Volume};

pub const VOL3_MAGIC: [u8; 4] = *b"VOL3";
pub const VOL3_VERSION: u16 = 1;
pub const VOL3_HEADER_LEN: usize = 36;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(VOL3_HEADER_LEN + 4 * v.len());
    out.extend_from_slice(&VOL3_MAGIC);
    out.extend_from_slice(&VOL3_VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    for d in v.dims() {
        out.extend_from_slice(&u32::try_from(d).expect("extent fits u32").to_le_bytes());
    }
    for s in v.spacing() {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.push(match v.unit() {
        Intensity::Hu => 0,
        Intensity::Normalized => 1,
    });
    out.extend_from_slice(&[0; 3]);
    put_f32s(&mut out, v.data());
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(bytes);
    if r.array::<4>("magic")? != VOL3_MAGIC {
        return Err(format_error(0, "bad magic, expected VOL3"));
    }
    let version = r.u16("version")?;
    if version != VOL3_VERSION {
        return Err(format_error(4, format!("unsupported version {version}")));
    }
    let dtype = r.u8("dtype")?;
    if dtype != 0 {
        return Err(format_error(6, format!("unsupported dtype {dtype}")));
    }
    r.u8("reserved")?;
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        *d = r.u32("dims")? as usize;
        if *d == 0 {
            return Err(format_error(8 + 4 * a, "zero extent"));
        }
    }
    let mut spacing = [0f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = r.f32("spacing")?;
        if !(*s > 0.0 && s.is_finite()) {
            return Err(format_error(20 + 4 * a, format!("invalid spacing {s}")));
        }
    }
    let unit = match r.u8("unit")? {
        0 => Intensity::Hu,
        1 => Intensity::Normalized,
        u => return Err(format_error(32, format!("unknown unit tag {u}"))),
    };
    r.take(3, "reserved")?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_error(8, "extent product overflows"))?;
    let data = r.f32s(count, "payload")?;
    if r.remaining() != 0 {
        return Err(format_error(r.pos(), format!("{} trailing byte(s)", r.remaining())));
    }
    Volume::new(data, dims, spacing, unit)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_volume(v))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&read_all(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};

    fn random_volume() -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data = (0..120).map(|_| rng.random_range(-1500.0f32..800.0)).collect();
        Volume::new(data, [4, 5, 6], [1.25, 0.7, 0.7], Intensity::Hu).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let v = random_volume();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol3");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.unit(), v.unit());
        assert!(back
            .spacing()
            .iter()
            .zip(v.spacing())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(back
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 36 + 4 * 4 * 5 * 6);
    }

    #[test]
    fn corrupt_header_reports_offsets() {
        let good = encode_volume(&random_volume());
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset: 12, .. })));
        let bad = &good[..good.len() - 3];
        assert!(matches!(decode_volume(bad), Err(Error::Format { .. })));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode_volume(&bad), Err(Error::Format { offset, .. }) if offset == good.len() as u64));
        assert!(matches!(
            decode_volume(&good[..10]),
            Err(Error::Format { offset: 10, .. })
        ));
    }
}
