//! On-disk density grids.
//!
//! Binary layout (all integers little-endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `TCDM`                            |
//! | 4      | 4    | width (u32)                             |
//! | 8      | 4    | height (u32)                            |
//! | 12     | 4    | value encoding (u32, 1 = f64 LE)        |
//! | 16     | 8·w·h| cell values, row-major                  |
//!
//! The CSV form is one line per grid row, comma-separated, no header.

use std::io::{BufRead, Read, Write};

use super::{DensityError, DensityMap};

pub const GRID_MAGIC: [u8; 4] = *b"TCDM";
pub const GRID_HEADER_LEN: usize = 16;
const ENCODING_F64_LE: u32 = 1;

pub fn write_grid<W: Write>(map: &DensityMap, mut w: W) -> std::io::Result<()> {
    let mut buf = Vec::with_capacity(GRID_HEADER_LEN + 8 * map.values().len());
    buf.extend_from_slice(&GRID_MAGIC);
    buf.extend_from_slice(&map.width().to_le_bytes());
    buf.extend_from_slice(&map.height().to_le_bytes());
    buf.extend_from_slice(&ENCODING_F64_LE.to_le_bytes());
    for v in map.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, DensityError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads exactly one grid from the stream.
pub fn read_grid<R: Read>(mut r: R) -> Result<DensityMap, DensityError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != GRID_MAGIC {
        return Err(DensityError::Format(format!("bad magic {magic:?}")));
    }
    let width = read_u32(&mut r)?;
    let height = read_u32(&mut r)?;
    let encoding = read_u32(&mut r)?;
    if encoding != ENCODING_F64_LE {
        return Err(DensityError::Format(format!("unknown value encoding {encoding}")));
    }
    let n = width as usize * height as usize;
    let mut raw = vec![0u8; n * 8];
    r.read_exact(&mut raw)?;
    let values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    DensityMap::from_values(width, height, values)
}

pub fn write_csv<W: Write>(map: &DensityMap, mut w: W) -> std::io::Result<()> {
    for row in map.values().chunks(map.width().max(1) as usize) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn read_csv<R: BufRead>(r: R) -> Result<DensityMap, DensityError> {
    let mut values = Vec::new();
    let mut width = None;
    let mut height = 0u32;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DensityError::Format(format!("line {}: {e}", lineno + 1)))?;
        match width {
            None => width = Some(row.len() as u32),
            Some(w) if w as usize != row.len() => {
                return Err(DensityError::Format(format!(
                    "line {}: expected {w} columns, got {}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        height += 1;
    }
    DensityMap::from_values(width.unwrap_or(0), height, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = DensityMap::from_values(2, 1, vec![0.5, 1.5]).unwrap();
        let mut buf = Vec::new();
        write_grid(&m, &mut buf).unwrap();
        assert_eq!(buf.len(), GRID_HEADER_LEN + 16);
        assert_eq!(&buf[..4], b"TCDM");
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..24], &0.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_grid(&b"XXXX\0\0\0\0\0\0\0\0\x01\0\0\0"[..]).is_err());
        let m = DensityMap::from_values(2, 2, vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        write_grid(&m, &mut buf).unwrap();
        assert!(read_grid(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn csv_rejects_ragged_rows() {
        assert!(read_csv(&b"1,2\n3\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn binary_and_csv_round_trip(w in 1u32..6, h in 1u32..6, seed in any::<u64>()) {
            let n = (w * h) as usize;
            let vals: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1) % 10007) as f64) / 97.0).collect();
            let m = DensityMap::from_values(w, h, vals).unwrap();
            let mut bin = Vec::new();
            write_grid(&m, &mut bin).unwrap();
            prop_assert_eq!(read_grid(&bin[..]).unwrap(), m.clone());
            let mut csv = Vec::new();
            write_csv(&m, &mut csv).unwrap();
            prop_assert_eq!(read_csv(&csv[..]).unwrap(), m);
        }
    }
}
