//! The big-endian IDX container used by the MNIST distribution.

use std::path::Path;

use crate::error::{Error, IdxError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Payload of an unsigned-byte IDX file.
#[derive(Debug, Clone, PartialEq)]
pub enum IdxData {
    /// `count` images of `rows x cols`, pixels scaled to `[0, 1]`.
    Images {
        count: usize,
        rows: usize,
        cols: usize,
        pixels: Vec<f64>,
    },
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX images (`0x00000803`) or labels (`0x00000801`) file.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, IdxError> {
    if bytes.len() < 4 {
        return Err(IdxError::ShortHeader { len: bytes.len() });
    }
    let magic = be_u32(bytes, 0);
    let (ty, ndim) = (bytes[2], bytes[3]);
    if bytes[0] != 0 || bytes[1] != 0 || !(ndim == 1 || ndim == 3) {
        let expected = if ndim == 1 {
            LABELS_MAGIC
        } else {
            IMAGES_MAGIC
        };
        return Err(IdxError::BadMagic {
            found: magic,
            expected,
        });
    }
    if ty != 0x08 {
        return Err(IdxError::UnsupportedType(ty));
    }
    let header = 4 + 4 * ndim as usize;
    if bytes.len() < header {
        return Err(IdxError::ShortHeader { len: bytes.len() });
    }
    let dims: Vec<u32> = (0..ndim as usize)
        .map(|i| be_u32(bytes, 4 + 4 * i))
        .collect();
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n <= isize::MAX as usize - header)
        .ok_or_else(|| IdxError::DimOverflow(dims.clone()))?;
    let found = bytes.len() - header;
    if found < payload {
        return Err(IdxError::Truncated {
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(IdxError::TrailingBytes {
            extra: found - payload,
        });
    }
    let body = &bytes[header..];
    Ok(if ndim == 1 {
        IdxData::Labels(body.to_vec())
    } else {
        IdxData::Images {
            count: dims[0] as usize,
            rows: dims[1] as usize,
            cols: dims[2] as usize,
            pixels: body.iter().map(|&b| b as f64 / 255.0).collect(),
        }
    })
}

pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>), IdxError> {
    match parse_idx(bytes)? {
        IdxData::Images {
            count,
            rows,
            cols,
            pixels,
        } => Ok((count, rows, cols, pixels)),
        IdxData::Labels(_) => Err(IdxError::DimCount {
            found: 1,
            expected: 3,
        }),
    }
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    match parse_idx(bytes)? {
        IdxData::Labels(l) => Ok(l),
        IdxData::Images { .. } => Err(IdxError::DimCount {
            found: 3,
            expected: 1,
        }),
    }
}

/// Reads only the header dimensions of an IDX file on disk.
pub fn read_header(path: &Path) -> Result<Vec<u32>> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 16];
    let n = f.read(&mut head).map_err(|e| Error::io(path, e))?;
    if n < 4 {
        return Err(IdxError::ShortHeader { len: n }.into());
    }
    let ndim = head[3] as usize;
    if n < 4 + 4 * ndim || ndim > 3 {
        return Err(IdxError::ShortHeader { len: n }.into());
    }
    Ok((0..ndim).map(|i| be_u32(&head, 4 + 4 * i)).collect())
}

/// Builds an unsigned-byte IDX blob; used for fixtures and round trips.
pub fn encode_idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, 0x08, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> Vec<u8> {
        encode_idx(&[2, 2, 2], &[0, 51, 102, 255, 255, 0, 17, 34])
    }

    #[test]
    fn hand_built_images() {
        let (n, r, c, px) = parse_images(&two_by_two()).unwrap();
        assert_eq!((n, r, c), (2, 2, 2));
        assert_eq!(
            px,
            vec![0.0, 0.2, 0.4, 1.0, 1.0, 0.0, 17.0 / 255.0, 34.0 / 255.0]
        );
    }

    #[test]
    fn truncated_by_one_byte() {
        let b = two_by_two();
        assert_eq!(
            parse_idx(&b[..b.len() - 1]),
            Err(IdxError::Truncated {
                expected: 8,
                found: 7
            })
        );
    }

    #[test]
    fn labels_magic() {
        let b = encode_idx(&[3], &[7, 1, 9]);
        assert_eq!(be_u32(&b, 0), LABELS_MAGIC);
        assert_eq!(parse_labels(&b).unwrap(), vec![7, 1, 9]);
        assert!(parse_images(&b).is_err());
    }

    #[test]
    fn distinct_diagnostics() {
        let mut bad_magic = two_by_two();
        bad_magic[0] = 1;
        let mut bad_type = two_by_two();
        bad_type[2] = 0x0D;
        let overflow = encode_idx(&[u32::MAX, u32::MAX, u32::MAX], &[]);
        let errs = [
            parse_idx(&bad_magic).unwrap_err(),
            parse_idx(&bad_type).unwrap_err(),
            parse_idx(&overflow).unwrap_err(),
            parse_idx(&[0, 0]).unwrap_err(),
        ];
        assert!(matches!(errs[0], IdxError::BadMagic { .. }));
        assert!(matches!(errs[1], IdxError::UnsupportedType(0x0D)));
        assert!(matches!(errs[2], IdxError::DimOverflow(_)));
        assert!(matches!(errs[3], IdxError::ShortHeader { .. }));
    }
}
