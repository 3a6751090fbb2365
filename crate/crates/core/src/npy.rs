//! NPY v1.0 reader and writer for rank-3 volumes.
//!
//! Real volumes are written as little-endian `f64` (`<f8`). Label volumes are
//! written as `|u1` when every label fits in a byte and `<u4` otherwise. The
//! stored shape is `(nz, ny, nx)` in C order, matching [`Dims`]'s x-fastest
//! linear layout. Readers accept any little-endian or byte-sized numeric
//! dtype; floats are widened to `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Volume};

const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F4,
    F8,
    B1,
    U1,
    U2,
    U4,
    U8,
    I1,
    I2,
    I4,
    I8,
}

impl Dtype {
    fn parse(descr: &str) -> Result<Self> {
        let dt = match descr {
            "<f4" => Dtype::F4,
            "<f8" => Dtype::F8,
            "|b1" => Dtype::B1,
            "|u1" => Dtype::U1,
            "<u2" => Dtype::U2,
            "<u4" => Dtype::U4,
            "<u8" => Dtype::U8,
            "|i1" => Dtype::I1,
            "<i2" => Dtype::I2,
            "<i4" => Dtype::I4,
            "<i8" => Dtype::I8,
            other => return Err(Error::Format(format!("unsupported dtype '{other}'"))),
        };
        Ok(dt)
    }

    fn size(self) -> usize {
        match self {
            Dtype::B1 | Dtype::U1 | Dtype::I1 => 1,
            Dtype::U2 | Dtype::I2 => 2,
            Dtype::F4 | Dtype::U4 | Dtype::I4 => 4,
            Dtype::F8 | Dtype::U8 | Dtype::I8 => 8,
        }
    }

    fn is_float(self) -> bool {
        matches!(self, Dtype::F4 | Dtype::F8)
    }
}

struct RawArray {
    dtype: Dtype,
    shape: Vec<usize>,
    payload: Vec<u8>,
}

fn header_value<'a>(header: &'a str, key: &str) -> Result<&'a str> {
    let quoted = format!("'{key}'");
    let start = header
        .find(&quoted)
        .ok_or_else(|| Error::Format(format!("header is missing key {quoted}")))?;
    let rest = header[start + quoted.len()..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| Error::Format(format!("malformed entry for {quoted}")))?
        .trim_start();
    Ok(rest)
}

fn parse_header(header: &str) -> Result<(Dtype, bool, Vec<usize>)> {
    let header = header.trim();
    if !header.starts_with('{') || !header.ends_with('}') {
        return Err(Error::Format("header is not a dict literal".into()));
    }

    let descr = header_value(header, "descr")?;
    let descr = descr
        .strip_prefix('\'')
        .and_then(|s| s.split('\'').next())
        .ok_or_else(|| Error::Format("malformed descr".into()))?;
    let dtype = Dtype::parse(descr)?;

    let fortran = header_value(header, "fortran_order")?;
    let fortran = if fortran.starts_with("False") {
        false
    } else if fortran.starts_with("True") {
        true
    } else {
        return Err(Error::Format("malformed fortran_order".into()));
    };

    let shape = header_value(header, "shape")?;
    let inner = shape
        .strip_prefix('(')
        .and_then(|s| s.split(')').next())
        .ok_or_else(|| Error::Format("malformed shape".into()))?;
    let shape = inner
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape entry '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dtype, fortran, shape))
}

fn read_raw(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(Error::Format(format!("{}: bad NPY magic", path.display())));
    }
    let (major, minor) = (bytes[6], bytes[7]);
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Format("truncated NPY preamble".into()));
            }
            let n = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
            (n as usize, 12)
        }
        _ => {
            return Err(Error::Format(format!(
                "unsupported NPY version {major}.{minor}"
            )))
        }
    };
    let header_end = header_start + header_len;
    if bytes.len() < header_end {
        return Err(Error::Format("truncated NPY header".into()));
    }
    let header = std::str::from_utf8(&bytes[header_start..header_end])
        .map_err(|_| Error::Format("NPY header is not ASCII".into()))?;
    let (dtype, fortran, shape) = parse_header(header)?;
    if fortran {
        return Err(Error::Format(
            "Fortran-ordered arrays are not supported".into(),
        ));
    }
    let count: usize = shape.iter().product();
    let payload = &bytes[header_end..];
    if payload.len() != count * dtype.size() {
        return Err(Error::Format(format!(
            "{}: payload holds {} bytes, shape {:?} needs {}",
            path.display(),
            payload.len(),
            shape,
            count * dtype.size()
        )));
    }
    Ok(RawArray {
        dtype,
        shape,
        payload: payload.to_vec(),
    })
}

fn dims_of(raw: &RawArray) -> Result<Dims> {
    match raw.shape.as_slice() {
        &[nz, ny, nx] => Dims::new(nx, ny, nz),
        other => Err(Error::Shape(format!(
            "expected a rank-3 array, got shape {other:?}"
        ))),
    }
}

fn decode_f64(raw: &RawArray) -> Vec<f64> {
    let p = &raw.payload;
    let n = raw.dtype.size();
    p.chunks_exact(n)
        .map(|c| match raw.dtype {
            Dtype::F4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::F8 => f64::from_le_bytes(c.try_into().unwrap()),
            Dtype::B1 | Dtype::U1 => c[0] as f64,
            Dtype::I1 => c[0] as i8 as f64,
            Dtype::U2 => u16::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::I2 => i16::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::U4 => u32::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::I4 => i32::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::U8 => u64::from_le_bytes(c.try_into().unwrap()) as f64,
            Dtype::I8 => i64::from_le_bytes(c.try_into().unwrap()) as f64,
        })
        .collect()
}

fn decode_labels(raw: &RawArray) -> Result<Vec<u32>> {
    let n = raw.dtype.size();
    raw.payload
        .chunks_exact(n)
        .map(|c| {
            let v: i128 = match raw.dtype {
                Dtype::B1 | Dtype::U1 => c[0] as i128,
                Dtype::I1 => c[0] as i8 as i128,
                Dtype::U2 => u16::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::I2 => i16::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::U4 => u32::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::I4 => i32::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::U8 => u64::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::I8 => i64::from_le_bytes(c.try_into().unwrap()) as i128,
                Dtype::F4 | Dtype::F8 => unreachable!("float dtypes are rejected before decoding"),
            };
            u32::try_from(v).map_err(|_| Error::Data(format!("label {v} is not a valid u32 label")))
        })
        .collect()
}

/// Load a real-valued rank-3 NPY file. Integer payloads are widened to `f64`.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let raw = read_raw(path.as_ref())?;
    let dims = dims_of(&raw)?;
    Volume::new(dims, decode_f64(&raw))
}

/// Load an integer-typed rank-3 NPY file as a label volume.
pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let raw = read_raw(path.as_ref())?;
    if raw.dtype.is_float() {
        return Err(Error::Format(format!(
            "{}: label volumes need an integer dtype",
            path.as_ref().display()
        )));
    }
    let dims = dims_of(&raw)?;
    LabelVolume::new(dims, decode_labels(&raw)?)
}

fn encode_header(descr: &str, shape: [usize; 3]) -> Vec<u8> {
    let dict = format!(
        "{{'descr': '{descr}', 'fortran_order': False, 'shape': ({}, {}, {}), }}",
        shape[0], shape[1], shape[2]
    );
    // magic(6) + version(2) + len(2) + dict + padding + '\n' is a multiple of ALIGN
    let unpadded = 10 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    let mut out = Vec::with_capacity(unpadded + pad);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&((dict.len() + pad + 1) as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out.extend(std::iter::repeat_n(b' ', pad));
    out.push(b'\n');
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Write a volume as `<f8` with shape `(nz, ny, nx)`.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = encode_header("<f8", v.dims().npy_shape());
    bytes.reserve(v.data().len() * 8);
    for x in v.data() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path.as_ref(), &bytes)
}

/// Write a label volume as `|u1` if every label fits in a byte, else `<u4`.
pub fn save_labels(v: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let bytes = if v.max_label() <= u8::MAX as u32 {
        let mut b = encode_header("|u1", v.dims().npy_shape());
        b.extend(v.data().iter().map(|&l| l as u8));
        b
    } else {
        let mut b = encode_header("<u4", v.dims().npy_shape());
        for l in v.data() {
            b.extend_from_slice(&l.to_le_bytes());
        }
        b
    };
    write_file(path.as_ref(), &bytes)
}
