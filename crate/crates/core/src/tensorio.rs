//! Activation dumps and checkpoint manifests.
//!
//! A dump is one little-endian file:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 8 | magic `SVCCADMP` |
//! | 8 | 2 | version (`u16`, currently 1) |
//! | 10 | 1 | dtype: 0 = f32, 1 = f64 |
//! | 11 | 1 | kind: 0 = dense, 1 = conv |
//! | 12 | 8·r | dims as `u64`: `(m, d)` dense, `(h, w, c, d)` conv |
//! | .. | 1 | 1 if a step follows, else 0 |
//! | .. | 8 | step (`u64`, zero when absent) |
//! | .. | 4 | layer-name length in bytes (`u32`) |
//! | .. | n | layer name, UTF-8 |
//! | .. | .. | payload, row-major in dim order |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cca::ActivationMatrix;
use crate::convdft::{ConvActivations, ConvTensor};
use crate::error::{Error, Result};
use crate::linalg::RealMatrix;

pub const MAGIC: [u8; 8] = *b"SVCCADMP";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Dense { neurons: usize, datapoints: usize },
    Conv { h: usize, w: usize, c: usize, d: usize },
}

impl Shape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Dense { neurons, datapoints } => vec![neurons, datapoints],
            Shape::Conv { h, w, c, d } => vec![h, w, c, d],
        }
    }

    pub fn datapoints(&self) -> usize {
        match *self {
            Shape::Dense { datapoints, .. } => datapoints,
            Shape::Conv { d, .. } => d,
        }
    }

    /// Number of values, or `None` on overflow.
    pub fn len(&self) -> Option<usize> {
        self.dims().iter().try_fold(1usize, |acc, &v| acc.checked_mul(v))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    fn kind_code(&self) -> u8 {
        match self {
            Shape::Dense { .. } => 0,
            Shape::Conv { .. } => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Values widened to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::F64(v) => v.clone(),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        match self {
            Payload::F32(v) => v.iter().position(|x| !x.is_finite()),
            Payload::F64(v) => v.iter().position(|x| !x.is_finite()),
        }
    }
}

/// One layer's activations over a probe set, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub layer_name: String,
    pub step: Option<u64>,
    pub shape: Shape,
    pub payload: Payload,
}

impl ActivationDump {
    /// Checks every invariant a dump must satisfy before it is written or
    /// after it is read.
    pub fn validate(&self) -> Result<()> {
        if self.shape.dims().contains(&0) {
            return Err(Error::DimMismatch(format!(
                "all dims must be positive, got {:?}",
                self.shape.dims()
            )));
        }
        let len = self
            .shape
            .len()
            .ok_or_else(|| Error::DimMismatch("dims overflow".into()))?;
        if len != self.payload.len() {
            return Err(Error::DimMismatch(format!(
                "dims {:?} need {len} values, payload has {}",
                self.shape.dims(),
                self.payload.len()
            )));
        }
        if self.layer_name.len() > u32::MAX as usize {
            return Err(Error::Header("layer name too long".into()));
        }
        if let Some(index) = self.payload.first_non_finite() {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }

    pub fn dense(name: impl Into<String>, step: Option<u64>, values: &RealMatrix) -> Self {
        let payload = (0..values.nrows())
            .flat_map(|r| values.row(r).iter().copied().collect::<Vec<_>>())
            .collect();
        ActivationDump {
            layer_name: name.into(),
            step,
            shape: Shape::Dense {
                neurons: values.nrows(),
                datapoints: values.ncols(),
            },
            payload: Payload::F64(payload),
        }
    }

    pub fn conv(name: impl Into<String>, step: Option<u64>, acts: &ConvActivations) -> Self {
        let (h, w, c, d) = acts.dims();
        ActivationDump {
            layer_name: name.into(),
            step,
            shape: Shape::Conv { h, w, c, d },
            payload: Payload::F64(acts.values().to_vec()),
        }
    }

    pub fn datapoints(&self) -> usize {
        self.shape.datapoints()
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.shape, Shape::Conv { .. })
    }

    /// Dense dumps as `m × d`; conv dumps through the cross-layer view.
    pub fn to_activation_matrix(&self) -> Result<ActivationMatrix> {
        match self.shape {
            Shape::Dense { neurons, datapoints } => {
                ActivationMatrix::from_row_slice(neurons, datapoints, &self.payload.to_f64())
            }
            Shape::Conv { .. } => self.to_conv()?.cross_layer_view(),
        }
    }

    pub fn to_conv(&self) -> Result<ConvActivations> {
        match self.shape {
            Shape::Conv { h, w, c, d } => ConvTensor::new(h, w, c, d, self.payload.to_f64()),
            Shape::Dense { .. } => Err(Error::Shape(format!(
                "layer {} is dense, not conv",
                self.layer_name
            ))),
        }
    }

    /// Serialized bytes: header followed by payload.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = encode_header(self);
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = decode_header(bytes)?;
        let count = header.shape.len().ok_or_else(|| Error::DimMismatch("dims overflow".into()))?;
        let expected = count
            .checked_mul(header.dtype.size())
            .ok_or_else(|| Error::DimMismatch("dims overflow".into()))?;
        let body = &bytes[offset..];
        if body.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: body.len(),
            });
        }
        if body.len() > expected {
            return Err(Error::DimMismatch(format!(
                "dims {:?} need {expected} payload bytes, file has {}",
                header.shape.dims(),
                body.len()
            )));
        }
        let payload = match header.dtype {
            DType::F32 => Payload::F32(
                body.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => Payload::F64(
                body.chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect(),
            ),
        };
        let dump = ActivationDump {
            layer_name: header.layer_name,
            step: header.step,
            shape: header.shape,
            payload,
        };
        dump.validate()?;
        Ok(dump)
    }
}

/// Everything in a dump except the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub dtype: DType,
    pub shape: Shape,
    pub step: Option<u64>,
    pub layer_name: String,
}

fn encode_header(dump: &ActivationDump) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + dump.layer_name.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dump.payload.dtype().code());
    out.push(dump.shape.kind_code());
    for dim in dump.shape.dims() {
        out.extend_from_slice(&(dim as u64).to_le_bytes());
    }
    out.push(dump.step.is_some() as u8);
    out.extend_from_slice(&dump.step.unwrap_or(0).to_le_bytes());
    out.extend_from_slice(&(dump.layer_name.len() as u32).to_le_bytes());
    out.extend_from_slice(dump.layer_name.as_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Header(format!(
                "file ends inside the header at byte {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dim(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::DimMismatch(format!("dim {v} too large")))
    }
}

/// Parses the header; returns it with the payload offset.
pub fn decode_header(bytes: &[u8]) -> Result<(DumpHeader, usize)> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let dtype = match r.u8()? {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(Error::Header(format!("unknown dtype code {other}"))),
    };
    let shape = match r.u8()? {
        0 => Shape::Dense {
            neurons: r.dim()?,
            datapoints: r.dim()?,
        },
        1 => Shape::Conv {
            h: r.dim()?,
            w: r.dim()?,
            c: r.dim()?,
            d: r.dim()?,
        },
        other => return Err(Error::Header(format!("unknown kind code {other}"))),
    };
    if shape.dims().contains(&0) {
        return Err(Error::DimMismatch(format!(
            "all dims must be positive, got {:?}",
            shape.dims()
        )));
    }
    let has_step = r.u8()?;
    let step = r.u64()?;
    let step = match has_step {
        0 => None,
        1 => Some(step),
        other => return Err(Error::Header(format!("bad step flag {other}"))),
    };
    let name_len = r.u32()? as usize;
    let layer_name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::Header("layer name is not UTF-8".into()))?;
    Ok((
        DumpHeader {
            dtype,
            shape,
            step,
            layer_name,
        },
        r.pos,
    ))
}

pub fn write_dump(dump: &ActivationDump, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dump.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ActivationDump::from_bytes(&bytes)
}

/// Reads only as much of the file as the header needs.
pub fn read_header(path: impl AsRef<Path>) -> Result<DumpHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut prefix = Vec::new();
    // Fixed part is at most 12 + 32 + 9 + 4 bytes; names are short.
    f.take(1 << 16)
        .read_to_end(&mut prefix)
        .map_err(|e| Error::io(path, e))?;
    decode_header(&prefix).map(|(h, _)| h)
}

/// One layer of one checkpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: u64,
    pub layers: Vec<LayerEntry>,
}

/// JSON index of dumps for one model over one probe set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model_id: String,
    pub dataset_id: String,
    pub datapoint_count: usize,
    pub checkpoints: Vec<Checkpoint>,
}

impl Manifest {
    /// Structural checks that need no file access.
    pub fn validate_structure(&self) -> Result<()> {
        if self.checkpoints.is_empty() {
            return Err(Error::Manifest("no checkpoints".into()));
        }
        if self.datapoint_count == 0 {
            return Err(Error::Manifest("datapoint_count must be positive".into()));
        }
        for pair in self.checkpoints.windows(2) {
            if pair[1].step <= pair[0].step {
                return Err(Error::Manifest(format!(
                    "steps must be strictly increasing ({} then {})",
                    pair[0].step, pair[1].step
                )));
            }
        }
        for cp in &self.checkpoints {
            if cp.layers.is_empty() {
                return Err(Error::Manifest(format!("checkpoint {} lists no layers", cp.step)));
            }
            for (i, l) in cp.layers.iter().enumerate() {
                if cp.layers[..i].iter().any(|o| o.name == l.name) {
                    return Err(Error::Manifest(format!(
                        "layer {} listed twice at step {}",
                        l.name, cp.step
                    )));
                }
            }
        }
        Ok(())
    }

    /// Structural checks plus: every dump exists, parses, and has
    /// `datapoint_count` datapoints.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        self.validate_structure()?;
        for cp in &self.checkpoints {
            for l in &cp.layers {
                let path = resolve(base_dir, &l.path);
                if !path.is_file() {
                    return Err(Error::Manifest(format!(
                        "dump {} for layer {} at step {} does not exist",
                        path.display(),
                        l.name,
                        cp.step
                    )));
                }
                let d = read_header(&path)?.shape.datapoints();
                if d != self.datapoint_count {
                    return Err(Error::DatapointMismatch {
                        left: self.datapoint_count,
                        right: d,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A manifest together with the directory its relative paths resolve
/// against.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub manifest: Manifest,
    pub base_dir: PathBuf,
}

impl LoadedManifest {
    pub fn dump_path(&self, entry: &LayerEntry) -> PathBuf {
        resolve(&self.base_dir, &entry.path)
    }

    pub fn read_layer(&self, entry: &LayerEntry) -> Result<ActivationDump> {
        read_dump(self.dump_path(entry))
    }
}

/// Parses and fully validates a manifest file.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<LoadedManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(e.to_string()))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate(&base_dir)?;
    Ok(LoadedManifest { manifest, base_dir })
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate_structure()?;
    fs::write(path, manifest.to_json()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ActivationDump {
        ActivationDump {
            layer_name: "fc1".into(),
            step: Some(7),
            shape: Shape::Dense {
                neurons: 2,
                datapoints: 3,
            },
            payload: Payload::F64(vec![1.0, -2.0, 0.5, 3.25, 0.0, -0.0]),
        }
    }

    #[test]
    fn dense_layout_bytes() {
        let bytes = small().to_bytes().unwrap();
        let header = 8 + 2 + 1 + 1 + 16 + 1 + 8 + 4 + 3;
        assert_eq!(bytes.len(), header + 48);
        assert_eq!(&bytes[..8], b"SVCCADMP");
        assert_eq!(&bytes[8..12], &[1, 0, 1, 0]);
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[header..header + 8], &1.0f64.to_le_bytes());
        assert_eq!(ActivationDump::from_bytes(&bytes).unwrap(), small());
    }

    #[test]
    fn conv_f32_roundtrip() {
        let dump = ActivationDump {
            layer_name: "conv1".into(),
            step: None,
            shape: Shape::Conv { h: 4, w: 4, c: 2, d: 5 },
            payload: Payload::F32((0..160).map(|v| v as f32 * 0.25).collect()),
        };
        let back = ActivationDump::from_bytes(&dump.to_bytes().unwrap()).unwrap();
        assert_eq!(back.shape.dims(), vec![4, 4, 2, 5]);
        assert_eq!(back, dump);
    }

    #[test]
    fn errors() {
        let mut nan = small();
        nan.payload = Payload::F64(vec![1.0, f64::NAN, 0.0, 0.0, 0.0, 0.0]);
        let e = nan.to_bytes().unwrap_err();
        assert!(e.to_string().contains("non-finite payload"), "{e}");

        let good = small().to_bytes().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert_eq!(ActivationDump::from_bytes(&bad).unwrap_err().to_string(), "bad magic");

        let short = &good[..good.len() - 1];
        let e = ActivationDump::from_bytes(short).unwrap_err();
        assert!(e.to_string().starts_with("truncated payload"), "{e}");

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(ActivationDump::from_bytes(&long), Err(Error::DimMismatch(_))));

        let mut ver = good.clone();
        ver[8] = 2;
        assert!(matches!(
            ActivationDump::from_bytes(&ver),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
        assert!(matches!(ActivationDump::from_bytes(&good[..20]), Err(Error::Header(_))));
    }

    #[test]
    fn manifest_structure() {
        let m = Manifest {
            model_id: "m".into(),
            dataset_id: "probe".into(),
            datapoint_count: 3,
            checkpoints: vec![
                Checkpoint {
                    step: 0,
                    layers: vec![LayerEntry {
                        name: "fc1".into(),
                        path: "a.dump".into(),
                    }],
                },
                Checkpoint {
                    step: 0,
                    layers: vec![LayerEntry {
                        name: "fc1".into(),
                        path: "b.dump".into(),
                    }],
                },
            ],
        };
        assert!(m.validate_structure().is_err());
        let empty = Manifest {
            checkpoints: vec![],
            ..m.clone()
        };
        assert!(empty.validate_structure().is_err());
        let parsed: Manifest = serde_json::from_str(&m.to_json()).unwrap();
        assert_eq!(parsed, m);
    }
}
