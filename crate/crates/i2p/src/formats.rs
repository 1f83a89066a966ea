//! On-disk formats: XYZ clouds, dataset manifests, PPM images, tensor files,
//! checkpoints and CSV tables.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use i2p_core::cloud::PointCloud;
use i2p_core::params::ParamStore;
use i2p_core::projection::{Axis, GridMap};
use i2p_core::train::EpochMetrics;
use i2p_core::Tensor;

use crate::error::{RunError, RunResult};

const TENSOR_MAGIC: &[u8; 4] = b"I2PF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"I2PT";
const FORMAT_VERSION: u32 = 1;

pub fn read_xyz(path: &Path) -> RunResult<PointCloud> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    parse_xyz(&text, &path.display().to_string())
}

/// Parses whitespace-separated `x y z` lines; blank lines are skipped.
pub fn parse_xyz(text: &str, source_id: &str) -> RunResult<PointCloud> {
    let mut points = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) if v.len() == 3 => points.push([v[0], v[1], v[2]]),
            _ => {
                return Err(RunError::Parse(format!(
                    "{source_id}: line {}: expected three numbers, got '{line}'",
                    n + 1
                )))
            }
        }
    }
    Ok(PointCloud::labeled(points, None, source_id)?)
}

pub fn write_xyz(cloud: &PointCloud, path: &Path) -> RunResult<()> {
    let mut out = String::with_capacity(cloud.len() * 60);
    for p in &cloud.points {
        out.push_str(&format!("{:e} {:e} {:e}\n", p[0], p[1], p[2]));
    }
    write_file(path, out.as_bytes())
}

/// `path<TAB>label` lines; relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> RunResult<Vec<(PathBuf, usize)>> {
    let text = fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (file, label) = line.split_once('\t').ok_or_else(|| {
            RunError::Parse(format!(
                "{}: line {}: expected path<TAB>label",
                path.display(),
                n + 1
            ))
        })?;
        let label = label.trim().parse::<usize>().map_err(|_| {
            RunError::Parse(format!(
                "{}: line {}: bad label '{}'",
                path.display(),
                n + 1,
                label.trim()
            ))
        })?;
        rows.push((base.join(file), label));
    }
    Ok(rows)
}

/// Binary PPM of a single-channel map. Values scale linearly from
/// `min(0, min)` to `max` onto 0..=255 and are written to all three channels.
pub fn encode_ppm(values: &[f64], height: usize, width: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.reserve(values.len() * 3);
    for v in values {
        let b = if span > 0.0 {
            ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        };
        out.extend_from_slice(&[b, b, b]);
    }
    out
}

pub fn write_ppm(path: &Path, values: &[f64], height: usize, width: usize) -> RunResult<()> {
    write_file(path, &encode_ppm(values, height, width))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor_body(out: &mut Vec<u8>, shape: &[usize], data: &[f64]) {
    put_u32(out, shape.len() as u32);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    what: String,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> RunResult<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(RunError::Parse(format!(
                "{}: truncated at byte {}",
                self.what, self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> RunResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> RunResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> RunResult<()> {
        if self.take(4)? != magic {
            return Err(RunError::Parse(format!("{}: bad magic", self.what)));
        }
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(RunError::Parse(format!(
                "{}: unsupported version {v}",
                self.what
            )));
        }
        Ok(())
    }

    fn tensor(&mut self) -> RunResult<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<RunResult<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n
            .filter(|n| {
                n.checked_mul(8)
                    .is_some_and(|b| b <= self.bytes.len() - self.at)
            })
            .ok_or_else(|| {
                RunError::Parse(format!(
                    "{}: extents {shape:?} exceed the payload",
                    self.what
                ))
            })?;
        let data = self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(&shape, data)?)
    }

    fn finish(&self) -> RunResult<()> {
        if self.at != self.bytes.len() {
            return Err(RunError::Parse(format!(
                "{}: {} trailing bytes",
                self.what,
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    put_u32(&mut out, FORMAT_VERSION);
    put_tensor_body(&mut out, t.shape(), t.data());
    out
}

pub fn decode_tensor(bytes: &[u8], what: &str) -> RunResult<Tensor> {
    let mut r = Reader {
        bytes,
        at: 0,
        what: what.into(),
    };
    r.header(TENSOR_MAGIC)?;
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

/// Writes an `H x W x C` map as a rank-3 tensor file.
pub fn save_tensor_file(map: &GridMap, path: &Path) -> RunResult<()> {
    let t = Tensor::new(&[map.height, map.width, map.channels], map.values.clone())?;
    write_file(path, &encode_tensor(&t))
}

/// Reads a rank-3 (or rank-2, single-channel) tensor file as a grid map for
/// images of resolution `image`.
pub fn load_tensor_file(path: &Path, axis: Axis, image: (usize, usize)) -> RunResult<GridMap> {
    let bytes = read_file(path)?;
    let t = decode_tensor(&bytes, &path.display().to_string())?;
    let (h, w, c) = match *t.shape() {
        [h, w, c] => (h, w, c),
        [h, w] => (h, w, 1),
        _ => {
            return Err(RunError::Parse(format!(
                "{}: expected an H x W x C tensor, got shape {:?}",
                path.display(),
                t.shape()
            )))
        }
    };
    Ok(GridMap::with_image(axis, h, w, c, t.into_data(), image)?)
}

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, store.len() as u32);
    for p in store.iter() {
        put_u32(&mut out, p.name.len() as u32);
        out.extend_from_slice(p.name.as_bytes());
        put_tensor_body(&mut out, p.tensor.shape(), p.tensor.data());
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], what: &str) -> RunResult<Vec<(String, Tensor)>> {
    let mut r = Reader {
        bytes,
        at: 0,
        what: what.into(),
    };
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| RunError::Parse(format!("{what}: parameter name is not UTF-8")))?;
        out.push((name, r.tensor()?));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> RunResult<()> {
    write_file(path, &encode_checkpoint(store))
}

/// Loads named tensors into `store`; names, order and shapes must match.
pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> RunResult<()> {
    let bytes = read_file(path)?;
    let named = decode_checkpoint(&bytes, &path.display().to_string())?;
    Ok(store.load_named(named)?)
}

pub const METRICS_HEADER: [&str; 5] = ["epoch", "lr", "loss_3d", "loss_2d", "loss_total"];

/// Nine significant digits.
pub fn sig9(v: f64) -> String {
    format!("{v:.8e}")
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> RunResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER)?;
    for m in rows {
        w.write_record([
            m.epoch.to_string(),
            sig9(m.lr),
            sig9(m.loss_3d),
            sig9(m.loss_2d),
            sig9(m.loss_total),
        ])?;
    }
    w.into_inner().map_err(|e| RunError::Parse(e.to_string()))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> RunResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| RunError::io(path, e))?;
    f.write_all(bytes).map_err(|e| RunError::io(path, e))
}

pub fn read_file(path: &Path) -> RunResult<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| RunError::io(path, e))?;
    let mut out = Vec::new();
    f.read_to_end(&mut out).map_err(|e| RunError::io(path, e))?;
    Ok(out)
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io {
            path: PathBuf::from("<csv>"),
            source: io::Error::other(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_examples() {
        let c = parse_xyz("0 0 0\n1 1 1\n", "t").unwrap();
        assert_eq!(c.points, vec![[0.0; 3], [1.0; 3]]);
        let e = parse_xyz("a b c\n", "t").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(parse_xyz("1 2\n", "t").is_err());
        assert!(parse_xyz("\n\n", "t").is_err());
    }

    #[test]
    fn ppm_scaling() {
        let img = encode_ppm(&[0.0, 0.5, 1.0, 0.25], 2, 2);
        assert!(img.starts_with(b"P6\n2 2\n255\n"));
        let px = &img[img.len() - 12..];
        assert_eq!(px, &[0, 0, 0, 128, 128, 128, 255, 255, 255, 64, 64, 64]);
        let black = encode_ppm(&[0.0; 4], 2, 2);
        assert!(black[black.len() - 12..].iter().all(|b| *b == 0));
    }

    #[test]
    fn tensor_bytes_round_trip() {
        let t = Tensor::new(&[2, 1, 3], vec![1.0, -2.5, 3.0, 0.0, 1e-300, f64::MAX]).unwrap();
        let b = encode_tensor(&t);
        assert_eq!(&b[..4], b"I2PF");
        assert_eq!(decode_tensor(&b, "t").unwrap(), t);
        assert!(decode_tensor(&b[..b.len() - 1], "t").is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad, "t").is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let mut s = ParamStore::new();
        s.add(
            "a.0.0.weight",
            Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        s.add(
            "a.0.0.bias",
            Tensor::new(&[2], vec![0.5, -0.5]).unwrap(),
            false,
        );
        let b = encode_checkpoint(&s);
        assert_eq!(&b[..4], b"I2PT");
        let named = decode_checkpoint(&b, "c").unwrap();
        assert_eq!(named[0].0, "a.0.0.weight");
        let mut t = s.clone();
        t.tensor_mut(t.find("a.0.0.bias").unwrap())
            .data_mut()
            .fill(9.0);
        t.load_named(named).unwrap();
        assert_eq!(t, s);
    }

    #[test]
    fn metrics_layout() {
        let rows = [EpochMetrics {
            epoch: 1,
            lr: 1e-3,
            loss_3d: 0.123456789123,
            loss_2d: 0.0,
            loss_total: 0.123456789123,
        }];
        let text = String::from_utf8(metrics_csv(&rows).unwrap()).unwrap();
        assert_eq!(
            text,
            "epoch,lr,loss_3d,loss_2d,loss_total\n1,1.00000000e-3,1.23456789e-1,0.00000000e0,1.23456789e-1\n"
        );
    }
}
