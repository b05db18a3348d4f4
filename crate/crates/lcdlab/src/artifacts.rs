//! Run-directory artifacts: PGM sample grids, metrics CSV, and checkpoints.
//!
//! Every training run directory contains `effective-config.json`,
//! `metrics.csv` (schema: `step,wall_ms,loss,lr,grad_norm`), `checkpoints/`,
//! and `samples/`. Images are binary PGM (P5, maxval 255) with pixel values
//! mapped linearly from [-1, 1].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Map a [-1, 1] value to a PGM byte.
fn to_byte(v: f32) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

/// Encode a grayscale image (row-major, values in [-1, 1]) as binary PGM.
pub fn pgm_bytes(pixels: &[f32], width: usize, height: usize) -> Vec<u8> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| to_byte(v)));
    out
}

/// Decode a binary PGM produced by [`pgm_bytes`] back to [-1, 1] values.
pub fn pgm_parse(bytes: &[u8]) -> Result<(Vec<f32>, usize, usize)> {
    let err = |m: &str| Error::InvalidArg {
        op: "pgm_parse",
        msg: m.to_string(),
    };
    let header_end = bytes
        .windows(1)
        .enumerate()
        .scan(0usize, |newlines, (i, w)| {
            if w[0] == b'\n' {
                *newlines += 1;
            }
            Some((i, *newlines))
        })
        .find(|(_, n)| *n == 3)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| err("truncated header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| err("bad header"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P5") {
        return Err(err("not a P5 PGM"));
    }
    let dims: Vec<usize> = lines
        .next()
        .ok_or_else(|| err("missing dims"))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| err("bad dims")))
        .collect::<Result<_>>()?;
    let (w, h) = (dims[0], dims[1]);
    if lines.next() != Some("255") {
        return Err(err("maxval must be 255"));
    }
    let data = &bytes[header_end..];
    if data.len() != w * h {
        return Err(err("payload size mismatch"));
    }
    let pixels = data
        .iter()
        .map(|&b| (b as f32 / 255.0) * 2.0 - 1.0)
        .collect();
    Ok((pixels, w, h))
}

/// Tile a batch `[n, s, s]` into a near-square grid image.
pub fn tile_grid(batch: &Tensor) -> Result<(Vec<f32>, usize, usize)> {
    let shape = batch.shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::InvalidArg {
            op: "tile_grid",
            msg: format!("expected [n, s, s], got {shape:?}"),
        });
    }
    let (n, s) = (shape[0], shape[1]);
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (w, h) = (cols * s, rows * s);
    let data = batch.to_vec();
    let mut grid = vec![-1.0f32; w * h];
    for i in 0..n {
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..s {
            let dst = (gy * s + y) * w + gx * s;
            let src = i * s * s + y * s;
            grid[dst..dst + s].copy_from_slice(&data[src..src + s]);
        }
    }
    Ok((grid, w, h))
}

pub fn write_pgm_grid(path: &Path, batch: &Tensor) -> Result<()> {
    let (grid, w, h) = tile_grid(batch)?;
    fs::write(path, pgm_bytes(&grid, w, h))?;
    Ok(())
}

/// A training run directory with the standard layout.
#[derive(Debug)]
pub struct RunDir {
    pub root: PathBuf,
    metrics: fs::File,
}

impl RunDir {
    /// Create (or reopen for append) a run directory.
    pub fn create(root: &Path, effective_config_json: &str, append: bool) -> Result<RunDir> {
        fs::create_dir_all(root.join("checkpoints"))?;
        fs::create_dir_all(root.join("samples"))?;
        fs::write(root.join("effective-config.json"), effective_config_json)?;
        let metrics_path = root.join("metrics.csv");
        let fresh = !append || !metrics_path.exists();
        let mut metrics = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .truncate(false)
            .open(&metrics_path)?;
        if fresh {
            metrics.set_len(0)?;
            writeln!(metrics, "step,wall_ms,loss,lr,grad_norm")?;
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            metrics,
        })
    }

    pub fn append_metrics(
        &mut self,
        step: u64,
        wall_ms: f64,
        loss: f32,
        lr: f32,
        grad_norm: f32,
    ) -> Result<()> {
        writeln!(
            self.metrics,
            "{step},{wall_ms:.3},{loss:e},{lr:e},{grad_norm:e}"
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        Ok(())
    }

    pub fn checkpoint_path(&self, tag: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{tag}.ckpt"))
    }

    pub fn state_path(&self, tag: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{tag}.state.json"))
    }

    pub fn sample_path(&self, step: u64) -> PathBuf {
        self.root.join("samples").join(format!("step_{step:07}.pgm"))
    }
}

/// Read a metrics CSV back as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub wall_ms: f64,
    pub loss: f32,
    pub lr: f32,
    pub grad_norm: f32,
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "step,wall_ms,loss,lr,grad_norm" {
                return Err(Error::InvalidArg {
                    op: "read_metrics",
                    msg: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(Error::InvalidArg {
                op: "read_metrics",
                msg: format!("bad row `{line}`"),
            });
        }
        let parse_err = |what: &str| Error::InvalidArg {
            op: "read_metrics",
            msg: format!("bad {what} in `{line}`"),
        };
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|_| parse_err("step"))?,
            wall_ms: f[1].parse().map_err(|_| parse_err("wall_ms"))?,
            loss: f[2].parse().map_err(|_| parse_err("loss"))?,
            lr: f[3].parse().map_err(|_| parse_err("lr"))?,
            grad_norm: f[4].parse().map_err(|_| parse_err("grad_norm"))?,
        });
    }
    Ok(rows)
}

/// Raw little-endian f32 image blob with a JSON manifest, used by `gen-data`
/// and by sample exports. The manifest carries the element count, image size,
/// CRC32 of the blob bytes, and optional per-image class labels.
pub mod blob {
    use super::*;
    use crate::checkpoint::crc32;
    use serde::{Deserialize, Serialize};

    #[derive(Debug, Clone, Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    pub struct BlobManifest {
        pub count: usize,
        pub image_size: usize,
        pub crc32: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub classes: Option<Vec<u8>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub spec: Option<serde_json::Value>,
    }

    pub fn write(path_base: &Path, images: &Tensor, classes: Option<&[usize]>, spec: Option<serde_json::Value>) -> Result<()> {
        let shape = images.shape();
        if shape.len() != 3 || shape[1] != shape[2] {
            return Err(Error::InvalidArg {
                op: "blob_write",
                msg: format!("expected [n, s, s], got {shape:?}"),
            });
        }
        let mut bytes = Vec::with_capacity(images.len() * 4);
        for v in images.to_vec() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let manifest = BlobManifest {
            count: shape[0],
            image_size: shape[1],
            crc32: crc32(&bytes),
            classes: classes.map(|cs| cs.iter().map(|&c| c as u8).collect()),
            spec,
        };
        fs::write(path_base.with_extension("f32"), &bytes)?;
        fs::write(
            path_base.with_extension("json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }

    pub fn read(path_base: &Path) -> Result<(Tensor, Option<Vec<usize>>, BlobManifest)> {
        let manifest: BlobManifest =
            serde_json::from_str(&fs::read_to_string(path_base.with_extension("json"))?)?;
        let bytes = fs::read(path_base.with_extension("f32"))?;
        let actual = crc32(&bytes);
        if actual != manifest.crc32 {
            return Err(Error::Checkpoint(format!(
                "dataset blob CRC mismatch: manifest {:#010x}, blob {actual:#010x}",
                manifest.crc32
            )));
        }
        let n = manifest.count;
        let s = manifest.image_size;
        if bytes.len() != n * s * s * 4 {
            return Err(Error::Checkpoint("blob size does not match manifest".into()));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let images = Tensor::from_vec(&[n, s, s], data)?;
        let classes = manifest
            .classes
            .as_ref()
            .map(|cs| cs.iter().map(|&c| c as usize).collect());
        Ok((images, classes, manifest))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    #[test]
    fn pgm_roundtrip_quantized() {
        let pixels: Vec<f32> = (0..64).map(|i| i as f32 / 31.5 - 1.0).collect();
        let bytes = pgm_bytes(&pixels, 8, 8);
        let (back, w, h) = pgm_parse(&bytes).unwrap();
        assert_eq!((w, h), (8, 8));
        for (a, b) in pixels.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn grid_tiles_into_near_square() {
        let mut rng = Rng::new(0);
        let batch = Tensor::randn(&[5, 4, 4], &mut rng);
        let (grid, w, h) = tile_grid(&batch).unwrap();
        assert_eq!((w, h), (12, 8));
        assert_eq!(grid.len(), w * h);
        // first image lands in the top-left tile
        let data = batch.to_vec();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(grid[y * w + x], data[y * 4 + x].clamp(-1.0, 1.0));
            }
        }
    }

    #[test]
    fn metrics_roundtrip_and_run_layout() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        let mut rd = RunDir::create(&root, "{\"a\":1}", false).unwrap();
        rd.append_metrics(1, 12.5, 0.75, 1e-3, 0.5).unwrap();
        rd.append_metrics(2, 13.0, 0.5, 1e-3, 0.25).unwrap();
        rd.flush().unwrap();
        assert!(root.join("effective-config.json").exists());
        assert!(root.join("checkpoints").is_dir());
        assert!(root.join("samples").is_dir());
        let rows = read_metrics(&root.join("metrics.csv")).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].step, 2);
        assert_eq!(rows[1].loss, 0.5);
    }

    #[test]
    fn blob_roundtrip_and_crc_guard() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("data");
        let mut rng = Rng::new(1);
        let images = Tensor::randn(&[3, 8, 8], &mut rng);
        blob::write(&base, &images, Some(&[0, 1, 2]), None).unwrap();
        let (back, classes, _) = blob::read(&base).unwrap();
        assert_eq!(back.to_vec(), images.to_vec());
        assert_eq!(classes, Some(vec![0, 1, 2]));
        // corrupt one byte
        let mut bytes = std::fs::read(base.with_extension("f32")).unwrap();
        bytes[7] ^= 0xFF;
        std::fs::write(base.with_extension("f32"), bytes).unwrap();
        assert!(blob::read(&base).is_err());
    }
}
