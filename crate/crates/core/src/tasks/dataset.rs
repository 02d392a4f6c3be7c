//! Dataset directories: `manifest.json` plus one raw-tensor file per episode.
//! Each episode file holds one raw image per stream with the episode's frames
//! stacked along the rows.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Pose;
use crate::imaging::{Image, ImageError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt manifest: {0}")]
    Manifest(String),
    #[error("tensor file: {0}")]
    Tensor(#[from] ImageError),
    #[error("{file} is {found} bytes, manifest says {expected}")]
    Truncated { file: String, expected: u64, found: u64 },
    #[error("stream `{0}` not in dataset")]
    MissingStream(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamInfo {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl StreamInfo {
    pub fn new(name: &str, height: usize, width: usize, channels: usize) -> Self {
        Self {
            name: name.into(),
            height,
            width,
            channels,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub file: String,
    pub frames: usize,
    pub bytes: u64,
    pub index: u64,
    pub object: Pose,
    pub initial_ee: Pose,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: String,
    pub task: serde_json::Value,
    pub seed: u64,
    pub config_hash: String,
    pub frames: usize,
    pub streams: Vec<StreamInfo>,
    pub episodes: Vec<EpisodeMeta>,
    pub config: serde_json::Value,
}

/// Hex SHA-256 of the canonical JSON of what determines the data.
pub fn config_hash(kind: &str, task: &serde_json::Value, seed: u64, config: &serde_json::Value) -> String {
    let canonical = serde_json::json!({ "kind": kind, "task": task, "seed": seed, "config": config });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

pub struct DatasetWriter {
    dir: PathBuf,
    manifest: Manifest,
}

impl DatasetWriter {
    pub fn create(dir: &Path, kind: &str, task: serde_json::Value, seed: u64, streams: Vec<StreamInfo>, config: serde_json::Value) -> Result<Self, DatasetError> {
        fs::create_dir_all(dir)?;
        let config_hash = config_hash(kind, &task, seed, &config);
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: Manifest {
                schema_version: SCHEMA_VERSION,
                kind: kind.into(),
                task,
                seed,
                config_hash,
                frames: 0,
                streams,
                episodes: Vec::new(),
                config,
            },
        })
    }

    pub fn config_hash(&self) -> &str {
        &self.manifest.config_hash
    }

    /// `frames[t][k]` is stream `k` at timestep `t`.
    pub fn write_episode(&mut self, frames: &[Vec<Image>], index: u64, object: Pose, initial_ee: Pose, success: bool) -> Result<(), DatasetError> {
        let n = frames.len();
        let file = format!("ep_{:05}.bin", self.manifest.episodes.len());
        let mut w = BufWriter::new(File::create(self.dir.join(&file))?);
        let mut bytes = 0u64;
        for (k, s) in self.manifest.streams.iter().enumerate() {
            let mut data = Vec::with_capacity(n * s.frame_len());
            for f in frames {
                let img = &f[k];
                if (img.height, img.width, img.channels) != (s.height, s.width, s.channels) {
                    return Err(DatasetError::Manifest(format!(
                        "stream {} expects {}×{}×{}, got {}×{}×{}",
                        s.name, s.height, s.width, s.channels, img.height, img.width, img.channels
                    )));
                }
                data.extend_from_slice(&img.data);
            }
            let stacked = Image::from_vec(n * s.height, s.width, s.channels, data)?;
            stacked.write_raw(&mut w)?;
            bytes += stacked.raw_byte_len() as u64;
        }
        w.flush()?;
        self.manifest.frames += n;
        self.manifest.episodes.push(EpisodeMeta {
            file,
            frames: n,
            bytes,
            index,
            object,
            initial_ee,
            success,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<Manifest, DatasetError> {
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(self.manifest)
    }
}

pub struct DatasetReader {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl DatasetReader {
    /// Parses the manifest and checks every episode file against its recorded size.
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported schema version {}", manifest.schema_version)));
        }
        let total: usize = manifest.episodes.iter().map(|e| e.frames).sum();
        if total != manifest.frames {
            return Err(DatasetError::Manifest(format!("manifest lists {} frames but episodes hold {total}", manifest.frames)));
        }
        for e in &manifest.episodes {
            let expected: u64 = manifest.streams.iter().map(|s| 16 + 4 * (e.frames * s.frame_len()) as u64).sum();
            let found = fs::metadata(dir.join(&e.file))?.len();
            if found != e.bytes || expected != e.bytes {
                return Err(DatasetError::Truncated {
                    file: e.file.clone(),
                    expected: e.bytes,
                    found,
                });
            }
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames == 0
    }

    pub fn stream(&self, name: &str) -> Option<&StreamInfo> {
        self.manifest.streams.iter().find(|s| s.name == name)
    }

    /// One stacked image per stream for episode `i`.
    pub fn read_episode(&self, i: usize) -> Result<Vec<Image>, DatasetError> {
        let e = &self.manifest.episodes[i];
        let mut r = BufReader::new(File::open(self.dir.join(&e.file))?);
        self.manifest.streams.iter().map(|_| Image::read_raw(&mut r).map_err(DatasetError::from)).collect()
    }

    /// Concatenated HWC frames of the named streams over the first `max_frames` frames.
    pub fn load(&self, names: &[&str], max_frames: usize) -> Result<Vec<Vec<f32>>, DatasetError> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.manifest.streams.iter().position(|s| s.name == *n).ok_or_else(|| DatasetError::MissingStream(n.to_string())))
            .collect::<Result<_, _>>()?;
        let mut out: Vec<Vec<f32>> = idx.iter().map(|&k| Vec::with_capacity(max_frames.min(self.len()) * self.manifest.streams[k].frame_len())).collect();
        let mut left = max_frames.min(self.len());
        for i in 0..self.manifest.episodes.len() {
            if left == 0 {
                break;
            }
            let take = self.manifest.episodes[i].frames.min(left);
            let imgs = self.read_episode(i)?;
            for (o, &k) in out.iter_mut().zip(&idx) {
                o.extend_from_slice(&imgs[k].data[..take * self.manifest.streams[k].frame_len()]);
            }
            left -= take;
        }
        Ok(out)
    }
}

/// Frame visiting order for one epoch, reproducible from the seed.
pub fn shuffled_order(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_sample(dir: &Path) -> Manifest {
        let streams = vec![StreamInfo::new("a", 2, 3, 1), StreamInfo::new("b", 1, 1, 4)];
        let mut w = DatasetWriter::create(dir, "fine", serde_json::json!("round"), 5, streams, serde_json::json!({"x": 1})).unwrap();
        for (ep, n) in [3usize, 2].into_iter().enumerate() {
            let frames: Vec<Vec<Image>> = (0..n)
                .map(|t| {
                    let v = (ep * 10 + t) as f32;
                    vec![Image::filled(2, 3, 1, v), Image::from_vec(1, 1, 4, vec![v, -v, 0.5, 1e-7]).unwrap()]
                })
                .collect();
            w.write_episode(&frames, ep as u64, Pose::identity(), Pose::identity(), true).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_sample(dir.path());
        assert_eq!(m.frames, 5);
        let r = DatasetReader::open(dir.path()).unwrap();
        assert_eq!(r.manifest, m);
        let all = r.load(&["b", "a"], 100).unwrap();
        assert_eq!(all[0].len(), 5 * 4);
        assert_eq!(&all[0][12..16], &[10.0, -10.0, 0.5, 1e-7]);
        let prefix = r.load(&["a"], 4).unwrap();
        assert_eq!(prefix[0].len(), 4 * 6);
        assert_eq!(prefix[0][3 * 6], 10.0);
        assert!(matches!(r.load(&["zzz"], 1), Err(DatasetError::MissingStream(_))));
    }

    #[test]
    fn detects_truncation_and_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        write_sample(dir.path());
        let f = dir.path().join("ep_00001.bin");
        let bytes = fs::read(&f).unwrap();
        fs::write(&f, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DatasetError::Truncated { .. })));
        fs::write(&f, &bytes).unwrap();
        let mp = dir.path().join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mp).unwrap()).unwrap();
        m.frames = 7;
        fs::write(&mp, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DatasetError::Manifest(_))));
        fs::write(&mp, "{not json").unwrap();
        assert!(matches!(DatasetReader::open(dir.path()), Err(DatasetError::Manifest(_))));
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(shuffled_order(50, 3), shuffled_order(50, 3));
        assert_ne!(shuffled_order(50, 3), shuffled_order(50, 4));
        let mut s = shuffled_order(50, 3);
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
