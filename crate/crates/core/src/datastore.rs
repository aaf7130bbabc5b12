//! Episode recording, the on-disk episode format, dataset loading and
//! training-sample extraction.
//!
//! An episode file is a text header line, one line of JSON metadata, and a
//! sequence of named little-endian `f32` arrays:
//!
//! ```text
//! CDEP 1\n
//! {"version":1,"task":"erase",...}\n
//! u32 array count
//! per array: u32 name length, name bytes, u32 rank, u64 dims…, f32 data…
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compliance::StiffnessPreset;
use crate::types::{ActionChunk, ObsFrame, Observation, TaskId, ACTION_DIM, POSE_DIM, WRENCH_DIM};

pub const EPISODE_MAGIC: &str = "CDEP";
pub const EPISODE_VERSION: u32 = 1;
pub const EPISODE_EXTENSION: &str = "ep";

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("corrupt episode file at byte {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error("episode format version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("inconsistent episode: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn corrupt(offset: usize, reason: impl Into<String>) -> DatastoreError {
    DatastoreError::CorruptFile { offset, reason: reason.into() }
}

/// Task outcome measured by the simulator at the end of the episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Outcome {
    pub fine_fraction: Option<f64>,
    pub erased_fraction: Option<f64>,
    pub inserted: Option<bool>,
    pub damaged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub version: u32,
    pub id: String,
    pub task: TaskId,
    pub seed: u64,
    pub control_rate: f64,
    pub grid_size: usize,
    pub presets: Vec<StiffnessPreset>,
    /// Caller-supplied; left empty for byte-reproducible collection.
    pub date: String,
    pub human: bool,
    pub outcome: Outcome,
}

/// Per-tick recording of one arm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ArmTrack {
    /// `[T, 9]`
    pub pose: Vec<f32>,
    /// `[T, 6]`
    pub wrench: Vec<f32>,
    /// `[T, 16]`
    pub action: Vec<f32>,
    /// `[T]`, contact normal force magnitude.
    pub normal_force: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub arms: Vec<ArmTrack>,
    /// `[T, G·G]`, shared by all arms.
    pub grid: Vec<f32>,
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

impl Episode {
    pub fn new(meta: EpisodeMeta, n_arms: usize) -> Self {
        Self { meta, arms: vec![ArmTrack::default(); n_arms], grid: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.arms.first().map_or(0, |a| a.normal_force.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_cells(&self) -> usize {
        self.meta.grid_size * self.meta.grid_size
    }

    /// Appends one tick: per-arm current frames, actions and normal forces.
    /// The grid is taken from the first arm's frame.
    pub fn push(&mut self, frames: &[ObsFrame], actions: &[[f64; ACTION_DIM]], normal: &[f64]) {
        for (arm, track) in self.arms.iter_mut().enumerate() {
            track.pose.extend(to_f32(&frames[arm].pose));
            track.wrench.extend(to_f32(&frames[arm].wrench));
            track.action.extend(to_f32(&actions[arm]));
            track.normal_force.push(normal[arm] as f32);
        }
        self.grid.extend(to_f32(&frames[0].grid));
    }

    pub fn frame(&self, arm: usize, tick: usize) -> ObsFrame {
        let t = &self.arms[arm];
        let g = self.grid_cells();
        let widen = |s: &[f32]| s.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let mut pose = [0.0; POSE_DIM];
        let mut wrench = [0.0; WRENCH_DIM];
        pose.copy_from_slice(&widen(&t.pose[tick * POSE_DIM..(tick + 1) * POSE_DIM]));
        wrench.copy_from_slice(&widen(&t.wrench[tick * WRENCH_DIM..(tick + 1) * WRENCH_DIM]));
        ObsFrame { pose, wrench, grid: widen(&self.grid[tick * g..(tick + 1) * g]) }
    }

    /// `(t−1, t)` pair; the first tick pairs with itself.
    pub fn observation(&self, arm: usize, tick: usize) -> Observation {
        Observation { previous: self.frame(arm, tick.saturating_sub(1)), current: self.frame(arm, tick) }
    }

    pub fn action(&self, arm: usize, tick: usize) -> [f64; ACTION_DIM] {
        let mut a = [0.0; ACTION_DIM];
        for (o, &x) in a.iter_mut().zip(&self.arms[arm].action[tick * ACTION_DIM..(tick + 1) * ACTION_DIM]) {
            *o = x as f64;
        }
        a
    }

    /// `H` actions from `tick`, repeating the final action past the end.
    pub fn chunk(&self, arm: usize, tick: usize, horizon: usize) -> ActionChunk {
        let last = self.len() - 1;
        let data = (0..horizon).flat_map(|i| self.action(arm, (tick + i).min(last))).collect();
        ActionChunk::from_vec(horizon, data).expect("chunk length")
    }

    fn check(&self) -> Result<(), DatastoreError> {
        let t = self.len();
        let bad = |what: &str| Err(DatastoreError::Inconsistent(format!("{what} length mismatch")));
        if self.arms.len() != self.meta.task.n_arms() {
            return Err(DatastoreError::Inconsistent(format!(
                "{} arm tracks for task {}",
                self.arms.len(),
                self.meta.task
            )));
        }
        for a in &self.arms {
            if a.pose.len() != t * POSE_DIM {
                return bad("pose");
            }
            if a.wrench.len() != t * WRENCH_DIM {
                return bad("wrench");
            }
            if a.action.len() != t * ACTION_DIM {
                return bad("action");
            }
            if a.normal_force.len() != t {
                return bad("normal_force");
            }
        }
        if self.grid.len() != t * self.grid_cells() {
            return bad("grid");
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatastoreError> {
        self.check()?;
        let mut out = format!("{EPISODE_MAGIC} {EPISODE_VERSION}\n").into_bytes();
        let meta = serde_json::to_string(&self.meta).map_err(|e| DatastoreError::Inconsistent(e.to_string()))?;
        out.extend(meta.as_bytes());
        out.push(b'\n');
        let t = self.len() as u64;
        let g = self.grid_cells() as u64;
        let mut arrays: Vec<(String, Vec<u64>, &[f32])> = Vec::new();
        for (i, a) in self.arms.iter().enumerate() {
            arrays.push((format!("arm{i}/pose"), vec![t, POSE_DIM as u64], &a.pose));
            arrays.push((format!("arm{i}/wrench"), vec![t, WRENCH_DIM as u64], &a.wrench));
            arrays.push((format!("arm{i}/action"), vec![t, ACTION_DIM as u64], &a.action));
            arrays.push((format!("arm{i}/normal_force"), vec![t], &a.normal_force));
        }
        arrays.push(("grid".into(), vec![t, g], &self.grid));
        out.extend((arrays.len() as u32).to_le_bytes());
        for (name, dims, data) in arrays {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend(d.to_le_bytes());
            }
            for x in data {
                out.extend(x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatastoreError> {
        let mut r = Reader { bytes, pos: 0 };
        let header = r.line()?;
        let (magic, version) = header.split_once(' ').ok_or_else(|| corrupt(0, "bad header line"))?;
        if magic != EPISODE_MAGIC {
            return Err(corrupt(0, format!("bad magic {magic:?}")));
        }
        let version: u32 = version.parse().map_err(|_| corrupt(magic.len() + 1, "bad version"))?;
        if version != EPISODE_VERSION {
            return Err(DatastoreError::VersionMismatch { found: version, expected: EPISODE_VERSION });
        }
        let meta_at = r.pos;
        let meta: EpisodeMeta =
            serde_json::from_str(&r.line()?).map_err(|e| corrupt(meta_at, format!("metadata: {e}")))?;
        if meta.version != EPISODE_VERSION {
            return Err(DatastoreError::VersionMismatch { found: meta.version, expected: EPISODE_VERSION });
        }
        let mut ep = Episode::new(meta, 0);
        ep.arms = vec![ArmTrack::default(); ep.meta.task.n_arms()];
        let count = r.u32()?;
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt(at, "array name not UTF-8"))?;
            let rank = r.u32()? as usize;
            let mut n: usize = 1;
            for _ in 0..rank {
                let d = r.u64()?;
                n = n.checked_mul(d as usize).ok_or_else(|| corrupt(r.pos, "array too large"))?;
            }
            let raw = r.take(n.checked_mul(4).ok_or_else(|| corrupt(r.pos, "array too large"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let slot = match name.split_once('/') {
                None if name == "grid" => &mut ep.grid,
                Some((arm, field)) => {
                    let i: usize = arm
                        .strip_prefix("arm")
                        .and_then(|s| s.parse().ok())
                        .filter(|&i| i < ep.arms.len())
                        .ok_or_else(|| corrupt(at, format!("unknown array {name:?}")))?;
                    let t = &mut ep.arms[i];
                    match field {
                        "pose" => &mut t.pose,
                        "wrench" => &mut t.wrench,
                        "action" => &mut t.action,
                        "normal_force" => &mut t.normal_force,
                        _ => return Err(corrupt(at, format!("unknown array {name:?}"))),
                    }
                }
                None => return Err(corrupt(at, format!("unknown array {name:?}"))),
            };
            *slot = data;
        }
        if r.pos != bytes.len() {
            return Err(corrupt(r.pos, "trailing bytes"));
        }
        ep.check().map_err(|e| corrupt(r.pos, e.to_string()))?;
        Ok(ep)
    }

    /// Writes `<root>/<task>/<id>.ep`, returning the path.
    pub fn write(&self, root: &Path) -> Result<PathBuf, DatastoreError> {
        let dir = root.join(self.meta.task.name());
        fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.{EPISODE_EXTENSION}", self.meta.id));
        fs::write(&path, self.to_bytes()?)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self, DatastoreError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatastoreError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(self.pos, format!("truncated: wanted {n} bytes")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn line(&mut self) -> Result<String, DatastoreError> {
        let rest = &self.bytes[self.pos..];
        let n = rest.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt(self.pos, "unterminated text line"))?;
        let at = self.pos;
        let s = std::str::from_utf8(&rest[..n]).map_err(|_| corrupt(at, "header not UTF-8"))?.to_owned();
        self.pos += n + 1;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DatastoreError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatastoreError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Episode files of one task under `root/<task>/`, sorted by file name.
pub fn load_dataset(root: &Path, task: TaskId) -> Result<Vec<Episode>, DatastoreError> {
    let dir = root.join(task.name());
    let mut paths: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == EPISODE_EXTENSION))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    paths.sort();
    paths.iter().map(|p| Episode::read(p)).collect()
}

/// Running mean/variance (Welford), used for the z-scored dimensions.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n > 0.0 { (self.m2 / self.n).sqrt() } else { 0.0 }
    }
}

/// Per-dimension statistics for z-scored or min-max scaled values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl DimStats {
    fn from_rows<'a>(dim: usize, rows: impl Iterator<Item = &'a [f32]>) -> Self {
        let mut w = vec![Welford::default(); dim];
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (i, &x) in row.iter().enumerate() {
                let x = x as f64;
                w[i].push(x);
                min[i] = min[i].min(x);
                max[i] = max[i].max(x);
            }
        }
        Self { mean: w.iter().map(|s| s.mean).collect(), std: w.iter().map(Welford::std).collect(), min, max }
    }
}

/// Statistics of one arm's observations and actions over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub pose: DimStats,
    pub wrench: DimStats,
    pub action: DimStats,
}

pub fn compute_stats(episodes: &[Episode], arm: usize) -> Result<NormalizationStats, DatastoreError> {
    if episodes.iter().all(|e| e.is_empty()) {
        return Err(DatastoreError::EmptyDataset);
    }
    let tracks = || episodes.iter().filter_map(move |e| e.arms.get(arm));
    Ok(NormalizationStats {
        pose: DimStats::from_rows(POSE_DIM, tracks().flat_map(|t| t.pose.chunks_exact(POSE_DIM))),
        wrench: DimStats::from_rows(WRENCH_DIM, tracks().flat_map(|t| t.wrench.chunks_exact(WRENCH_DIM))),
        action: DimStats::from_rows(ACTION_DIM, tracks().flat_map(|t| t.action.chunks_exact(ACTION_DIM))),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub episode: usize,
    pub tick: usize,
    pub observation: Observation,
    pub chunk: ActionChunk,
}

/// `(episode, tick)` pairs drawn uniformly over all recorded ticks.
pub fn sample_indices(episodes: &[Episode], batch: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let total: usize = episodes.iter().map(Episode::len).sum();
    if total == 0 {
        return Vec::new();
    }
    (0..batch)
        .map(|_| {
            let mut k = rng.gen_range(0..total);
            for (i, e) in episodes.iter().enumerate() {
                if k < e.len() {
                    return (i, k);
                }
                k -= e.len();
            }
            unreachable!("index within total")
        })
        .collect()
}

/// Raw (unnormalized) samples; chunks past the episode end repeat the final
/// action.
pub fn sample_batch(episodes: &[Episode], arm: usize, batch: usize, horizon: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_indices(episodes, batch, &mut rng)
        .into_iter()
        .map(|(e, t)| TrainSample {
            episode: e,
            tick: t,
            observation: episodes[e].observation(arm, t),
            chunk: episodes[e].chunk(arm, t, horizon),
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::compliance::default_presets;
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn toy_episode(task: TaskId, len: usize, seed: u64) -> Episode {
        let meta = EpisodeMeta {
            version: EPISODE_VERSION,
            id: format!("toy-{seed:04}"),
            task,
            seed,
            control_rate: 50.0,
            grid_size: 4,
            presets: default_presets(),
            date: String::new(),
            human: false,
            outcome: Outcome::default(),
        };
        let mut ep = Episode::new(meta, task.n_arms());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..len {
            let frames: Vec<ObsFrame> = (0..task.n_arms())
                .map(|_| ObsFrame {
                    pose: std::array::from_fn(|_| rng.gen_range(-1.0..1.0)),
                    wrench: std::array::from_fn(|_| rng.gen_range(-5.0..5.0)),
                    grid: (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
                })
                .collect();
            let actions: Vec<[f64; ACTION_DIM]> =
                (0..task.n_arms()).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
            let normal: Vec<f64> = (0..task.n_arms()).map(|_| rng.gen_range(0.0..10.0)).collect();
            ep.push(&frames, &actions, &normal);
        }
        ep
    }

    #[test]
    fn round_trip_and_truncation() {
        let ep = toy_episode(TaskId::RoundInsert, 7, 1);
        let bytes = ep.to_bytes().unwrap();
        assert_eq!(Episode::from_bytes(&bytes).unwrap(), ep);
        for cut in [3, 20, bytes.len() - 1] {
            assert!(matches!(Episode::from_bytes(&bytes[..cut]), Err(DatastoreError::CorruptFile { .. })));
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Episode::from_bytes(&extra), Err(DatastoreError::CorruptFile { .. })));
    }

    #[test]
    fn version_mismatch() {
        let bytes = toy_episode(TaskId::Erase, 2, 0).to_bytes().unwrap();
        let mut s = bytes.clone();
        s[5] = b'9';
        assert!(matches!(Episode::from_bytes(&s), Err(DatastoreError::VersionMismatch { found: 9, .. })));
    }

    #[test]
    fn files_and_dataset_counts() {
        let dir = tempfile::tempdir().unwrap();
        let lens = [5, 9, 3];
        for (i, &n) in lens.iter().enumerate() {
            toy_episode(TaskId::Grind, n, i as u64).write(dir.path()).unwrap();
        }
        let ds = load_dataset(dir.path(), TaskId::Grind).unwrap();
        assert_eq!(ds.iter().map(Episode::len).sum::<usize>(), lens.iter().sum::<usize>());
        assert!(load_dataset(dir.path(), TaskId::Erase).unwrap().is_empty());
    }

    #[test]
    fn end_of_episode_padding() {
        let ep = toy_episode(TaskId::Grind, 5, 2);
        let c = ep.chunk(0, 4, 6);
        for a in c.actions() {
            assert_eq!(a.0, ep.action(0, 4));
        }
        let c = ep.chunk(0, 2, 4);
        assert_eq!(c.action(0).0, ep.action(0, 2));
        assert_eq!(c.action(3).0, ep.action(0, 4));
    }

    #[test]
    fn stats_match_two_pass_oracle() {
        let eps = [toy_episode(TaskId::Grind, 30, 3), toy_episode(TaskId::Grind, 17, 4)];
        let s = compute_stats(&eps, 0).unwrap();
        for d in 0..WRENCH_DIM {
            let xs: Vec<f64> =
                eps.iter().flat_map(|e| e.arms[0].wrench.chunks(6).map(move |r| r[d] as f64)).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            assert!((s.wrench.mean[d] - mean).abs() < 1e-12);
            assert!((s.wrench.std[d] - var.sqrt()).abs() < 1e-12);
        }
        assert!(matches!(compute_stats(&[], 0), Err(DatastoreError::EmptyDataset)));
    }

    #[test]
    fn sampling_deterministic_and_uniform() {
        let eps = [toy_episode(TaskId::Grind, 10, 0), toy_episode(TaskId::Grind, 30, 1)];
        assert_eq!(sample_batch(&eps, 0, 8, 4, 11), sample_batch(&eps, 0, 8, 4, 11));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let mut counts = vec![0usize; 40];
        for (e, t) in sample_indices(&eps, draws, &mut rng) {
            counts[if e == 0 { t } else { 10 + t }] += 1;
        }
        let p = 1.0 / 40.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - draws as f64 * p).abs() < 3.0 * sigma);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bit_exact_round_trip(len in 0usize..12, seed in 0u64..1000, task in 0usize..4) {
            let ep = toy_episode(TaskId::ALL[task], len, seed);
            let bytes = ep.to_bytes().unwrap();
            let back = Episode::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
