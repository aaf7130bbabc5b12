//! Task metrics, contact-force profiles and the regression baseline.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::datastore::Episode;
use crate::runtime::{ArmModel, ChunkPolicy, RuntimeError};
use crate::types::{ActionChunk, Observation, TaskId};

/// Erased fraction at or above which a page counts as completely erased.
pub const ERASE_SUCCESS: f64 = 0.99;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episodes to evaluate")]
    EmptySet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-tick mean and standard deviation of the normal contact force.
#[derive(Debug, Clone, PartialEq)]
pub struct ForceProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Profile of `arm` across episodes aligned at their first tick. Each tick
/// aggregates the episodes long enough to contain it.
pub fn force_profile(episodes: &[&Episode], arm: usize) -> Result<ForceProfile, EvalError> {
    let len = episodes.iter().map(|e| e.len()).max().ok_or(EvalError::EmptySet)?;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for t in 0..len {
        let xs: Vec<f64> =
            episodes.iter().filter_map(|e| e.arms.get(arm)?.normal_force.get(t).map(|&f| f as f64)).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        mean.push(m);
        std.push(v.sqrt());
    }
    Ok(ForceProfile { mean, std })
}

impl ForceProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tick,mean_N,std_N\n");
        for (t, (m, d)) in self.mean.iter().zip(&self.std).enumerate() {
            writeln!(s, "{t},{m},{d}").expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        Ok(std::fs::write(path, self.to_csv())?)
    }
}

/// Fine powder fraction at the end of a grinding episode.
pub fn metric_fine_powder(ep: &Episode) -> f64 {
    ep.meta.outcome.fine_fraction.unwrap_or(0.0).clamp(0.0, 1.0)
}

/// Erased fraction and whether the page counts as completely erased (and
/// undamaged).
pub fn metric_erased(ep: &Episode) -> (f64, bool) {
    let f = ep.meta.outcome.erased_fraction.unwrap_or(0.0).clamp(0.0, 1.0);
    (f, f >= ERASE_SUCCESS && !ep.meta.outcome.damaged)
}

pub fn metric_insertion(ep: &Episode) -> bool {
    ep.meta.outcome.inserted == Some(true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub episode: String,
    pub task: TaskId,
    pub metric: f64,
    pub success: bool,
}

/// The task's headline metric for one episode.
pub fn evaluate(ep: &Episode) -> MetricRow {
    let (metric, success) = match ep.meta.task {
        TaskId::Grind => {
            let f = metric_fine_powder(ep);
            (f, f >= 0.7)
        }
        TaskId::Erase => metric_erased(ep),
        TaskId::RoundInsert | TaskId::CuboidInsert => {
            let ok = metric_insertion(ep);
            (f64::from(u8::from(ok)), ok)
        }
    };
    MetricRow { episode: ep.meta.id.clone(), task: ep.meta.task, metric, success }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("episode,task,metric,success\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.episode, r.task, r.metric, r.success).expect("write to string");
    }
    s
}

/// Mean metric and success rate over rows.
pub fn summarize(rows: &[MetricRow]) -> Option<(f64, f64)> {
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    Some((
        rows.iter().map(|r| r.metric).sum::<f64>() / n,
        rows.iter().filter(|r| r.success).count() as f64 / n,
    ))
}

/// The denoiser network used as a one-shot regressor: zero input, step 0.
#[derive(Debug, Clone)]
pub struct RegressionPolicy {
    pub arms: Vec<ArmModel>,
}

impl RegressionPolicy {
    /// Normalized prediction, before denormalization.
    pub fn predict_normalized(&self, arm: usize, obs: &Observation) -> Result<ActionChunk, RuntimeError> {
        let m = self.arms.get(arm).ok_or(RuntimeError::MissingStats(arm))?;
        let fail = |e: crate::denoiser::DenoiserError| RuntimeError::InferenceFailure(e.to_string());
        let tokens = m.denoiser.encode_observation(&m.normalizer.normalize_observation(obs)).map_err(fail)?;
        let zeros = ActionChunk::zeros(m.denoiser.config().horizon);
        m.denoiser.predict_clean_chunk(&zeros, 0, &tokens).map_err(fail)
    }
}

impl ChunkPolicy for RegressionPolicy {
    fn horizon(&self) -> usize {
        self.arms[0].denoiser.config().horizon
    }

    fn sample_chunk(&mut self, arm: usize, obs: &Observation, _seed: u64) -> Result<ActionChunk, RuntimeError> {
        let c = self.predict_normalized(arm, obs)?;
        Ok(self.arms[arm].normalizer.denormalize_chunk(&c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::tests::toy_episode;

    #[test]
    fn single_episode_zero_std() {
        let ep = toy_episode(TaskId::Grind, 10, 0);
        let p = force_profile(&[&ep], 0).unwrap();
        assert!(p.std.iter().all(|&s| s == 0.0));
        assert_eq!(p.mean.len(), 10);
        assert!(matches!(force_profile(&[], 0), Err(EvalError::EmptySet)));
    }

    #[test]
    fn symmetric_pair_mean() {
        let a = toy_episode(TaskId::Grind, 20, 1);
        let mut b = a.clone();
        let c = 4.0f32;
        for f in &mut b.arms[0].normal_force {
            *f = -*f + 2.0 * c;
        }
        let p = force_profile(&[&a, &b], 0).unwrap();
        assert!(p.mean.iter().all(|&m| (m - c as f64).abs() < 1e-5));
    }

    #[test]
    fn csv_layout() {
        let ep = toy_episode(TaskId::Grind, 3, 2);
        let csv = force_profile(&[&ep], 0).unwrap().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "tick,mean_N,std_N");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn metric_edges() {
        let mut ep = toy_episode(TaskId::Erase, 2, 0);
        ep.meta.outcome.erased_fraction = Some(0.0);
        assert_eq!(metric_erased(&ep), (0.0, false));
        ep.meta.outcome.erased_fraction = Some(1.0);
        assert_eq!(metric_erased(&ep), (1.0, true));
        ep.meta.outcome.damaged = true;
        assert_eq!(metric_erased(&ep), (1.0, false));
        let mut g = toy_episode(TaskId::Grind, 2, 0);
        g.meta.outcome.fine_fraction = Some(0.0);
        assert_eq!(metric_fine_powder(&g), 0.0);
        g.meta.outcome.fine_fraction = Some(1.0);
        assert_eq!(metric_fine_powder(&g), 1.0);
        let rows = [evaluate(&g), evaluate(&ep)];
        assert_eq!(summarize(&rows), Some((1.0, 0.5)));
        assert!(metrics_csv(&rows).starts_with("episode,task,metric,success\n"));
    }
}
