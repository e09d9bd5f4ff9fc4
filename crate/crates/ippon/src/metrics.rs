//! SPL, Soft SPL, and success rate over episode batches, plus the batch
//! runner and its report format.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::guidance::ProximityTable;
use crate::sim::{run_episode, AblationSet, EpisodeConfig, EpisodeResult, FailureReason, Scene};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty batch: metrics are undefined over zero episodes")]
    EmptyBatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpisodeRow {
    pub scene: String,
    pub seed: u64,
    pub success: bool,
    pub l_i: f64,
    pub p_i: f64,
    pub d_start: f64,
    pub d_end: f64,
    pub steps: usize,
    pub elapsed: f64,
    pub collisions: usize,
    pub failure: FailureReason,
}

impl EpisodeRow {
    pub fn from_result(scene: &str, seed: u64, r: &EpisodeResult) -> Self {
        EpisodeRow {
            scene: scene.to_string(),
            seed,
            success: r.success,
            l_i: r.l_i,
            p_i: r.p_i,
            d_start: r.d_start,
            d_end: r.d_end,
            steps: r.steps,
            elapsed: r.elapsed,
            collisions: r.collisions,
            failure: r.failure,
        }
    }
}

/// SPL: (1/N) Σ S_i · p_i / max(p_i, l_i).
pub fn spl(rows: &[EpisodeRow]) -> Result<f64, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let sum: f64 = rows
        .iter()
        .map(|r| {
            if r.success {
                r.p_i / r.p_i.max(r.l_i)
            } else {
                0.0
            }
        })
        .sum();
    Ok(sum / rows.len() as f64)
}

/// Soft SPL: (1/N) Σ max(0, 1 − d_end/d_start) · p_i / max(p_i, l_i).
/// Episodes starting inside the goal region (d_start = 0) are excluded.
pub fn soft_spl(rows: &[EpisodeRow]) -> Result<(f64, usize), MetricsError> {
    let usable: Vec<&EpisodeRow> = rows.iter().filter(|r| r.d_start > 0.0).collect();
    if usable.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    let excluded = rows.len() - usable.len();
    let sum: f64 = usable
        .iter()
        .map(|r| {
            let progress = (1.0 - r.d_end / r.d_start).max(0.0);
            progress * r.p_i / r.p_i.max(r.l_i)
        })
        .sum();
    Ok((sum / usable.len() as f64, excluded))
}

pub fn success_rate(rows: &[EpisodeRow]) -> Result<f64, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyBatch);
    }
    Ok(rows.iter().filter(|r| r.success).count() as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BatchReport {
    pub ablation: String,
    /// Content hash of the batch configuration.
    pub fingerprint: String,
    pub rows: Vec<EpisodeRow>,
    pub spl: f64,
    pub soft_spl: f64,
    pub success_rate: f64,
}

impl BatchReport {
    pub fn from_rows(ablation: &str, fingerprint: &str, rows: Vec<EpisodeRow>) -> Result<Self, MetricsError> {
        let spl_v = spl(&rows)?;
        let (soft, _) = soft_spl(&rows)?;
        let sr = success_rate(&rows)?;
        Ok(BatchReport {
            ablation: ablation.to_string(),
            fingerprint: fingerprint.to_string(),
            rows,
            spl: spl_v,
            soft_spl: soft,
            success_rate: sr,
        })
    }

    /// Stored aggregates must match a fresh recomputation from the rows.
    pub fn consistent(&self) -> bool {
        spl(&self.rows).map(|v| v == self.spl).unwrap_or(false)
            && soft_spl(&self.rows).map(|(v, _)| v == self.soft_spl).unwrap_or(false)
            && success_rate(&self.rows).map(|v| v == self.success_rate).unwrap_or(false)
            && self.spl <= self.success_rate + 1e-12
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "ablation={} fingerprint={}\n", self.ablation, &self.fingerprint[..12]
        ));
        s.push_str(&format!(
            "SPL {:.3}  SoftSPL {:.3}  SR {:.3}  ({} episodes)\n",
            self.spl,
            self.soft_spl,
            self.success_rate,
            self.rows.len()
        ));
        s.push_str("scene                      seed ok    l_i    p_i coll\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<26} {:>4} {}  {:>6.2} {:>6.2} {:>4}\n",
                r.scene,
                r.seed,
                if r.success { "y" } else { "n" },
                r.l_i,
                r.p_i,
                r.collisions
            ));
        }
        s
    }
}

/// Content hash over everything that determines a batch's outcome.
pub fn config_fingerprint(
    scenes: &[(String, Scene)],
    seeds: &[u64],
    abl: &AblationSet,
    ecfg: &EpisodeConfig,
    table: Option<&ProximityTable>,
) -> String {
    let mut h = Sha256::new();
    for (name, scene) in scenes {
        h.update(name.as_bytes());
        h.update(crate::sim::scene_to_text(scene).as_bytes());
    }
    h.update(serde_json::to_string(seeds).unwrap());
    h.update(serde_json::to_string(abl).unwrap());
    h.update(format!(
        "{}:{}:{}:{}:{}:{}:{}",
        ecfg.dt,
        ecfg.max_steps,
        ecfg.max_sim_time,
        ecfg.voxel_size,
        ecfg.replan_interval,
        ecfg.intrinsics.width,
        serde_json::to_string(&ecfg.noise).unwrap(),
    ));
    if let Some(t) = table {
        h.update(crate::guidance::table_to_text(t).as_bytes());
    }
    format!("{:x}", h.finalize())
}

/// Run every (scene, seed) pair for one ablation. Episodes run in
/// parallel; rows come back ordered by (scene, seed) so the report is
/// deterministic regardless of scheduling.
pub fn run_batch(
    label: &str,
    scenes: &[(String, Scene)],
    seeds: &[u64],
    table: Option<&ProximityTable>,
    ecfg: &EpisodeConfig,
) -> Result<BatchReport, MetricsError> {
    let abl = AblationSet::from_label(label).unwrap_or_default();
    let fingerprint = config_fingerprint(scenes, seeds, &abl, ecfg, table);
    let mut jobs: Vec<(String, u64, &Scene)> = Vec::new();
    for (name, scene) in scenes {
        for &seed in seeds {
            jobs.push((name.clone(), seed, scene));
        }
    }
    let rows: Vec<EpisodeRow> = jobs
        .par_iter()
        .map(|(name, seed, scene)| {
            let mut cfg = ecfg.clone();
            cfg.seed = *seed;
            cfg.noise.seed = *seed;
            let r = run_episode(scene, table, &abl, &cfg, None);
            EpisodeRow::from_result(name, *seed, &r)
        })
        .collect();
    BatchReport::from_rows(label, &fingerprint, rows)
}
