//! Satellite-thermal geo-localization module: the shared embedding network
//! (feature extractor, 1x1 compression, NetVLAD aggregation), the triplet
//! margin loss, and the domain-adversarial branch behind a gradient
//! reversal.
//!
//! The triplet loss is `max(0, |q-p| - |q-n| + m)` over unit-norm
//! descriptors. The domain loss is a cross-entropy pushing the classifier to
//! label queries as thermal and positives (and optionally negatives) as
//! satellite; the reversal layer flips its gradient into the embedding so
//! the two distributions are driven together. The total is
//! `mean(L_T) + lambda2 * mean(L_DANN)`.

mod model;
mod train;

pub use model::{BackboneKind, EmbeddingModel};
pub use train::{build_index, train_sgm, SgmTrainStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SgmError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("image dims {h}x{w} not divisible by 16")]
    DimsNotDivisible { h: usize, w: usize },
    #[error("expected 1- or 3-channel image, got {0} channels")]
    BadChannels(usize),
    #[error("descriptor dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("generated dataset requested but empty")]
    EmptyGenerated,
    #[error("non-finite loss at step {step} (epoch {epoch}); aborting")]
    DivergedLoss { step: usize, epoch: usize },
    #[error(transparent)]
    Mining(#[from] crate::mining::MiningError),
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error(transparent)]
    Index(#[from] crate::retrieval::IndexError),
    #[error(transparent)]
    Enhance(#[from] crate::enhance::EnhanceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DannMode {
    Off,
    Full,
    OnlyPositive,
}

impl std::fmt::Display for DannMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DannMode::Off => write!(f, "off"),
            DannMode::Full => write!(f, "full"),
            DannMode::OnlyPositive => write!(f, "only-positive"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SgmConfig {
    /// Triplet margin m.
    pub margin: f64,
    /// DANN weight lambda2.
    pub lambda2: f64,
    pub dann_mode: DannMode,
    /// Compressed channel count after the 1x1 conv.
    pub c_target: usize,
    /// NetVLAD cluster count K.
    pub num_clusters: usize,
    /// Final descriptor dimension; must equal K * c_target.
    pub c_final: usize,
    pub epochs: usize,
    pub queries_per_epoch: usize,
    pub cache_size: usize,
    /// Queries per optimization step.
    pub batch_queries: usize,
    pub negatives_per_query: usize,
    pub learning_rate: f64,
    pub pos_radius_m: f64,
    pub neg_radius_m: f64,
    pub use_ce: bool,
    pub ce_factor: f64,
    pub use_generated: bool,
    /// Probability a training query is drawn from the generated pool.
    pub generated_mix_ratio: f64,
    pub seed: u64,
    pub backbone: BackboneKind,
    /// Initialize cluster centers by k-means over sampled local features
    /// (otherwise random unit vectors).
    pub kmeans_init: bool,
}

impl SgmConfig {
    /// Paper-scale preset: ResNet-18-style backbone, 4096-dim descriptors,
    /// 100 epochs of 5000 queries against a 5000-embedding cache.
    pub fn paper_scale() -> Self {
        SgmConfig {
            margin: 0.1,
            lambda2: 0.1,
            dann_mode: DannMode::Off,
            c_target: 64,
            num_clusters: 64,
            c_final: 4096,
            epochs: 100,
            queries_per_epoch: 5000,
            cache_size: 5000,
            batch_queries: 4,
            negatives_per_query: 10,
            learning_rate: 1e-4,
            pos_radius_m: 35.0,
            neg_radius_m: 50.0,
            use_ce: false,
            ce_factor: crate::enhance::DEFAULT_CE_FACTOR,
            use_generated: false,
            generated_mix_ratio: 0.5,
            seed: 0,
            backbone: BackboneKind::ResNet18,
            kmeans_init: true,
        }
    }

    /// Desk-scale preset: tiny CNN backbone and 64-dim descriptors.
    pub fn desk() -> Self {
        SgmConfig {
            c_target: 8,
            num_clusters: 8,
            c_final: 64,
            epochs: 30,
            queries_per_epoch: 64,
            cache_size: 256,
            backbone: BackboneKind::Tiny { base_width: 8 },
            kmeans_init: false,
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<(), SgmError> {
        if self.num_clusters * self.c_target != self.c_final {
            return Err(SgmError::BadConfig(format!(
                "K * c_target = {} * {} = {} != c_final {}",
                self.num_clusters,
                self.c_target,
                self.num_clusters * self.c_target,
                self.c_final
            )));
        }
        if self.margin <= 0.0 {
            return Err(SgmError::BadConfig(format!("margin {} must be > 0", self.margin)));
        }
        if self.pos_radius_m >= self.neg_radius_m {
            return Err(SgmError::BadConfig(format!(
                "pos_radius {} must be < neg_radius {}",
                self.pos_radius_m, self.neg_radius_m
            )));
        }
        if !(0.0..=1.0).contains(&self.generated_mix_ratio) {
            return Err(SgmError::BadConfig(format!(
                "generated_mix_ratio {} outside [0,1]",
                self.generated_mix_ratio
            )));
        }
        if self.batch_queries == 0 || self.negatives_per_query == 0 {
            return Err(SgmError::BadConfig("batch_queries and negatives_per_query must be positive".into()));
        }
        Ok(())
    }
}

/// `max(0, |q-p|_2 - |q-n|_2 + m)` over equal-length descriptors.
pub fn triplet_margin_loss(q: &[f64], p: &[f64], n: &[f64], m: f64) -> Result<f64, SgmError> {
    if q.len() != p.len() || q.len() != n.len() {
        return Err(SgmError::DimMismatch(q.len(), p.len().max(n.len())));
    }
    let dist = |a: &[f64], b: &[f64]| {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    Ok((dist(q, p) - dist(q, n) + m).max(0.0))
}

/// Cross-entropy over classifier probabilities (thermal, satellite):
/// the query targets thermal, positive and optional negative target
/// satellite. Probabilities at 0 are clamped to 1e-12.
pub fn dann_cross_entropy(
    prob_q: (f64, f64),
    prob_p: (f64, f64),
    prob_n: Option<(f64, f64)>,
) -> f64 {
    let clamp = |p: f64| p.max(1e-12);
    let mut loss = -clamp(prob_q.0).ln() - clamp(prob_p.1).ln();
    if let Some(pn) = prob_n {
        loss -= clamp(pn.1).ln();
    }
    loss
}

/// `mean(triplet_losses) + lambda2 * mean(dann_losses)`; an empty DANN list
/// contributes zero.
pub fn sgm_total_loss(triplet_losses: &[f64], dann_losses: &[f64], lambda2: f64) -> f64 {
    let mean = |xs: &[f64]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().sum::<f64>() / xs.len() as f64
        }
    };
    mean(triplet_losses) + lambda2 * mean(dann_losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplet_loss_examples() {
        let q = vec![1.0, 0.0];
        // q == p, |q-n| = 0.5, m = 0.1 -> 0
        let n = vec![1.0, 0.5];
        assert_eq!(triplet_margin_loss(&q, &q, &n, 0.1).unwrap(), 0.0);
        // equal distances -> margin survives
        let p = vec![1.0, 0.3];
        let n2 = vec![1.0, -0.3];
        let l = triplet_margin_loss(&q, &p, &n2, 0.1).unwrap();
        assert!((l - 0.1).abs() < 1e-12);
        // |q-p| = 0.3, |q-n| = 0.1 -> 0.3
        let p3 = vec![1.0, 0.3];
        let n3 = vec![1.0, 0.1];
        assert!((triplet_margin_loss(&q, &p3, &n3, 0.1).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_dim_mismatch_rejected() {
        assert!(triplet_margin_loss(&[1.0], &[1.0, 2.0], &[1.0], 0.1).is_err());
    }

    #[test]
    fn dann_perfect_probs_is_zero() {
        assert_eq!(dann_cross_entropy((1.0, 0.0), (0.0, 1.0), Some((0.0, 1.0))), 0.0);
    }

    #[test]
    fn dann_uniform_full_is_three_ln_two() {
        let u = (0.5, 0.5);
        let l = dann_cross_entropy(u, u, Some(u));
        assert!((l - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn dann_uniform_only_positive_is_two_ln_two() {
        let u = (0.5, 0.5);
        let l = dann_cross_entropy(u, u, None);
        assert!((l - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert!((sgm_total_loss(&[0.5], &[1.0], 0.1) - 0.6).abs() < 1e-15);
        assert_eq!(sgm_total_loss(&[0.5], &[], 0.1), 0.5);
        let t = [0.3, 0.7, 0.2];
        let d = [1.0, 3.0];
        assert_eq!(sgm_total_loss(&t, &d, 0.0), sgm_total_loss(&t, &[], 0.5));
    }

    #[test]
    fn config_dimension_invariant_enforced() {
        let mut cfg = SgmConfig::paper_scale();
        assert_eq!(cfg.num_clusters * cfg.c_target, 4096);
        cfg.validate().unwrap();
        cfg.c_final = 4095;
        assert!(matches!(cfg.validate(), Err(SgmError::BadConfig(_))));
    }

    #[test]
    fn config_radius_ordering_enforced() {
        let cfg = SgmConfig { pos_radius_m: 60.0, ..SgmConfig::desk() };
        assert!(cfg.validate().is_err());
    }
}
