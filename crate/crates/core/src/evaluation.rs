//! Metrics and the two evaluation protocols.
//!
//! Z/FS predicts a binary mask for one requested class per episode; GFS
//! predicts all registered classes in a single forward pass with whatever
//! prototype bank the supports allow. A class without any prototypes is
//! excluded from the bank and therefore predicted nowhere, which costs it an
//! IoU of 0 whenever it appears in the ground truth.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde_json::json;

use crate::partition::BinaryMask;
use crate::pipeline::{self, SupportScene};
use crate::prototype::{EmbeddingRecord, FeatureMap};
use crate::training::ModelParams;
use crate::{ClassId, Error, Result};

/// Seen/unseen split of the class space; the background is a seen class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRegistry {
    pub seen: BTreeSet<ClassId>,
    pub unseen: BTreeSet<ClassId>,
    pub background: ClassId,
}

impl ClassRegistry {
    pub fn new(
        seen: impl IntoIterator<Item = ClassId>,
        unseen: impl IntoIterator<Item = ClassId>,
        background: ClassId,
    ) -> Result<Self> {
        let seen: BTreeSet<ClassId> = seen.into_iter().collect();
        let unseen: BTreeSet<ClassId> = unseen.into_iter().collect();
        if !seen.contains(&background) {
            return Err(Error::Config("background must be a seen class".to_string()));
        }
        if seen.intersection(&unseen).next().is_some() {
            return Err(Error::Config("seen and unseen classes overlap".to_string()));
        }
        Ok(ClassRegistry {
            seen,
            unseen,
            background,
        })
    }

    /// Every registered class id, ascending.
    pub fn all(&self) -> Vec<ClassId> {
        self.seen.union(&self.unseen).copied().collect()
    }
}

/// Per-class IoU plus fold means; an empty fold is reported as absent, never
/// as zero. Values are fractions in `[0, 1]`; rendering multiplies by 100.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_class_iou: BTreeMap<ClassId, f64>,
    pub seen_miou: Option<f64>,
    pub unseen_miou: Option<f64>,
    pub hiou: Option<f64>,
}

impl MetricReport {
    /// Line-oriented `key=value` rendering, percentages.
    pub fn to_kv_lines(&self) -> String {
        let mut out = String::new();
        for (class, iou) in &self.per_class_iou {
            out.push_str(&format!("iou[{class}]={:.4}\n", iou * 100.0));
        }
        if let Some(s) = self.seen_miou {
            out.push_str(&format!("seen_miou={:.4}\n", s * 100.0));
        }
        if let Some(u) = self.unseen_miou {
            out.push_str(&format!("unseen_miou={:.4}\n", u * 100.0));
        }
        if let Some(h) = self.hiou {
            out.push_str(&format!("hiou={:.4}\n", h * 100.0));
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "per_class_iou": self.per_class_iou.iter()
                .map(|(c, v)| (c.to_string(), json!(v * 100.0)))
                .collect::<serde_json::Map<String, serde_json::Value>>(),
            "seen_miou": self.seen_miou.map(|v| v * 100.0),
            "unseen_miou": self.unseen_miou.map(|v| v * 100.0),
            "hiou": self.hiou.map(|v| v * 100.0),
        })
    }
}

/// Raw intersection/union pixel counts per class; merging these across
/// episodes gives dataset-level IoU with a deterministic reduction order.
pub type IouCounts = BTreeMap<ClassId, (u64, u64)>;

/// Intersection and union counts for every class present in `pred` or `gt`.
pub fn iou_counts(pred: &[ClassId], gt: &[ClassId], classes: &[ClassId]) -> Result<IouCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "prediction has {} pixels, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut counts: IouCounts = BTreeMap::new();
    for &c in classes {
        let mut inter = 0;
        let mut union = 0;
        for (&p, &g) in pred.iter().zip(gt) {
            let in_p = p == c;
            let in_g = g == c;
            inter += (in_p && in_g) as u64;
            union += (in_p || in_g) as u64;
        }
        if union > 0 {
            counts.insert(c, (inter, union));
        }
    }
    Ok(counts)
}

/// `|pred ∩ gt| / |pred ∪ gt|` per class; a class absent from both maps is
/// excluded entirely.
pub fn iou_per_class(
    pred: &[ClassId],
    gt: &[ClassId],
    classes: &[ClassId],
) -> Result<BTreeMap<ClassId, f64>> {
    Ok(iou_counts(pred, gt, classes)?
        .into_iter()
        .map(|(c, (i, u))| (c, i as f64 / u as f64))
        .collect())
}

/// Order-independent accumulator over per-episode [`IouCounts`].
#[derive(Debug, Clone, Default)]
pub struct IouAccumulator {
    counts: IouCounts,
}

impl IouAccumulator {
    pub fn merge(&mut self, counts: &IouCounts) {
        for (&c, &(i, u)) in counts {
            let e = self.counts.entry(c).or_insert((0, 0));
            e.0 += i;
            e.1 += u;
        }
    }

    pub fn ratios(&self) -> BTreeMap<ClassId, f64> {
        self.counts
            .iter()
            .map(|(&c, &(i, u))| (c, i as f64 / u as f64))
            .collect()
    }
}

/// Fold means over seen and unseen classes plus their harmonic mean.
pub fn summarize(per_class: &BTreeMap<ClassId, f64>, registry: &ClassRegistry) -> MetricReport {
    summarize_opts(per_class, registry, true)
}

/// Same as [`summarize`] but optionally leaving the background class out of
/// the seen fold.
pub fn summarize_opts(
    per_class: &BTreeMap<ClassId, f64>,
    registry: &ClassRegistry,
    include_background: bool,
) -> MetricReport {
    let fold_mean = |fold: &BTreeSet<ClassId>| -> Option<f64> {
        let values: Vec<f64> = fold
            .iter()
            .filter(|&&c| include_background || c != registry.background)
            .filter_map(|c| per_class.get(c).copied())
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    };
    let seen_miou = fold_mean(&registry.seen);
    let unseen_miou = fold_mean(&registry.unseen);
    let hiou = match (seen_miou, unseen_miou) {
        (Some(s), Some(u)) => Some(if s + u > 0.0 {
            2.0 * s * u / (s + u)
        } else {
            0.0
        }),
        _ => None,
    };
    MetricReport {
        per_class_iou: per_class.clone(),
        seen_miou,
        unseen_miou,
        hiou,
    }
}

/// Query image: its feature pyramid plus the pixel-level class annotation at
/// the first level's grid.
#[derive(Debug, Clone)]
pub struct QueryScene {
    pub pyramid: Vec<FeatureMap>,
    pub gt: Vec<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Protocol {
    /// Binary prediction for one requested class.
    ZeroFewShot { target: ClassId },
    /// Joint prediction over every supported class.
    Generalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotMode {
    Zero,
    Shots(usize),
}

/// One evaluation (or training) episode.
#[derive(Debug, Clone)]
pub struct EpisodeSpec {
    pub registry: ClassRegistry,
    pub records: BTreeMap<ClassId, EmbeddingRecord>,
    pub supports: Vec<SupportScene>,
    pub query: QueryScene,
    pub protocol: Protocol,
    /// Regions per modality used when splitting support masks.
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ZfsOutcome {
    pub mask: BinaryMask,
    pub iou: f64,
}

#[derive(Debug, Clone)]
pub struct GfsOutcome {
    pub predicted: Vec<ClassId>,
    pub counts: IouCounts,
    pub report: MetricReport,
}

/// Z/FS: a two-class bank (background, target) predicts a binary mask via
/// per-pixel argmax. Zero-shot uses textual prototypes only; k-shot fuses
/// per shot and averages the fused prototypes.
pub fn run_zfs_episode(
    episode: &EpisodeSpec,
    model: &ModelParams,
    mode: ShotMode,
) -> Result<ZfsOutcome> {
    let target = match &episode.protocol {
        Protocol::ZeroFewShot { target } => *target,
        Protocol::Generalized => {
            return Err(Error::Episode(
                "Z/FS run requested on a GFS episode".to_string(),
            ))
        }
    };
    if target == episode.registry.background {
        return Err(Error::Episode(
            "target class cannot be the background".to_string(),
        ));
    }
    match mode {
        ShotMode::Zero => {
            if !episode.supports.is_empty() {
                return Err(Error::Episode(
                    "zero-shot episode must not carry support scenes".to_string(),
                ));
            }
            if !episode.records.contains_key(&target) {
                return Err(Error::Episode(format!(
                    "zero-shot episode needs an embedding record for class {target}"
                )));
            }
        }
        ShotMode::Shots(k) => {
            let with_target = episode
                .supports
                .iter()
                .filter(|s| s.masks.contains_key(&target))
                .count();
            if with_target != episode.supports.len() || with_target != k {
                return Err(Error::Episode(format!(
                    "{k}-shot episode needs exactly {k} support scenes annotating class {target}, found {with_target}"
                )));
            }
        }
    }

    let classes = vec![episode.registry.background, target];
    let inputs = pipeline::prepare_episode(
        &classes,
        episode.registry.background,
        &episode.records,
        &episode.supports,
        &episode.query.pyramid,
        episode.n,
        episode.seed,
    )?;
    let fwd = pipeline::forward(&inputs, model)?;

    let argmax = fwd.final_probs.argmax_map();
    let (h, w) = (fwd.final_probs.height, fwd.final_probs.width);
    let bits: Vec<u8> = argmax.iter().map(|&c| (c == 1) as u8).collect();
    let mask = BinaryMask::from_bits(h, w, bits)?;

    if episode.query.gt.len() != h * w {
        return Err(Error::shape(
            "query annotation does not match the first level".to_string(),
        ));
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for (bit, &g) in mask.bits().iter().zip(&episode.query.gt) {
        let in_p = *bit == 1;
        let in_g = g == target;
        inter += (in_p && in_g) as u64;
        union += (in_p || in_g) as u64;
    }
    let iou = if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    };
    Ok(ZfsOutcome { mask, iou })
}

/// GFS: one forward pass over the concatenated bank of every supported class
/// plus the background. Classes without any prototype source stay out of the
/// bank and are never predicted.
pub fn run_gfs_episode(episode: &EpisodeSpec, model: &ModelParams) -> Result<GfsOutcome> {
    let background = episode.registry.background;
    let mut classes = vec![background];
    for c in episode.registry.all() {
        if c == background {
            continue;
        }
        let has_record = episode.records.contains_key(&c);
        let has_support = episode.supports.iter().any(|s| s.masks.contains_key(&c));
        if has_record || has_support {
            classes.push(c);
        }
    }

    let inputs = pipeline::prepare_episode(
        &classes,
        background,
        &episode.records,
        &episode.supports,
        &episode.query.pyramid,
        episode.n,
        episode.seed,
    )?;
    let fwd = pipeline::forward(&inputs, model)?;
    let (h, w) = (fwd.final_probs.height, fwd.final_probs.width);
    if episode.query.gt.len() != h * w {
        return Err(Error::shape(
            "query annotation does not match the first level".to_string(),
        ));
    }
    let predicted: Vec<ClassId> = fwd
        .final_probs
        .argmax_map()
        .into_iter()
        .map(|i| classes[i])
        .collect();
    let registry_classes = episode.registry.all();
    let counts = iou_counts(&predicted, &episode.query.gt, &registry_classes)?;
    let per_class = iou_per_class(&predicted, &episode.query.gt, &registry_classes)?;
    let report = summarize(&per_class, &episode.registry);
    Ok(GfsOutcome {
        predicted,
        counts,
        report,
    })
}

/// Evaluates GFS episodes in parallel (bounded by the global thread pool) and
/// merges counts in episode order.
pub fn run_gfs_episodes(
    episodes: &[EpisodeSpec],
    model: &ModelParams,
) -> Result<(Vec<GfsOutcome>, MetricReport)> {
    let outcomes: Vec<Result<GfsOutcome>> = episodes
        .par_iter()
        .map(|e| run_gfs_episode(e, model))
        .collect();
    let outcomes: Vec<GfsOutcome> = outcomes.into_iter().collect::<Result<_>>()?;
    let mut acc = IouAccumulator::default();
    for o in &outcomes {
        acc.merge(&o.counts);
    }
    let registry = &episodes
        .first()
        .ok_or(Error::Episode("no episodes".to_string()))?
        .registry;
    let report = summarize(&acc.ratios(), registry);
    Ok((outcomes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use crate::prediction::{LevelFusionParams, LevelWeights};

    fn ids(v: &[u32]) -> Vec<ClassId> {
        v.iter().map(|&c| ClassId(c)).collect()
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let classes = ids(&[0, 1]);
        let a = ids(&[0, 1, 1, 0]);
        let per = iou_per_class(&a, &a, &classes).unwrap();
        assert_eq!(per[&ClassId(0)], 1.0);
        assert_eq!(per[&ClassId(1)], 1.0);

        let pred = ids(&[1, 1, 0, 0]);
        let gt = ids(&[0, 0, 1, 1]);
        let per = iou_per_class(&pred, &gt, &classes).unwrap();
        assert_eq!(per[&ClassId(1)], 0.0);
    }

    #[test]
    fn iou_set_counting() {
        // pred covers cells {0,1}, gt covers {1,2}: 1 / 3
        let classes = ids(&[0, 7]);
        let pred = ids(&[7, 7, 0, 0]);
        let gt = ids(&[0, 7, 7, 0]);
        let per = iou_per_class(&pred, &gt, &classes).unwrap();
        assert!((per[&ClassId(7)] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_symmetry_and_range() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(2);
        let classes = ids(&[0, 1, 2]);
        for _ in 0..50 {
            let a: Vec<ClassId> = (0..12).map(|_| ClassId(rng.random_range(0..3))).collect();
            let b: Vec<ClassId> = (0..12).map(|_| ClassId(rng.random_range(0..3))).collect();
            let ab = iou_per_class(&a, &b, &classes).unwrap();
            let ba = iou_per_class(&b, &a, &classes).unwrap();
            assert_eq!(ab, ba);
            for v in ab.values() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn absent_class_is_excluded() {
        let classes = ids(&[0, 1, 9]);
        let pred = ids(&[0, 0]);
        let gt = ids(&[0, 1]);
        let per = iou_per_class(&pred, &gt, &classes).unwrap();
        assert!(!per.contains_key(&ClassId(9)));
        assert_eq!(per[&ClassId(1)], 0.0);
    }

    fn registry_two_folds() -> ClassRegistry {
        ClassRegistry::new(ids(&[0, 1, 2]), ids(&[3, 4]), ClassId(0)).unwrap()
    }

    #[test]
    fn summarize_reproduces_reported_numbers() {
        // folds engineered to hit the published Seen/UnSeen means exactly
        let registry = registry_two_folds();
        let per: BTreeMap<ClassId, f64> = [
            (ClassId(0), 0.7171),
            (ClassId(1), 0.7171),
            (ClassId(2), 0.7171),
            (ClassId(3), 0.3944),
            (ClassId(4), 0.3944),
        ]
        .into_iter()
        .collect();
        let report = summarize(&per, &registry);
        assert!((report.seen_miou.unwrap() * 100.0 - 71.71).abs() < 1e-9);
        assert!((report.unseen_miou.unwrap() * 100.0 - 39.44).abs() < 1e-9);
        assert!((report.hiou.unwrap() * 100.0 - 50.89).abs() < 0.01);

        let per: BTreeMap<ClassId, f64> = [
            (ClassId(0), 0.7089),
            (ClassId(1), 0.7089),
            (ClassId(2), 0.7089),
            (ClassId(3), 0.3511),
            (ClassId(4), 0.3511),
        ]
        .into_iter()
        .collect();
        let report = summarize(&per, &registry);
        assert!((report.hiou.unwrap() * 100.0 - 46.96).abs() < 0.01);
    }

    #[test]
    fn harmonic_mean_of_equals() {
        let registry = registry_two_folds();
        let per: BTreeMap<ClassId, f64> = (0..5).map(|c| (ClassId(c), 0.42)).collect();
        let report = summarize(&per, &registry);
        assert!((report.hiou.unwrap() - 0.42).abs() < 1e-12);
    }

    #[test]
    fn empty_fold_reported_absent() {
        let registry = registry_two_folds();
        let per: BTreeMap<ClassId, f64> = [(ClassId(1), 0.5)].into_iter().collect();
        let report = summarize(&per, &registry);
        assert!(report.seen_miou.is_some());
        assert!(report.unseen_miou.is_none());
        assert!(report.hiou.is_none());
    }

    #[test]
    fn background_exclusion_flag() {
        let registry = registry_two_folds();
        let per: BTreeMap<ClassId, f64> = [
            (ClassId(0), 1.0),
            (ClassId(1), 0.5),
            (ClassId(2), 0.5),
            (ClassId(3), 0.4),
            (ClassId(4), 0.6),
        ]
        .into_iter()
        .collect();
        let with_bg = summarize(&per, &registry);
        assert!((with_bg.seen_miou.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let without = summarize_opts(&per, &registry, false);
        assert!((without.seen_miou.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(with_bg.unseen_miou, without.unseen_miou);
    }

    /// Model whose residual chain is the identity on non-negative inputs, so
    /// final argmax equals per-level argmax.
    fn passthrough_model(n: usize, levels: usize, dim: usize) -> ModelParams {
        let mut params = ModelParams::init(n, levels, 1, dim, 0);
        params.prediction.fusion = LevelFusionParams {
            w_in: vec![1.0],
            levels: (0..levels)
                .map(|_| LevelWeights {
                    w: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
                    b: vec![0.0],
                })
                .collect(),
            w_out: vec![1.0],
        };
        params
    }

    #[test]
    fn zero_shot_enumeration_on_line() {
        // D=1 features [1,1,0,0]; the target's name embedding equals the
        // foreground feature, the background text stays zero: argmax follows
        // the dot product.
        let pyramid = vec![FeatureMap::from_values(1, 4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap()];
        let gt = ids(&[5, 5, 0, 0]);
        let registry = ClassRegistry::new(ids(&[0]), ids(&[5]), ClassId(0)).unwrap();
        let records: BTreeMap<ClassId, EmbeddingRecord> = [(
            ClassId(5),
            EmbeddingRecord {
                class_id: ClassId(5),
                name_embedding: vec![1.0],
                description_embeddings: vec![],
            },
        )]
        .into_iter()
        .collect();
        let episode = EpisodeSpec {
            registry,
            records,
            supports: vec![],
            query: QueryScene { pyramid, gt },
            protocol: Protocol::ZeroFewShot { target: ClassId(5) },
            n: 1,
            seed: 0,
        };
        let model = passthrough_model(1, 1, 1);
        let out = run_zfs_episode(&episode, &model, ShotMode::Zero).unwrap();
        assert_eq!(out.mask.bits(), &[1, 1, 0, 0]);
        assert_eq!(out.iou, 1.0);
    }

    #[test]
    fn zfs_empty_ground_truth_counts_false_positives() {
        let pyramid = vec![FeatureMap::from_values(1, 2, 1, vec![-1.0, -1.0]).unwrap()];
        let gt = ids(&[0, 0]); // target never appears
        let registry = ClassRegistry::new(ids(&[0]), ids(&[5]), ClassId(0)).unwrap();
        let records: BTreeMap<ClassId, EmbeddingRecord> = [(
            ClassId(5),
            EmbeddingRecord {
                class_id: ClassId(5),
                name_embedding: vec![1.0],
                description_embeddings: vec![],
            },
        )]
        .into_iter()
        .collect();
        let episode = EpisodeSpec {
            registry,
            records,
            supports: vec![],
            query: QueryScene { pyramid, gt },
            protocol: Protocol::ZeroFewShot { target: ClassId(5) },
            n: 1,
            seed: 0,
        };
        let model = passthrough_model(1, 1, 1);
        let out = run_zfs_episode(&episode, &model, ShotMode::Zero).unwrap();
        // dot(target)= -1 < dot(bg) = 0 everywhere: nothing predicted, IoU 0
        assert_eq!(out.mask.foreground_count(), 0);
        assert_eq!(out.iou, 0.0);
    }

    #[test]
    fn zfs_mode_validation() {
        let pyramid = vec![FeatureMap::from_values(1, 2, 1, vec![0.0, 1.0]).unwrap()];
        let registry = ClassRegistry::new(ids(&[0]), ids(&[5]), ClassId(0)).unwrap();
        let episode = EpisodeSpec {
            registry,
            records: BTreeMap::new(),
            supports: vec![],
            query: QueryScene {
                pyramid,
                gt: ids(&[0, 5]),
            },
            protocol: Protocol::ZeroFewShot { target: ClassId(5) },
            n: 1,
            seed: 0,
        };
        let model = passthrough_model(1, 1, 1);
        // no record for the target in zero-shot mode
        assert!(matches!(
            run_zfs_episode(&episode, &model, ShotMode::Zero),
            Err(Error::Episode(_))
        ));
        // one-shot without any support scene
        assert!(matches!(
            run_zfs_episode(&episode, &model, ShotMode::Shots(1)),
            Err(Error::Episode(_))
        ));
    }

    #[test]
    fn gfs_unsupported_class_scores_zero() {
        // class 6 appears in the ground truth but has no record and no
        // support: it must be excluded from the bank and get IoU 0.
        let pyramid = vec![FeatureMap::from_values(1, 4, 1, vec![1.0, 1.0, 0.0, 0.0]).unwrap()];
        let gt = ids(&[5, 6, 0, 0]);
        let registry = ClassRegistry::new(ids(&[0]), ids(&[5, 6]), ClassId(0)).unwrap();
        let records: BTreeMap<ClassId, EmbeddingRecord> = [(
            ClassId(5),
            EmbeddingRecord {
                class_id: ClassId(5),
                name_embedding: vec![1.0],
                description_embeddings: vec![],
            },
        )]
        .into_iter()
        .collect();
        let episode = EpisodeSpec {
            registry,
            records,
            supports: vec![],
            query: QueryScene { pyramid, gt },
            protocol: Protocol::Generalized,
            n: 1,
            seed: 0,
        };
        let model = passthrough_model(1, 1, 1);
        let out = run_gfs_episode(&episode, &model).unwrap();
        assert!(!out.predicted.contains(&ClassId(6)));
        assert_eq!(out.report.per_class_iou[&ClassId(6)], 0.0);
        assert!(out.report.per_class_iou[&ClassId(5)] > 0.0);
    }
}
