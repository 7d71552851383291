//! Episode-level checks on synthetic scenes: self-segmentation sanity,
//! separable GFS, and agreement with a direct argmax over the same bank.

use mproto_core::evaluation::{
    run_gfs_episode, run_zfs_episode, ClassRegistry, EpisodeSpec, Protocol, QueryScene, ShotMode,
};
use mproto_core::numerics::Matrix;
use mproto_core::pipeline;
use mproto_core::prediction::{LevelFusionParams, LevelWeights};
use mproto_core::synthetic::{gen_scene, gfs_episodes, zfs_episodes, SyntheticSceneSpec};
use mproto_core::training::ModelParams;
use mproto_core::ClassId;

fn spec(noise: f64, seed: u64) -> SyntheticSceneSpec {
    SyntheticSceneSpec::axes(3, 8, 3.0, noise, 3, 2, seed).unwrap()
}

/// Sanity model: the residual chain reduces to the sum of the per-level
/// probabilities, so the final argmax is a plain monotone aggregate.
fn sum_chain_model(n: usize, levels: usize, dim: usize) -> ModelParams {
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

fn registry() -> ClassRegistry {
    ClassRegistry::new(
        [ClassId(0), ClassId(1), ClassId(2)],
        [ClassId(3)],
        ClassId(0),
    )
    .unwrap()
}

#[test]
fn one_shot_self_segmentation() {
    // query == support: a fresh model must segment the class it was just
    // shown on the very same image
    let scene = gen_scene(&spec(0.05, 41)).unwrap();
    let target = ClassId(2);
    let mut support = scene.support();
    support.masks.retain(|c, _| *c == target);
    let episode = EpisodeSpec {
        registry: registry(),
        records: scene.records.clone(),
        supports: vec![support],
        query: scene.query(),
        protocol: Protocol::ZeroFewShot { target },
        n: 3,
        seed: 7,
    };
    let model = sum_chain_model(3, 3, 8);
    let out = run_zfs_episode(&episode, &model, ShotMode::Shots(1)).unwrap();
    assert!(out.iou >= 0.95, "self-segmentation IoU {}", out.iou);
}

#[test]
fn five_shot_episodes_average_cleanly() {
    let s = spec(0.1, 99);
    let reg = registry();
    let episodes = zfs_episodes(&s, &reg, ClassId(3), 3, 5, 3, 13).unwrap();
    let model = sum_chain_model(3, 3, 8);
    for ep in &episodes {
        assert_eq!(ep.supports.len(), 5);
        let out = run_zfs_episode(ep, &model, ShotMode::Shots(5)).unwrap();
        assert!(out.iou >= 0.9, "5-shot IoU {}", out.iou);
    }
}

#[test]
fn separable_gfs_is_perfect() {
    // noise 0 and a fresh pass-through model: every supported class scores 1
    let s = spec(0.0, 17);
    let reg = registry();
    let episodes = gfs_episodes(&s, &reg, 2, 1, 3, 23).unwrap();
    let model = sum_chain_model(3, 3, 8);
    for ep in &episodes {
        let out = run_gfs_episode(ep, &model).unwrap();
        for (class, iou) in &out.report.per_class_iou {
            assert_eq!(*iou, 1.0, "class {class}");
        }
    }
}

#[test]
fn gfs_matches_direct_argmax_over_same_bank() {
    // protocol plumbing vs composing the forward pass by hand
    let s = spec(0.2, 5);
    let reg = registry();
    let episode = &gfs_episodes(&s, &reg, 1, 1, 3, 31).unwrap()[0];
    let model = ModelParams::init(3, 3, 8, 8, 2);
    let out = run_gfs_episode(episode, &model).unwrap();

    let classes = vec![ClassId(0), ClassId(1), ClassId(2), ClassId(3)];
    let inputs = pipeline::prepare_episode(
        &classes,
        ClassId(0),
        &episode.records,
        &episode.supports,
        &episode.query.pyramid,
        episode.n,
        episode.seed,
    )
    .unwrap();
    let fwd = pipeline::forward(&inputs, &model).unwrap();
    let direct: Vec<ClassId> = fwd
        .final_probs
        .argmax_map()
        .into_iter()
        .map(|i| classes[i])
        .collect();
    assert_eq!(out.predicted, direct);
}

#[test]
fn zero_shot_episode_uses_text_only() {
    // single level, zero noise: the name embedding equals the class mean, so
    // the dot product decides every pixel and exact ties fall to the
    // background, which comes first in the bank
    let mut s = spec(0.0, 8);
    s.levels = 1;
    let reg = registry();
    let scene = gen_scene(&s).unwrap();
    let target = ClassId(1);
    let episode = EpisodeSpec {
        registry: reg,
        records: scene.records.clone(),
        supports: vec![],
        query: QueryScene {
            pyramid: scene.pyramid.clone(),
            gt: scene.gt.clone(),
        },
        protocol: Protocol::ZeroFewShot { target },
        n: 3,
        seed: 2,
    };
    let model = sum_chain_model(3, 1, 8);
    let out = run_zfs_episode(&episode, &model, ShotMode::Zero).unwrap();
    assert_eq!(out.iou, 1.0, "zero-shot IoU {}", out.iou);
}
