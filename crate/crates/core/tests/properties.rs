use std::collections::BTreeMap;

use proptest::prelude::*;

use demo_core::archive::Archive;
use demo_core::config::parse_config;
use demo_core::data::{mask_modalities, pk_sample, ImageStack, ModalBatch};
use demo_core::evaluation::{evaluate, evaluate_distances, EvalOptions, FeatureSet};
use demo_core::losses::triplet_batch_hard;
use demo_core::modality::Modality;
use demo_core::model::{build_model, Model, ModelConfig, Preset};
use demo_core::oracles;

fn batch_from(pixels: &[f64], n: usize) -> ModalBatch {
    let len = 3 * 16 * 8;
    let stacks = [0, 1, 2].map(|m| ImageStack {
        count: n,
        channels: 3,
        height: 16,
        width: 8,
        data: (0..n * len).map(|i| pixels[(i * 7 + m * 13) % pixels.len()]).collect(),
    });
    ModalBatch::new(stacks, (0..n).collect(), vec![0; n]).unwrap()
}

fn toy(preset: Preset, seed: u64) -> Model {
    let mut cfg = ModelConfig::toy().preset(preset);
    cfg.encoder.seed = seed;
    build_model(&cfg, 3).unwrap()
}

fn retrieval_case() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    (1usize..6, 2usize..12).prop_flat_map(|(nq, ng)| {
        (
            prop::collection::vec(prop::collection::vec(0u8..5, ng), nq),
            prop::collection::vec(0usize..3, nq),
            prop::collection::vec(0usize..2, nq),
            prop::collection::vec(0usize..3, ng),
            prop::collection::vec(0usize..2, ng),
        )
            .prop_map(|(d, qi, qc, gi, gc)| {
                let d = d.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
                (d, qi, qc, gi, gc)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn retrieval_matches_oracle_and_is_bounded((d, qi, qc, gi, gc) in retrieval_case()) {
        let oracle = oracles::oracle_map_cmc(&d, &qi, &qc, &gi, &gc);
        match evaluate_distances(&d, &qi, &qc, &gi, &gc) {
            Ok(r) => {
                let (m, cmc) = oracle.expect("oracle agrees a query is valid");
                prop_assert!((r.map - m).abs() <= 1e-12);
                prop_assert!(r.map > 0.0 && r.map <= 1.0);
                prop_assert!(r.cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*r.cmc.last().unwrap(), 1.0);
                prop_assert_eq!(r.cmc, cmc);
            }
            Err(_) => prop_assert!(oracle.is_none()),
        }
    }

    #[test]
    fn renaming_identities_keeps_metrics((d, qi, qc, gi, gc) in retrieval_case(), shift in 1usize..50) {
        let a = evaluate_distances(&d, &qi, &qc, &gi, &gc);
        let ren = |v: &[usize]| v.iter().map(|x| (x + shift) * 3).collect::<Vec<_>>();
        let b = evaluate_distances(&d, &ren(&qi), &qc, &ren(&gi), &gc);
        match (a, b) {
            (Ok(a), Ok(b)) => prop_assert_eq!((a.map, a.cmc), (b.map, b.cmc)),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "validity changed under renaming"),
        }
    }

    #[test]
    fn triplet_matches_oracle(
        emb in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 6),
        margin in 0.0f64..2.0,
    ) {
        let labels = [0, 0, 1, 1, 2, 2];
        let v = triplet_batch_hard(&emb, &labels, margin).unwrap();
        prop_assert_eq!(v, oracles::oracle_triplet(&emb, &labels, margin).unwrap());
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn pk_batches_are_balanced(sizes in prop::collection::vec(1usize..6, 2..8), p in 1usize..4, k in 1usize..5, seed in 0u64..1000, epoch in 0usize..4) {
        let mut groups = BTreeMap::new();
        let mut next = 0;
        for (id, n) in sizes.iter().enumerate() {
            groups.insert(id * 10, (next..next + n).collect::<Vec<usize>>());
            next += n;
        }
        let owner = |i: usize| groups.iter().find(|(_, v)| v.contains(&i)).map(|(&id, _)| id).unwrap();
        match pk_sample(&groups, p, k, seed, epoch) {
            Ok(batches) => {
                prop_assert_eq!(batches.len(), sizes.len() / p);
                for b in &batches {
                    prop_assert_eq!(b.len(), p * k);
                    let mut per: BTreeMap<usize, usize> = BTreeMap::new();
                    for &i in b {
                        *per.entry(owner(i)).or_default() += 1;
                    }
                    prop_assert_eq!(per.len(), p);
                    prop_assert!(per.values().all(|&c| c == k));
                }
                prop_assert_eq!(pk_sample(&groups, p, k, seed, epoch).unwrap(), batches);
            }
            Err(_) => prop_assert!(sizes.len() < p),
        }
    }

    #[test]
    fn unknown_override_keys_are_rejected(key in "[a-z]{3,8}", section in prop::sample::select(vec!["model", "train", "augment", "eval"])) {
        let known = ["epochs", "seed", "enabled", "metric", "normalize", "gating", "pooling", "experts"];
        prop_assume!(!known.contains(&key.as_str()));
        let r = parse_config("", &[format!("{section}.{key}=1")]);
        let unknown = r.is_err();
        // keys that do exist are the only acceptable successes
        if !unknown {
            let t: toml::Table = toml::from_str(&demo_core::config::to_toml(&Default::default())).unwrap();
            prop_assert!(t[section].as_table().unwrap().contains_key(&key));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn masked_pixels_do_not_leak(pixels in prop::collection::vec(-1.0f64..1.0, 97), other in prop::collection::vec(-1.0f64..1.0, 89), seed in 0u64..100) {
        let model = toy(Preset::E, seed);
        let a = batch_from(&pixels, 2);
        let mut b = a.clone();
        let len = b.images[0].data.len();
        b.images[Modality::Rgb.index()].data = (0..len).map(|i| other[i % other.len()]).collect();
        let da = model.descriptors(&mask_modalities(&a, &[Modality::Rgb]).unwrap()).unwrap();
        let db = model.descriptors(&mask_modalities(&b, &[Modality::Rgb]).unwrap()).unwrap();
        prop_assert_eq!(da, db);
    }

    #[test]
    fn descriptors_are_per_instance(pixels in prop::collection::vec(-1.0f64..1.0, 101), preset in prop::sample::select(Preset::ALL.to_vec())) {
        // eval mode: an instance's descriptor does not depend on its batch mates
        let model = toy(preset, 3);
        let pair = batch_from(&pixels, 3);
        let d3 = model.descriptors(&pair).unwrap();
        let first = ModalBatch::new(
            [0, 1, 2].map(|m| ImageStack { count: 1, data: pair.images[m].image(0).to_vec(), ..pair.images[m].clone() }),
            vec![0],
            vec![0],
        ).unwrap();
        let d1 = model.descriptors(&first).unwrap();
        for (x, y) in d1.row(0, 0).iter().zip(d3.row(0, 0)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        prop_assert_eq!(d3.cols(), model.config.descriptor_dim());
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, pixels in prop::collection::vec(-1.0f64..1.0, 53)) {
        let model = toy(Preset::E, seed);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.to_archive().save(&path).unwrap();
        let back = Model::from_archive(&Archive::load(&path).unwrap()).unwrap();
        let b = batch_from(&pixels, 2);
        prop_assert_eq!(model.descriptors(&b).unwrap(), back.descriptors(&b).unwrap());
        prop_assert_eq!(model.config.fingerprint(), back.config.fingerprint());
    }
}

#[test]
fn identical_features_at_other_cameras_retrieve_perfectly() {
    let feats: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, (i * i) as f64, 1.0]).collect();
    let q = FeatureSet::new(feats.clone(), (0..5).collect(), vec![0; 5]).unwrap();
    let g = FeatureSet::new(feats, (0..5).collect(), vec![1; 5]).unwrap();
    let r = evaluate(&q, &g, &EvalOptions::default()).unwrap();
    assert_eq!((r.map, r.rank(1)), (1.0, 1.0));
}
