//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --test acceptance`.

use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use demo_core::atmoe::GatingMode;
use demo_core::backbone::TokenSet;
use demo_core::data::{generate_synthetic, ImageStack, LoadedDataset, ModalBatch, SynthSpec};
use demo_core::evaluation::evaluate_distances;
use demo_core::hdm::{build_keys_bimodal, build_keys_trimodal, build_keys_unimodal, DecoupledSet, Slot, N_DECOUPLED};
use demo_core::losses::{ce_label_smooth, triplet_batch_hard};
use demo_core::modality::Modality;
use demo_core::model::{build_model, Model, ModelConfig, Preset};
use demo_core::oracles::{self, AtmoeWeights, AttentionWeights, OracleReport};
use demo_core::params::ParamStore;
use demo_core::pife::FusedFeature;
use demo_core::sweep::{ablation_cells, run_ablation, Matrix};
use demo_core::tensor::Tensor;
use demo_core::trainer::{evaluate_split, split_indices, RunConfig, Trainer};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_batch(rng: &mut ChaCha8Rng, ids: &[usize], h: usize, w: usize) -> ModalBatch {
    let n = ids.len();
    let stacks = [0, 1, 2].map(|_| ImageStack {
        count: n,
        channels: 3,
        height: h,
        width: w,
        data: (0..n * 3 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect(),
    });
    ModalBatch::new(stacks, ids.to_vec(), (0..n).map(|i| i % 2).collect()).unwrap()
}

/// Give every batch-norm buffer non-trivial running statistics so eval-mode
/// comparisons exercise the normalisation.
fn randomize_buffers(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.trainable).map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let var = name.ends_with("running_var");
        for x in store.value_mut(id).data_mut() {
            *x = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.5..0.5) };
        }
    }
}

fn grad_model() -> ModelConfig {
    let mut cfg = ModelConfig::toy().preset(Preset::E);
    cfg.encoder.image_height = 8;
    cfg.encoder.image_width = 8;
    cfg
}

const GRAD_TOL: f64 = 1e-4;

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let cfg = grad_model();
    let mut model = build_model(&cfg, 2).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    randomize_buffers(&mut model.store, &mut rng);
    let batch = random_batch(&mut rng, &[0, 0, 1, 1], 8, 8);
    let entries = oracles::model_gradient_check(&model, &batch, &[0, 0, 1, 1], 1e-5).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();
    let worst = entries.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).expect("parameters");
    let bad = entries.iter().filter(|e| !(e.rel_err() < GRAD_TOL)).count();
    let tensors: std::collections::BTreeSet<&str> = entries.iter().map(|e| e.param.as_str()).collect();
    check(bad == 0, || {
        format!("{bad}/{} scalars over {GRAD_TOL:e}; worst {}[{}] analytic {:e} numeric {:?}", entries.len(), worst.param, worst.index, worst.analytic, worst.numeric)
    })?;
    check(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} scalars in {} tensors, max rel err {:.2e}, {:.1}s",
        entries.len(),
        tensors.len(),
        worst.rel_err(),
        elapsed.as_secs_f64()
    ))
}

fn c2_gates() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rows = 0;
    for case in 0..1000 {
        let heads = [1, 2, 4, 8][case % 4];
        let mut cfg = ModelConfig::toy();
        cfg.moe_heads = heads;
        cfg.encoder.seed = case as u64;
        let model = build_model(&cfg, 2).map_err(|e| e.to_string())?;
        let atmoe = model.net.atmoe.as_ref().expect("atmoe");
        // decoupled features sit at roughly unit scale; far larger inputs
        // push float64 softmax entries to exactly 0 or 1
        let scale = rng.random_range(0.1..3.0);
        let normal = rand_distr::Normal::new(0.0, scale).expect("valid scale");
        let d = DecoupledSet::new((0..N_DECOUPLED).map(|_| (0..8).map(|_| rng.sample(normal)).collect()).collect())
            .map_err(|e| e.to_string())?;
        let dq = atmoe.reduce_query(&model.store, &d).map_err(|e| e.to_string())?;
        let gate = atmoe.gate(&model.store, &dq, &d).map_err(|e| e.to_string())?;
        for h in 0..gate.heads {
            let r = gate.row(h);
            let s: f64 = r.iter().sum();
            check((s - 1.0).abs() <= 1e-6, || format!("case {case} head {h} sums to {s}"))?;
            check(r.iter().all(|&x| x > 0.0 && x < 1.0), || format!("case {case} head {h} entries {r:?}"))?;
            rows += 1;
        }
    }
    Ok(format!("{rows} gate rows over 1000 inputs"))
}

fn token_set(rng: &mut ChaCha8Rng, m: Modality, np: usize, c: usize) -> (FusedFeature, TokenSet) {
    let tokens = TokenSet {
        patch_tokens: Tensor::from_vec([1, np, c], (0..np * c).map(|_| rng.random_range(-1.0..1.0)).collect()),
        class_token: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        modality: m,
    };
    let f = FusedFeature {
        f: (0..c).map(|_| rng.random_range(-1.0..1.0)).collect(),
        modality: m,
    };
    (f, tokens)
}

fn c3_structure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let configs = 60;
    for case in 0..configs {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let c = heads * rng.random_range(1..=4usize) * 2;
        let patch = [2, 4][rng.random_range(0..2)];
        let (gr, gc) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let mut cfg = ModelConfig::toy();
        cfg.encoder.embed_dim = c;
        cfg.encoder.num_heads = heads;
        cfg.encoder.patch_size = patch;
        cfg.encoder.image_height = gr * patch;
        cfg.encoder.image_width = gc * patch;
        cfg.encoder.seed = case;
        cfg.moe_heads = heads;
        let np = gr * gc;
        let model = build_model(&cfg, 3).map_err(|e| format!("case {case}: {e}"))?;
        let hdm = model.net.hdm.as_ref().expect("hdm");
        let parts: Vec<(FusedFeature, TokenSet)> = Modality::ALL.iter().map(|&m| token_set(&mut rng, m, np, c)).collect();
        let p = |i: usize| (&parts[i].0, &parts[i].1);
        let uni = build_keys_unimodal(&parts[0].0, &parts[0].1).map_err(|e| e.to_string())?;
        let bi = build_keys_bimodal(Slot::RN, p(0), p(1)).map_err(|e| e.to_string())?;
        let tri = build_keys_trimodal([p(0), p(1), p(2)]).map_err(|e| e.to_string())?;
        check((uni.rows(), bi.rows(), tri.rows()) == (np + 1, 2 * np + 2, 3 * np + 3), || {
            format!("case {case}: key rows {} {} {} for N_p={np}", uni.rows(), bi.rows(), tri.rows())
        })?;
        let tokens = [[parts[0].1.clone(), parts[1].1.clone(), parts[2].1.clone()]];
        let fused = [[parts[0].0.clone(), parts[1].0.clone(), parts[2].0.clone()]];
        let d = hdm.decouple(&model.store, &tokens, &fused, &[[true; 3]]).map_err(|e| e.to_string())?;
        check(d[0].features.len() == N_DECOUPLED && d[0].dim() == c, || format!("case {case}: decoupled arity {}", d[0].features.len()))?;
        let n = rng.random_range(1..=3usize);
        let batch = random_batch(&mut rng, &(0..n).collect::<Vec<_>>(), cfg.encoder.image_height, cfg.encoder.image_width);
        let desc = model.descriptors(&batch).map_err(|e| e.to_string())?;
        check(desc.cols() == N_DECOUPLED * c + 3 * c && desc.rows() == n, || format!("case {case}: E descriptor {}", desc.cols()))?;
        let d_model = build_model(&cfg.clone().preset(Preset::D), 3).map_err(|e| e.to_string())?;
        let final_dim = d_model.descriptors(&batch).map_err(|e| e.to_string())?.cols();
        check(final_dim == N_DECOUPLED * c, || format!("case {case}: final dim {final_dim}"))?;
    }
    Ok(format!("{configs} random configurations"))
}

fn c4_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut report = OracleReport::default();
    let mut worst_map = 0.0f64;
    for case in 0..100 {
        let nq = rng.random_range(1..8usize);
        let ng = rng.random_range(2..20usize);
        let nid = rng.random_range(1..5usize);
        let q_ids: Vec<usize> = (0..nq).map(|_| rng.random_range(0..nid)).collect();
        let q_cams: Vec<usize> = (0..nq).map(|_| rng.random_range(0..3)).collect();
        let g_ids: Vec<usize> = (0..ng).map(|_| rng.random_range(0..nid)).collect();
        let g_cams: Vec<usize> = (0..ng).map(|_| rng.random_range(0..3)).collect();
        // coarse values so ties occur
        let dist: Vec<Vec<f64>> = (0..nq).map(|_| (0..ng).map(|_| rng.random_range(0..6) as f64 * 0.5).collect()).collect();
        let oracle = oracles::oracle_map_cmc(&dist, &q_ids, &q_cams, &g_ids, &g_cams);
        let imp = evaluate_distances(&dist, &q_ids, &q_cams, &g_ids, &g_cams);
        match (oracle, imp) {
            (None, Err(_)) => {}
            (Some((m, cmc)), Ok(r)) => {
                worst_map = worst_map.max((m - r.map).abs());
                report.record("mAP", case, m, r.map, 1e-9);
                check((m - r.map).abs() <= 1e-9, || format!("retrieval case {case}: mAP {m} vs {}", r.map))?;
                let dev = cmc.iter().zip(&r.cmc).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                check(dev <= 1e-9 && cmc.len() == r.cmc.len(), || format!("retrieval case {case}: CMC off by {dev}"))?;
            }
            (o, i) => return Err(format!("retrieval case {case}: oracle {o:?} vs implementation {:?}", i.map(|r| r.map))),
        }
    }

    for case in 0..100 {
        let p = rng.random_range(2..5usize);
        let k = rng.random_range(2..4usize);
        let dim = rng.random_range(1..6usize);
        let labels: Vec<usize> = (0..p * k).map(|i| i / k).collect();
        let emb: Vec<Vec<f64>> = labels.iter().map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let margin = rng.random_range(0.0..1.0);
        let o = oracles::oracle_triplet(&emb, &labels, margin).expect("valid batch");
        let i = triplet_batch_hard(&emb, &labels, margin).map_err(|e| e.to_string())?;
        report.record("triplet", case, o, i, 0.0);
        check(o == i, || format!("triplet case {case}: oracle {o:e} vs implementation {i:e}"))?;
    }

    let mut worst_attn = 0.0f64;
    let mut worst_moe = 0.0f64;
    for case in 0..100 {
        let heads = [1, 2, 4][case % 3];
        let mut cfg = ModelConfig::toy();
        cfg.encoder.num_heads = heads;
        cfg.encoder.embed_dim = 8;
        cfg.moe_heads = [1, 2, 4, 8][case % 4];
        cfg.encoder.seed = 1000 + case as u64;
        let mut model = build_model(&cfg, 2).map_err(|e| e.to_string())?;
        randomize_buffers(&mut model.store, &mut rng);
        let hdm = model.net.hdm.as_ref().expect("hdm");
        let level = case % 3;
        let w = AttentionWeights::from_store(&model.store, hdm.level_attention(level).expect("level"));
        let nk = rng.random_range(1..12usize);
        let keys: Vec<Vec<f64>> = (0..nk).map(|_| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let query: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let key_t = Tensor::from_vec([1, nk, 8], keys.iter().flatten().copied().collect());
        let imp = hdm.cross_attend(&model.store, level, &query, &key_t).map_err(|e| e.to_string())?;
        let ora = oracles::oracle_attention(&query, &keys, &w);
        for (a, b) in ora.iter().zip(&imp) {
            report.record("attention", case, *a, *b, 1e-9);
        }
        let dev = imp.iter().zip(&ora).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst_attn = worst_attn.max(dev);
        check(dev <= 1e-9, || format!("attention case {case}: deviation {dev:e}"))?;

        let atmoe = model.net.atmoe.as_ref().expect("atmoe");
        let aw = AtmoeWeights::from_store(&model.store, atmoe).expect("attention gating");
        let d = DecoupledSet::new((0..N_DECOUPLED).map(|_| (0..8).map(|_| rng.random_range(-1.5..1.5)).collect()).collect())
            .map_err(|e| e.to_string())?;
        let (f, gate) = atmoe.forward_single(&model.store, &d).map_err(|e| e.to_string())?;
        let gate = gate.expect("gate");
        let (of, og) = oracles::oracle_atmoe(&d.features, &aw);
        for (a, b) in of.iter().zip(&f) {
            report.record("atmoe", case, *a, *b, 1e-9);
        }
        let mut dev = f.iter().zip(&of).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        for (h, row) in og.iter().enumerate() {
            dev = dev.max(row.iter().zip(gate.row(h)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        worst_moe = worst_moe.max(dev);
        check(dev <= 1e-9 && f.len() == of.len(), || format!("ATMoE case {case}: deviation {dev:e}"))?;
    }
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("oracle_report.tsv");
    std::fs::write(&path, report.to_tsv()).map_err(|e| e.to_string())?;
    check(report.all_pass(), || format!("{} report rows fail", report.failures().len()))?;
    Ok(format!(
        "100 retrieval (max mAP dev {worst_map:.1e}), 100 triplet (bitwise), 100 attention (max dev {worst_attn:.1e}), 100 ATMoE (max dev {worst_moe:.1e})"
    ))
}

fn c5_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let b = rng.random_range(1..6usize);
        let k = rng.random_range(2..10usize);
        let eps = [0.0, 0.1, rng.random_range(0.0..1.0)][case % 3];
        let logits: Vec<Vec<f64>> = (0..b).map(|_| (0..k).map(|_| rng.random_range(-8.0..8.0)).collect()).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let t = Tensor::from_vec([1, b, k], logits.iter().flatten().copied().collect());
        let imp = ce_label_smooth(&t, &labels, eps).map_err(|e| e.to_string())?;
        let ora = oracles::oracle_smoothed_ce(&logits, &labels, eps);
        worst = worst.max((imp - ora).abs());
        check((imp - ora).abs() <= 1e-7, || format!("case {case}: {imp} vs {ora}"))?;
    }
    for k in 2..20usize {
        let c = rng.random_range(-5.0..5.0);
        let t = Tensor::from_vec([1, 2, k], vec![c; 2 * k]);
        let v = ce_label_smooth(&t, &[0, k - 1], 0.1).map_err(|e| e.to_string())?;
        check((v - (k as f64).ln()).abs() <= 1e-9, || format!("uniform K={k}: {v}"))?;
    }
    Ok(format!("200 randomized cases (max dev {worst:.1e}), uniform logits K=2..19"))
}

fn synth_data(spec: &SynthSpec) -> (tempfile::TempDir, LoadedDataset) {
    let dir = tempfile::tempdir().expect("tempdir");
    generate_synthetic(spec, dir.path()).expect("synthetic data");
    let ds = LoadedDataset::open(dir.path()).expect("load");
    (dir, ds)
}

fn overfit_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelConfig::toy(),
        ..RunConfig::default()
    };
    cfg.model.encoder.seed = seed;
    cfg.train.seed = seed;
    cfg.train.epochs = 0;
    cfg.train.max_steps = 200;
    cfg.train.p = 8;
    cfg.train.k = 4;
    cfg.train.base_lr = 1e-3;
    cfg.train.encoder_lr = 1e-3;
    cfg.train.eval_every = 0;
    // every instance trains; retrieval is scored on the training set
    cfg.train.val_per_identity = 0;
    cfg
}

fn train_and_score(cfg: &RunConfig, data: &LoadedDataset) -> Result<(Trainer, f64, f64), String> {
    let mut t = Trainer::new(cfg, data).map_err(|e| e.to_string())?;
    t.run(data, None).map_err(|e| e.to_string())?;
    let (train, _) = split_indices(data, 0).map_err(|e| e.to_string())?;
    let r = evaluate_split(&t.model, data, &train, &train, &[], &cfg.eval, 64).map_err(|e| e.to_string())?;
    let r1 = r.rank(1);
    Ok((t, r.map, r1))
}

fn c6_overfit() -> Outcome {
    let t0 = Instant::now();
    let (_dir, data) = synth_data(&SynthSpec::default());
    let (t, map, r1) = train_and_score(&overfit_config(0), &data)?;
    let elapsed = t0.elapsed();
    check(t.step == 200, || format!("ran {} steps", t.step))?;
    check(r1 >= 0.9 && map >= 0.8, || format!("Rank-1 {r1:.3}, mAP {map:.3}"))?;
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "Rank-1 {r1:.3}, mAP {map:.3}, final loss {:.3}, {:.1}s",
        t.log.last().map_or(f64::NAN, |l| l.loss.total),
        elapsed.as_secs_f64()
    ))
}

fn masked_map(model: &Model, data: &LoadedDataset, missing: &[Modality]) -> Result<f64, String> {
    let (train, _) = split_indices(data, 0).map_err(|e| e.to_string())?;
    let r = evaluate_split(model, data, &train, &train, missing, &Default::default(), 64).map_err(|e| e.to_string())?;
    Ok(r.map)
}

fn c7_missing() -> Outcome {
    let mut drops_t = Vec::new();
    let mut drops_r = Vec::new();
    for seed in 0..3u64 {
        let spec = SynthSpec {
            signal_rgb: 0.0,
            signal_nir: 0.0,
            signal_tir: 1.0,
            seed,
            ..SynthSpec::default()
        };
        let (_dir, data) = synth_data(&spec);
        let (t, full, _) = train_and_score(&overfit_config(seed), &data)?;
        drops_t.push(full - masked_map(&t.model, &data, &[Modality::Tir])?);
        drops_r.push(full - masked_map(&t.model, &data, &[Modality::Rgb])?);
    }
    let mt = drops_t.iter().sum::<f64>() / 3.0;
    let mr = drops_r.iter().sum::<f64>() / 3.0;
    check(mt > mr, || format!("mean mAP drop masking TIR {mt:.3} vs RGB {mr:.3}"))?;
    Ok(format!("mean mAP drop masking TIR {mt:.3} > masking RGB {mr:.3} (3 seeds)"))
}

fn c8_ablations() -> Outcome {
    let spec = SynthSpec {
        num_identities: 4,
        instances_per_identity: 4,
        ..SynthSpec::default()
    };
    let (_dir, data) = synth_data(&spec);
    let mut base = RunConfig {
        model: ModelConfig::toy(),
        ..RunConfig::default()
    };
    base.train.epochs = 0;
    base.train.max_steps = 10;
    base.train.p = 2;
    base.train.k = 2;
    base.train.eval_every = 0;
    let mut total = 0;
    for m in Matrix::ALL {
        let rows = run_ablation(&ablation_cells(m, &base), &data);
        for r in &rows {
            check(r.error.is_none() && r.steps >= 10 && r.map.is_some(), || format!("{} / {}: {:?} after {} steps", m.name(), r.name, r.error, r.steps))?;
        }
        if m == Matrix::Models {
            let p: Vec<usize> = rows.iter().map(|r| r.params.expect("params")).collect();
            check(p[0] < p[1] && p[1] < p[2] && p[2] < p[3], || format!("parameter counts {p:?}"))?;
        }
        total += rows.len();
    }
    let gating_heads: Vec<usize> = ablation_cells(Matrix::Gating, &base)
        .iter()
        .filter(|c| c.config.model.gating == GatingMode::Attention)
        .map(|c| c.config.model.moe_heads)
        .collect();
    check(gating_heads == [1, 2, 4, 8], || format!("gating heads {gating_heads:?}"))?;
    Ok(format!("{total} cells trained 10 steps and evaluated"))
}

fn c9_determinism() -> Outcome {
    let (_dir, data) = synth_data(&SynthSpec::default());
    let (a, map_a, _) = train_and_score(&overfit_config(0), &data)?;
    let (b, map_b, _) = train_and_score(&overfit_config(0), &data)?;
    let la: Vec<u64> = a.log.iter().map(|l| l.loss.total.to_bits()).collect();
    let lb: Vec<u64> = b.log.iter().map(|l| l.loss.total.to_bits()).collect();
    check(la == lb, || "loss trajectories differ".into())?;
    check(a.log == b.log, || "per-term loss logs differ".into())?;
    check(map_a.to_bits() == map_b.to_bits(), || format!("mAP {map_a} vs {map_b}"))?;
    Ok(format!("{} identical steps, mAP {map_a:.6} both runs", la.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient suite", c1_gradients),
        ("2 gate normalization", c2_gates),
        ("3 structural invariants", c3_structure),
        ("4 oracle equivalence", c4_oracles),
        ("5 loss formulas", c5_losses),
        ("6 overfit smoke test", c6_overfit),
        ("7 missing-modality property", c7_missing),
        ("8 ablation runnability", c8_ablations),
        ("9 determinism", c9_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
