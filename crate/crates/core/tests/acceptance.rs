//! Acceptance suite: ten criteria, one pass/fail line each. Every criterion
//! runs even if an earlier one fails; the test panics at the end if any
//! criterion failed, listing which.

use std::time::Instant;

use bkdp_core::analyzer::layerwise_decision_table;
use bkdp_core::archspec::parse;
use bkdp_core::catalog;
use bkdp_core::clipping::{ghost_norm_sq, instantiate_per_sample_grads, ClipFn, ClipMode};
use bkdp_core::engine::{
    add_noise, naive_oracle_grad, private_step, synth_targets, GradAccumulator, ImplKind,
    PrivacyParams, StepReport,
};
use bkdp_core::graph::{forward, Batch, Graph, ParamId};
use bkdp_core::tensor::{im2col, uniform, ConvGeom};
use bkdp_core::{OpCounters, SeededRng, Tensor};

type Check = std::result::Result<(), String>;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-30)
}

fn build(name: &str, seed: u64) -> Graph {
    Graph::build(catalog::build(name, None).unwrap(), &mut SeededRng::new(seed)).unwrap()
}

fn run(
    graph: &Graph,
    batch: &Batch,
    targets: &Tensor,
    kind: ImplKind,
    clip: ClipFn,
    sigma: f64,
) -> (StepReport, OpCounters) {
    let privacy = PrivacyParams { clip, sigma, unit_modes: None };
    let mut counters = OpCounters::new();
    let mut nrng = SeededRng::new(999);
    let report = private_step(graph, batch, targets, kind, &privacy, &mut nrng, &mut counters)
        .expect("step runs");
    (report, counters)
}

const DP_KINDS: [ImplKind; 10] = [
    ImplKind::Naive,
    ImplKind::Opacus,
    ImplKind::OpacusImproved,
    ImplKind::FastGradClip,
    ImplKind::FastGradClipImproved,
    ImplKind::GhostClip,
    ImplKind::MixGhostClip,
    ImplKind::Bk,
    ImplKind::BkMixGhostClip,
    ImplKind::BkMixOpt,
];

/// 1. Oracle equivalence on five architectures, B in {1,2,4,8}, all ten DP
/// kinds, norms and clipped sums within 1e-8 relative, under 30 s.
fn criterion_1() -> Check {
    let start = Instant::now();
    let clip = ClipFn::abadi(1.0).unwrap();
    for name in ["mlp:3x64", "cnn-small", "embed-mlp", "lora-mlp", "adapter-mlp"] {
        let graph = build(name, 17);
        for b in [1usize, 2, 4, 8] {
            let mut rng = SeededRng::new(1000 + b as u64);
            let batch = Batch::synth(&graph.spec, b, &mut rng);
            let targets = synth_targets(&graph, b, &mut rng).unwrap();
            let (norms, gsum) = naive_oracle_grad(&graph, &batch, &targets, clip)
                .map_err(|e| format!("{name} B={b}: oracle failed: {e}"))?;
            for kind in DP_KINDS {
                let (rep, _) = run(&graph, &batch, &targets, kind, clip, 0.0);
                for (n, m) in rep.per_sample_norms.iter().zip(norms.iter()) {
                    if rel(*n, *m) >= 1e-8 {
                        return Err(format!("{name} B={b} {kind}: norm {n} vs oracle {m}"));
                    }
                }
                for ((ida, a), (idb, want)) in rep.grads.iter().zip(gsum.iter()) {
                    if ida != idb {
                        return Err(format!("{name} B={b} {kind}: parameter order differs"));
                    }
                    let scale = want.data.iter().map(|x| x.abs()).fold(1e-12_f64, f64::max);
                    for (x, y) in a.data.iter().zip(want.data.iter()) {
                        if (x - y).abs() / scale >= 1e-8 {
                            return Err(format!(
                                "{name} B={b} {kind}: grad {ida} deviates by {}",
                                (x - y).abs() / scale
                            ));
                        }
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 30.0 {
        return Err(format!("took {elapsed:.1}s, budget is 30s"));
    }
    Ok(())
}

/// 2. Ghost-norm correctness over 200 random pairs, plus the conv path.
fn criterion_2() -> Check {
    let mut rng = SeededRng::new(2);
    let mut scratch = OpCounters::new();
    for case in 0..200 {
        let b = 1 + rng.uniform_usize(4);
        let t = 1 + rng.uniform_usize(6);
        let d = 1 + rng.uniform_usize(8);
        let p = 1 + rng.uniform_usize(8);
        let a = uniform(&[b, t, d], 1.0, &mut rng);
        let ds = uniform(&[b, t, p], 1.0, &mut rng);
        let ghost = ghost_norm_sq(&a, &ds, &mut scratch).unwrap();
        let inst = instantiate_per_sample_grads(&a, &ds, &mut scratch).unwrap();
        for i in 0..b {
            let direct: f64 =
                inst.data[i * d * p..(i + 1) * d * p].iter().map(|x| x * x).sum();
            if rel(ghost.data[i], direct) >= 1e-10 {
                return Err(format!("case {case}: ghost {} vs direct {}", ghost.data[i], direct));
            }
        }
    }
    // conv path: the lowered im2col activation feeds the same identity
    let geom = ConvGeom { kh: 3, kw: 3, stride: 1, pad: 1, dilation: 1 };
    let img = uniform(&[2, 3, 5, 5], 1.0, &mut rng);
    let a = im2col(&img, 3, 5, 5, geom).unwrap(); // 2 x 25 x 27
    let ds = uniform(&[2, 25, 4], 1.0, &mut rng);
    let ghost = ghost_norm_sq(&a, &ds, &mut scratch).unwrap();
    let inst = instantiate_per_sample_grads(&a, &ds, &mut scratch).unwrap();
    let per = inst.numel() / 2;
    for i in 0..2 {
        let direct: f64 = inst.data[i * per..(i + 1) * per].iter().map(|x| x * x).sum();
        if rel(ghost.data[i], direct) >= 1e-10 {
            return Err(format!("conv path sample {i}: {} vs {}", ghost.data[i], direct));
        }
    }
    Ok(())
}

/// 3. Published complexity-table totals within 5%, spot rows exact.
fn criterion_3() -> Check {
    let within = |got: u128, want: f64, what: &str| -> Check {
        if (got as f64 - want).abs() > 0.05 * want {
            return Err(format!("{what}: {got} not within 5% of {want}"));
        }
        Ok(())
    };
    let r18 = layerwise_decision_table(&catalog::build("resnet18", None).unwrap()).unwrap();
    within(r18.mixed_total, 1.0e6, "resnet18 mixed")?;
    within(r18.inst_total, 11.5e6, "resnet18 inst")?;
    within(r18.ghost_total, 399e6, "resnet18 ghost")?;
    let r34 = layerwise_decision_table(&catalog::build("resnet34", None).unwrap()).unwrap();
    within(r34.mixed_total, 2.3e6, "resnet34 mixed")?;
    within(r34.inst_total, 21.6e6, "resnet34 inst")?;
    within(r34.ghost_total, 444e6, "resnet34 ghost")?;
    let r50 = layerwise_decision_table(&catalog::build("resnet50", None).unwrap()).unwrap();
    within(r50.mixed_total, 2.8e6, "resnet50 mixed")?;
    within(r50.inst_total, 22.7e6, "resnet50 inst")?;
    within(r50.ghost_total, 528e6, "resnet50 ghost")?;
    if r18.rows[0].ghost_space != 314_703_872 || r18.rows[0].inst_space != 9_408 {
        return Err(format!(
            "stem conv row: ghost {} pd {}",
            r18.rows[0].ghost_space, r18.rows[0].inst_space
        ));
    }
    if r18.rows.last().unwrap().ghost_space != 2 {
        return Err("classifier row ghost space is not 2".into());
    }
    Ok(())
}

/// 4. Decision-rule golden pattern at 224, strictly deeper flip at 512.
fn criterion_4() -> Check {
    let r224 = layerwise_decision_table(&catalog::build("resnet18", Some(224)).unwrap()).unwrap();
    for (i, row) in r224.rows.iter().enumerate() {
        let want = if i < 9 { ClipMode::Instantiate } else { ClipMode::Ghost };
        if row.decision != want {
            return Err(format!("@224 row {i} ({}) chose {:?}", row.label, row.decision));
        }
    }
    let r512 = layerwise_decision_table(&catalog::build("resnet18", Some(512)).unwrap()).unwrap();
    let inst224 = r224.rows.iter().filter(|r| r.decision == ClipMode::Instantiate).count();
    let inst512 = r512.rows.iter().filter(|r| r.decision == ClipMode::Instantiate).count();
    if inst512 <= inst224 {
        return Err(format!("@512 flip point not deeper: {inst512} vs {inst224} instantiate rows"));
    }
    Ok(())
}

/// 5. Measured mul-add ratios on the deep MLP at B = 16.
fn criterion_5() -> Check {
    let start = Instant::now();
    let graph = build("mlp:10x1000", 5);
    let b = 16;
    let mut rng = SeededRng::new(55);
    let batch = Batch::synth(&graph.spec, b, &mut rng);
    let targets = synth_targets(&graph, b, &mut rng).unwrap();
    let clip = ClipFn::abadi(1.0).unwrap();
    let ops = |kind: ImplKind| run(&graph, &batch, &targets, kind, clip, 0.0).1.mul_adds as f64;
    let non_dp = ops(ImplKind::NonDp);
    let bk = ops(ImplKind::Bk);
    let ghost = ops(ImplKind::GhostClip);
    let opacus = ops(ImplKind::Opacus);
    let mut problems = Vec::new();
    if bk / non_dp > 1.10 {
        problems.push(format!("bk/non_dp = {:.3} > 1.10", bk / non_dp));
    }
    if !(1.45..=1.90).contains(&(ghost / bk)) {
        problems.push(format!("ghost_clip/bk = {:.3} outside [1.45, 1.90]", ghost / bk));
    }
    if !(1.20..=1.45).contains(&(opacus / non_dp)) {
        problems.push(format!("opacus/non_dp = {:.3} outside [1.20, 1.45]", opacus / non_dp));
    }
    let elapsed = start.elapsed().as_secs_f64();
    if elapsed >= 60.0 {
        problems.push(format!("took {elapsed:.1}s, budget is 60s"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// 6. Peak-memory ordering and the book-keeping overhead on the deep MLP at
/// B = 128.
fn criterion_6() -> Check {
    let graph = build("mlp:10x1000", 6);
    let b = 128;
    let mut rng = SeededRng::new(66);
    let batch = Batch::synth(&graph.spec, b, &mut rng);
    let targets = synth_targets(&graph, b, &mut rng).unwrap();
    let clip = ClipFn::abadi(1.0).unwrap();
    let peak =
        |kind: ImplKind| run(&graph, &batch, &targets, kind, clip, 0.0).1.peak_live_bytes as f64;
    let non_dp = peak(ImplKind::NonDp);
    let bk = peak(ImplKind::Bk);
    let ghost = peak(ImplKind::GhostClip);
    let opacus = peak(ImplKind::Opacus);
    let mut problems = Vec::new();
    if opacus < 5.0 * bk {
        problems.push(format!("opacus peak {opacus} < 5x bk peak {bk}"));
    }
    if (bk - ghost).abs() > 0.10 * bk {
        problems.push(format!("|bk - ghost_clip| = {} > 10% of bk {bk}", (bk - ghost).abs()));
    }
    // predicted book-keeping overhead: sum over layers of min{2BT^2, Bpd}
    let units = graph.spec.units().unwrap();
    let predicted_scalars: u128 = units
        .iter()
        .map(|u| (2 * b as u128 * (u.t * u.t) as u128).min((b * u.p * u.d) as u128))
        .sum();
    let predicted = 8.0 * predicted_scalars as f64;
    let overhead = bk - non_dp;
    if (overhead - predicted).abs() > 0.20 * predicted {
        problems.push(format!(
            "bk - non_dp overhead {overhead} not within 20% of predicted {predicted}"
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(problems.join("; "))
    }
}

/// 7. Backward-pass counts per kind, exactly.
fn criterion_7() -> Check {
    let graph = build("mlp:3x64", 7);
    let b = 5;
    let mut rng = SeededRng::new(77);
    let batch = Batch::synth(&graph.spec, b, &mut rng);
    let targets = synth_targets(&graph, b, &mut rng).unwrap();
    let clip = ClipFn::abadi(1.0).unwrap();
    let expected = |kind: ImplKind| -> u64 {
        match kind {
            ImplKind::Naive => b as u64,
            ImplKind::FastGradClip | ImplKind::GhostClip | ImplKind::MixGhostClip => 2,
            _ => 1,
        }
    };
    for kind in bkdp_core::engine::ALL_KINDS {
        let (rep, _) = run(&graph, &batch, &targets, kind, clip, 0.0);
        if rep.backward_passes != expected(kind) {
            return Err(format!(
                "{kind}: {} backward passes, expected {}",
                rep.backward_passes,
                expected(kind)
            ));
        }
    }
    Ok(())
}

/// 8. Noise calibration: sigma=2, R=0.5 over >= 1e5 coordinates.
fn criterion_8() -> Check {
    let mut g = Tensor::zeros(&[100_000]);
    let mut rng = SeededRng::new(8);
    let mut c = OpCounters::new();
    add_noise(&mut g, 2.0, 0.5, &mut rng, &mut c).unwrap();
    let n = g.numel() as f64;
    let mean = g.data.iter().sum::<f64>() / n;
    let std = (g.data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    if (std - 1.0).abs() > 0.05 {
        return Err(format!("empirical std {std} not within 5% of 1.0"));
    }
    let mut h = uniform(&[1000], 1.0, &mut rng);
    let before = h.data.clone();
    add_noise(&mut h, 0.0, 0.5, &mut rng, &mut c).unwrap();
    if h.data != before {
        return Err("sigma=0 changed the gradient".into());
    }
    Ok(())
}

/// 9. Full-model central finite differences on a random 3-layer MLP.
fn criterion_9() -> Check {
    let spec = parse(
        "fd-mlp",
        "input flat 5\nlinear in=5 out=4\ntanh\nlinear in=4 out=4\ntanh\nlinear in=4 out=3\n",
    )
    .unwrap();
    let mut graph = Graph::build(spec, &mut SeededRng::new(9)).unwrap();
    let b = 2;
    let mut rng = SeededRng::new(99);
    let batch = Batch::synth(&graph.spec, b, &mut rng);
    let targets = synth_targets(&graph, b, &mut rng).unwrap();
    // analytic gradient of the summed loss: the non-DP step returns the
    // plain per-parameter gradient sums
    let clip = ClipFn::abadi(1.0).unwrap();
    let (rep, _) = run(&graph, &batch, &targets, ImplKind::NonDp, clip, 0.0);
    let analytic: Vec<(ParamId, Tensor)> = rep.grads;

    let total_loss = |g: &Graph| -> f64 {
        let mut c = OpCounters::new();
        let (l, _) = forward(g, &batch, &targets, &mut c).unwrap();
        l.data.iter().sum()
    };
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (id, grad) in &analytic {
        for j in 0..grad.numel() {
            let orig = graph.param(*id).unwrap().data[j];
            graph.param_mut(*id).unwrap().data[j] = orig + eps;
            let up = total_loss(&graph);
            graph.param_mut(*id).unwrap().data[j] = orig - eps;
            let down = total_loss(&graph);
            graph.param_mut(*id).unwrap().data[j] = orig;
            let fd = (up - down) / (2.0 * eps);
            worst = worst.max((fd - grad.data[j]).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("max abs deviation {worst} > 1e-6"));
    }
    Ok(())
}

/// 10. Two microbatches of 2 equal one batch of 4, sigma = 0, to 1e-12.
fn criterion_10() -> Check {
    let graph = build("mlp:3x64", 10);
    let mut rng = SeededRng::new(110);
    let batch = Batch::synth(&graph.spec, 4, &mut rng);
    let targets = synth_targets(&graph, 4, &mut rng).unwrap();
    let clip = ClipFn::abadi(0.9).unwrap();
    let (full, _) = run(&graph, &batch, &targets, ImplKind::Bk, clip, 0.0);

    let mut acc = GradAccumulator::new();
    let per = targets.numel() / 4;
    let sample_stride = match &batch {
        Batch::Dense(t) => t.numel() / 4,
        _ => unreachable!(),
    };
    for half in 0..2 {
        let (sub, tt) = match &batch {
            Batch::Dense(t) => {
                let mut shape = t.shape.clone();
                shape[0] = 2;
                let data =
                    t.data[2 * half * sample_stride..(2 * half + 2) * sample_stride].to_vec();
                let mut tshape = targets.shape.clone();
                tshape[0] = 2;
                let tdata = targets.data[2 * half * per..(2 * half + 2) * per].to_vec();
                (
                    Batch::Dense(Tensor::from_vec(&shape, data).unwrap()),
                    Tensor::from_vec(&tshape, tdata).unwrap(),
                )
            }
            _ => unreachable!(),
        };
        let (rep, _) = run(&graph, &sub, &tt, ImplKind::Bk, clip, 0.0);
        acc.add(&rep).map_err(|e| e.to_string())?;
    }
    let mut c = OpCounters::new();
    let mut nrng = SeededRng::new(1);
    let (summed, samples) = acc.finish(clip, 0.0, &mut nrng, &mut c).map_err(|e| e.to_string())?;
    if samples != 4 {
        return Err(format!("accumulated {samples} samples, expected 4"));
    }
    for ((ida, a), (idb, want)) in summed.iter().zip(full.grads.iter()) {
        if ida != idb {
            return Err("parameter order differs".into());
        }
        let scale = want.data.iter().map(|x| x.abs()).fold(1e-30_f64, f64::max);
        for (x, y) in a.data.iter().zip(want.data.iter()) {
            if (x - y).abs() / scale >= 1e-12 {
                return Err(format!("{ida}: deviation {}", (x - y).abs() / scale));
            }
        }
    }
    Ok(())
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("oracle equivalence across architectures, batch sizes, and kinds", criterion_1),
        ("ghost norms equal instantiated norms, incl. the conv path", criterion_2),
        ("published complexity totals within 5%, spot rows exact", criterion_3),
        ("decision-rule golden pattern and depth shift", criterion_4),
        ("measured mul-add ratios on the deep MLP", criterion_5),
        ("peak-memory ordering and book-keeping overhead", criterion_6),
        ("backward-pass counts per kind", criterion_7),
        ("Gaussian noise calibration", criterion_8),
        ("full-model finite-difference gradients", criterion_9),
        ("microbatch accumulation equals one batch", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, (desc, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        match f() {
            Ok(()) => println!("PASS criterion {id}: {desc}"),
            Err(e) => {
                println!("FAIL criterion {id}: {desc} — {e}");
                failed.push(id);
            }
        }
    }
    assert!(failed.is_empty(), "failed acceptance criteria: {failed:?}");
}
