//! Acceptance checks AC1-AC9. Runs as a plain binary (`harness = false`) so
//! every criterion prints exactly one PASS/FAIL/SKIP line; the process fails
//! if any criterion fails.
//!
//! Run alone with `cargo test -p roimask-cli --test acceptance`.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roimask::atlas::{mask_ratio, region_voxels, GroupingTable, RegionName};
use roimask::harness::{
    load_dataset, read_report, reconstruction_loss, run_experiment, DataSpec, ExperimentConfig,
};
use roimask::io::nifti::{read_labels, read_volume, write_volume, NiftiError};
use roimask::io::VolumeFormat;
use roimask::mae::{masked_mse, pretrain, LossScope, MaeModel, PatchSpec, Sample, TrainConfig};
use roimask::masking::{
    apply_mask, generate_mask, window_selection, MaskContext, MaskKind, MaskStrategy,
};
use roimask::preprocess::{align_atlas_to_grid, atlas_on_preprocessed_grid, PreprocessConfig};
use roimask::probe::{auc_counts, aucroc, head_loss_and_grad, split_subjects, HeadConfig};
use roimask::synth::{self, PhantomConfig};
use roimask::volume::{Affine, Mask3D, Mask4D};
use roimask::{Error, GridDims, LabelVolume, Volume4D};

// Tolerances, fixed up front.
const AC3_H: f64 = 1e-3;
const AC3_MODEL_TOL: f64 = 1e-4;
const AC3_HEAD_H: f64 = 1e-6;
const AC3_HEAD_TOL: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
const AC3_FLOOR: f64 = 1e-6;
const AC4_CASES: u64 = 100;
const AC5_INSTANCES: u64 = 50;
const AC5_LOSS_TOL: f64 = 1e-9;
const AC2_REPEATS: usize = 5;
/// Desk-scale step size for the directional run; the 20-epoch budget at
/// 5e-5 leaves the encoder at its initialization.
const AC2_LR: f64 = 1e-3;
const AC2_BATCH: usize = 4;
const AC8_FRONTAL_COUNT: f64 = 53_985.0;
const AC8_COUNT_REL_TOL: f64 = 0.02;
const AC8_FRONTAL_PERCENT: f64 = 29.06;
const AC8_PERCENT_TOL: f64 = 0.6;
const RECON_TOL: f64 = 1e-9;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

fn run(id: &str, title: &str, f: impl FnOnce() -> Verdict) -> bool {
    let start = Instant::now();
    let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Verdict::Fail(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match verdict {
        Verdict::Pass(d) => ("PASS", d, true),
        Verdict::Fail(d) => ("FAIL", d, false),
        Verdict::Skip(d) => ("SKIP", d, true),
    };
    println!("{id} {tag} [{title}] {detail} ({secs:.1}s)");
    ok
}

fn main() {
    let results = [
        run("AC1", "scope", ac1),
        run("AC2", "directional synthetic benchmark", ac2),
        run("AC3", "gradient correctness", ac3),
        run("AC4", "mask properties", ac4),
        run("AC5", "oracle equivalence", ac5),
        run("AC6", "pipeline determinism", ac6),
        run("AC7", "NIfTI IO", ac7),
        run("AC8", "AAL3 frontal-lobe count", ac8),
        run("AC9", "training progress", ac9),
    ];
    let failed = results.iter().filter(|ok| !**ok).count();
    println!(
        "acceptance: {} of {} criteria passed or skipped",
        results.len() - failed,
        results.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

fn ac1() -> Verdict {
    Verdict::Pass(
        "absolute values from the full-scale study are not targeted; AC2-AC9 stand in".into(),
    )
}

// ---------------------------------------------------------------- AC2

fn benchmark_dir(tmp: &Path) -> PathBuf {
    let dir = tmp.join("bench");
    synth::write_dataset(&PhantomConfig::default(), &dir, VolumeFormat::V4d).unwrap();
    dir
}

fn benchmark_spec(dir: &Path) -> DataSpec {
    let mut spec = DataSpec::new(dir);
    spec.atlas = Some(dir.join(synth::ATLAS_FILE));
    spec.grouping = Some(dir.join(synth::GROUPING_FILE));
    spec.preprocess = Some(PreprocessConfig {
        target_shape: [16, 16, 16],
        ..Default::default()
    });
    spec
}

fn ac2() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dir = benchmark_dir(tmp.path());
    let random = "random-tube:0.1";
    let roi = "roi:limbic:1";
    let cfg = ExperimentConfig {
        data: benchmark_spec(&dir),
        strategies: vec![random.into(), roi.into()],
        train: TrainConfig {
            batch_size: AC2_BATCH,
            lr: AC2_LR,
            ..Default::default()
        },
        probe: HeadConfig::default(),
        out_dir: tmp.path().join("out"),
        seed: 1,
        repeats: AC2_REPEATS,
    };
    let report = run_experiment(&cfg).unwrap();
    if !report.all_succeeded() {
        return Verdict::Fail(format!("cells failed: {:?}", report.failures));
    }
    let (r, o) = (
        report.aggregate(random).unwrap(),
        report.aggregate(roi).unwrap(),
    );
    let auc = |a: &roimask::harness::Aggregate| a.auc.as_ref().map_or(f64::NAN, |s| s.mean);
    let (auc_r, auc_o) = (auc(r), auc(o));
    let acc_ok = o.acc.mean >= r.acc.mean;
    let auc_ok = auc_r > 0.5 && auc_o > 0.5;
    check(
        acc_ok && auc_ok,
        format!(
            "{} seeds, test n={}: ROI ACC {:.4} vs random-tube {:.4} (need >=: {}); AUC ROI {:.4}, random-tube {:.4} (need both > 0.5: {})",
            AC2_REPEATS,
            report.split[2],
            o.acc.mean,
            r.acc.mean,
            acc_ok,
            auc_o,
            auc_r,
            auc_ok
        ),
    )
}

// ---------------------------------------------------------------- AC3

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(AC3_FLOOR)
}

fn ac3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dims = GridDims::new(4, 4, 4, 2).unwrap();
    let patch = [2, 2, 2, 2];
    let spec = PatchSpec::new(dims, patch).unwrap();
    let mut worst_model = 0.0f64;
    let mut checked = 0usize;
    for trial in 0..3 {
        let mut m32 = MaeModel::<f32>::new(patch, 6, 3, trial).unwrap();
        // nonzero biases so every path is exercised
        for t in m32.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.2f32..0.2);
            }
        }
        let model = m32.cast::<f64>();
        let target = Volume4D::new(
            dims,
            (0..dims.len())
                .map(|_| rng.random_range(-1.5..1.5))
                .collect(),
        )
        .unwrap();
        let bits: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(0.4)).collect();
        let mask = Mask4D::from_bits(dims, bits).unwrap();
        let input = apply_mask(&target, &mask, 0.0).unwrap();
        let (_, grads) = model
            .loss_and_gradients(&input, &target, &mask, &spec, LossScope::Masked)
            .unwrap();
        let loss_at = |m: &MaeModel<f64>| {
            masked_mse(&m.forward(&input, &spec).unwrap(), &target, &mask).unwrap()
        };
        for ti in 0..grads.tensors.len() {
            for j in 0..grads.tensors[ti].len() {
                let mut plus = model.clone();
                plus.tensors_mut()[ti][j] += AC3_H;
                let mut minus = model.clone();
                minus.tensors_mut()[ti][j] -= AC3_H;
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * AC3_H);
                worst_model = worst_model.max(rel_err(grads.tensors[ti][j], fd));
                checked += 1;
            }
        }
    }

    let mut worst_head = 0.0f64;
    for _ in 0..5 {
        let x: Vec<Vec<f64>> = (0..24)
            .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let y: Vec<u8> = (0..24).map(|i| (i % 2) as u8).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = rng.random_range(-0.5..0.5);
        let l2 = 0.1;
        let (_, gw, gb) = head_loss_and_grad(&w, b, &x, &y, l2);
        for j in 0..w.len() {
            let mut p = w.clone();
            p[j] += AC3_HEAD_H;
            let mut q = w.clone();
            q[j] -= AC3_HEAD_H;
            let fd = (head_loss_and_grad(&p, b, &x, &y, l2).0
                - head_loss_and_grad(&q, b, &x, &y, l2).0)
                / (2.0 * AC3_HEAD_H);
            worst_head = worst_head.max(rel_err(gw[j], fd));
        }
        let fd = (head_loss_and_grad(&w, b + AC3_HEAD_H, &x, &y, l2).0
            - head_loss_and_grad(&w, b - AC3_HEAD_H, &x, &y, l2).0)
            / (2.0 * AC3_HEAD_H);
        worst_head = worst_head.max(rel_err(gb, fd));
    }
    check(
        worst_model < AC3_MODEL_TOL && worst_head < AC3_HEAD_TOL,
        format!(
            "model: {checked} parameters, max rel err {worst_model:.2e} (< {AC3_MODEL_TOL:.0e}); head: max rel err {worst_head:.2e} (< {AC3_HEAD_TOL:.0e})"
        ),
    )
}

// ---------------------------------------------------------------- AC4 / AC5 helpers

fn random_dims(rng: &mut ChaCha8Rng, max_t: usize) -> GridDims {
    GridDims::new(
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(2..=8),
        rng.random_range(1..=max_t),
    )
    .unwrap()
}

fn random_brain(rng: &mut ChaCha8Rng, dims: GridDims) -> Mask3D {
    let mut bits: Vec<bool> = (0..dims.n_spatial())
        .map(|_| rng.random_bool(0.7))
        .collect();
    bits[0] = true;
    Mask3D::from_bits(dims.to_spatial(), bits).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, dims: GridDims) -> LabelVolume {
    LabelVolume::new(
        dims.to_spatial(),
        (0..dims.n_spatial())
            .map(|_| rng.random_range(0..=7))
            .collect(),
    )
    .unwrap()
}

fn round_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64).round() as usize
}

// ---------------------------------------------------------------- AC4

fn ac4() -> Verdict {
    let grouping = synth::phantom_grouping(7).unwrap();
    let mut violations = Vec::new();
    let mut kinds = [0usize; 4];
    for case in 0..AC4_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC4_0000 + case);
        let dims = random_dims(&mut rng, 5);
        let brain = random_brain(&mut rng, dims);
        let labels = random_labels(&mut rng, dims);
        let regions: Vec<(RegionName, Vec<usize>)> = RegionName::ALL
            .iter()
            .map(|&g| {
                let r = region_voxels(&labels, grouping.resolve(g).unwrap());
                (g, r.indices().filter(|&i| brain.get_index(i)).collect())
            })
            .collect();
        let which = (case % 4) as usize;
        kinds[which] += 1;
        let kind = match which {
            0 => MaskKind::RandomRandom {
                ratio: rng.random_range(0.05..0.95),
            },
            1 => MaskKind::RandomTube {
                ratio: rng.random_range(0.05..0.95),
            },
            2 => MaskKind::WindowRandom {
                block: [
                    rng.random_range(1..=3),
                    rng.random_range(1..=3),
                    rng.random_range(1..=3),
                ],
                ratio: rng.random_range(0.05..0.95),
                frame_prob: rng.random_range(0.2..=1.0),
            },
            _ => {
                let present: Vec<&(RegionName, Vec<usize>)> =
                    regions.iter().filter(|(_, v)| !v.is_empty()).collect();
                let mut groups: Vec<RegionName> = present
                    .iter()
                    .filter(|_| rng.random_bool(0.5))
                    .map(|(g, _)| *g)
                    .collect();
                if groups.is_empty() {
                    groups.push(present[0].0);
                }
                let mut fraction = if rng.random_bool(0.5) {
                    1.0
                } else {
                    rng.random_range(0.2..1.0)
                };
                let tiny = groups.iter().any(|g| {
                    let n = regions.iter().find(|(r, _)| r == g).unwrap().1.len();
                    round_count(fraction, n) == 0
                });
                if tiny {
                    fraction = 1.0;
                }
                MaskKind::RoiTube { groups, fraction }
            }
        };
        let strategy = MaskStrategy::new(kind.clone(), rng.random()).unwrap();
        let ctx = MaskContext::with_atlas(&brain, &labels, &grouping);
        let mask = match generate_mask(&strategy, dims, &ctx) {
            Ok(m) => m,
            Err(e) => {
                violations.push(format!("case {case}: {e}"));
                continue;
            }
        };
        let mut fail = |what: &str| violations.push(format!("case {case} {kind}: {what}"));

        // determinism
        if generate_mask(&strategy, dims, &ctx).unwrap() != mask {
            fail("not deterministic");
        }
        // exact count
        let foot = mask.footprint();
        match &kind {
            MaskKind::RandomRandom { ratio } => {
                if mask.count() != round_count(*ratio, dims.len()) {
                    fail("count");
                }
            }
            MaskKind::RandomTube { ratio } => {
                if foot.count() != round_count(*ratio, dims.n_spatial()) {
                    fail("count");
                }
            }
            MaskKind::WindowRandom { ratio, .. } => {
                let target = round_count(*ratio, dims.n_spatial());
                let blocks = window_selection(&strategy, dims).unwrap();
                let sizes: Vec<usize> = blocks.iter().map(|b| b.len()).collect();
                let total: usize = sizes.iter().sum();
                if total < target || total - sizes.last().unwrap() >= target {
                    fail("block cover count");
                }
                for i in foot.indices() {
                    let (x, y, z, _) = dims.to_spatial().coords(i).unwrap();
                    if !blocks.iter().any(|b| b.contains(x, y, z)) {
                        fail("voxel outside chosen blocks");
                        break;
                    }
                }
                // each block is all-or-nothing per frame
                for b in &blocks {
                    for t in 0..dims.nt {
                        let frame = mask.frame(t);
                        let on: Vec<bool> = (0..dims.n_spatial())
                            .filter(|&i| {
                                let (x, y, z, _) = dims.to_spatial().coords(i).unwrap();
                                b.contains(x, y, z)
                            })
                            .map(|i| frame[i])
                            .collect();
                        if on.iter().any(|&v| v) && !on.iter().all(|&v| v) {
                            fail("partial block frame");
                        }
                    }
                }
            }
            MaskKind::RoiTube { groups, fraction } => {
                let want: usize = groups
                    .iter()
                    .map(|g| {
                        let n = regions.iter().find(|(r, _)| r == g).unwrap().1.len();
                        if *fraction >= 1.0 {
                            n
                        } else {
                            round_count(*fraction, n)
                        }
                    })
                    .sum();
                if foot.count() != want {
                    fail("count");
                }
                // containment
                let allowed: Vec<usize> = groups
                    .iter()
                    .flat_map(|g| regions.iter().find(|(r, _)| r == g).unwrap().1.clone())
                    .collect();
                if foot.indices().any(|i| !allowed.contains(&i)) {
                    fail("voxel outside region ∩ brain");
                }
            }
        }
        // tube invariance
        if kind.is_tube() {
            let f0 = mask.frame(0).to_vec();
            if (1..dims.nt).any(|t| mask.frame(t) != f0.as_slice()) {
                fail("frames differ");
            }
        }
    }
    check(
        violations.is_empty(),
        format!(
            "{AC4_CASES} cases (random-random {}, random-tube {}, window-random {}, roi {}), {} violations{}",
            kinds[0],
            kinds[1],
            kinds[2],
            kinds[3],
            violations.len(),
            violations.first().map(|v| format!("; first: {v}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- AC5

fn ac5() -> Verdict {
    let grouping = synth::phantom_grouping(7).unwrap();
    let mut errors: Vec<String> = Vec::new();
    let mut worst_loss = 0.0f64;
    for inst in 0..AC5_INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(0xAC5_0000 + inst);

        // masked_mse
        let dims = random_dims(&mut rng, 4);
        let a: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let b: Vec<f64> = (0..dims.len())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        let mut bits: Vec<bool> = (0..dims.len()).map(|_| rng.random_bool(0.3)).collect();
        bits[0] = true;
        let (mut s, mut n) = (0.0, 0usize);
        for i in 0..bits.len() {
            if bits[i] {
                s += (a[i] - b[i]) * (a[i] - b[i]);
                n += 1;
            }
        }
        let got = masked_mse(
            &Volume4D::new(dims, a).unwrap(),
            &Volume4D::new(dims, b).unwrap(),
            &Mask4D::from_bits(dims, bits).unwrap(),
        )
        .unwrap();
        worst_loss = worst_loss.max((got - s / n as f64).abs());

        // AUC by pair counting, with ties
        let m = rng.random_range(2..=40);
        let scores: Vec<f64> = (0..m).map(|_| rng.random_range(0..6) as f64).collect();
        let mut labels: Vec<u8> = (0..m).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut wins, mut ties, mut pairs) = (0u64, 0u64, 0u64);
        for i in 0..m {
            for j in 0..m {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        wins += 1;
                    } else if scores[i] == scores[j] {
                        ties += 1;
                    }
                }
            }
        }
        let c = auc_counts(&scores, &labels).unwrap();
        if c.wins != wins || c.ties != ties || c.pos * c.neg != pairs {
            errors.push(format!("auc counts {inst}"));
        }
        let brute = (wins as f64 + 0.5 * ties as f64) / pairs as f64;
        if aucroc(&scores, &labels).unwrap() != Some(brute) {
            errors.push(format!("auc value {inst}"));
        }

        // brain-mask popcount
        let dims = random_dims(&mut rng, 4);
        let dead: Vec<bool> = (0..dims.n_spatial())
            .map(|_| rng.random_bool(0.4))
            .collect();
        let data: Vec<f32> = (0..dims.len())
            .map(|i| {
                if dead[i % dims.n_spatial()] || rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random_range(-5.0..5.0)
                }
            })
            .collect();
        let want = (0..dims.n_spatial())
            .filter(|&v| (0..dims.nt).any(|t| data[t * dims.n_spatial() + v] != 0.0))
            .count();
        let vol = Volume4D::new(dims, data).unwrap();
        if vol.brain_mask().count() != want {
            errors.push(format!("brain popcount {inst}"));
        }

        // mask_ratio
        let labels3 = random_labels(&mut rng, dims);
        let brain = random_brain(&mut rng, dims);
        let group = grouping
            .resolve(RegionName::ALL[inst as usize % 7])
            .unwrap();
        let ids: Vec<u16> = group.label_ids.iter().copied().collect();
        let count = (0..dims.n_spatial())
            .filter(|&i| brain.get_index(i) && ids.contains(&labels3.labels()[i]))
            .count();
        let brain_n = (0..dims.n_spatial())
            .filter(|&i| brain.get_index(i))
            .count();
        let r = mask_ratio(&labels3, group, &brain).unwrap();
        if r.voxel_count != count || r.percent_of_brain != 100.0 * count as f64 / brain_n as f64 {
            errors.push(format!("mask_ratio {inst}"));
        }

        // nearest-neighbour atlas alignment
        let ad = random_dims(&mut rng, 1);
        let atlas_spacing = [0, 1, 2].map(|_| rng.random_range(0.7..2.5));
        let mut atlas_aff = Affine::identity();
        for a in 0..3 {
            atlas_aff[(a, a)] = atlas_spacing[a];
            atlas_aff[(a, 3)] = rng.random_range(-3.0..3.0);
        }
        let atlas = LabelVolume::with_metadata(
            ad,
            atlas_spacing,
            atlas_aff,
            (0..ad.n_spatial())
                .map(|_| rng.random_range(1..200))
                .collect(),
        )
        .unwrap();
        let td = random_dims(&mut rng, 1);
        let t_spacing = [0, 1, 2].map(|_| rng.random_range(0.7..2.5));
        let mut t_aff = Affine::identity();
        for a in 0..3 {
            let flip = if rng.random_bool(0.3) { -1.0 } else { 1.0 };
            t_aff[(a, a)] = flip * t_spacing[a];
            t_aff[(a, 3)] = rng.random_range(-3.0..8.0);
        }
        let got = align_atlas_to_grid(&atlas, td, t_spacing, &t_aff).unwrap();
        let inv = atlas_aff.try_inverse().unwrap();
        for i in 0..td.n_spatial() {
            let (x, y, z, _) = td.coords(i).unwrap();
            let p = inv * t_aff * nalgebra::Vector4::new(x as f64, y as f64, z as f64, 1.0);
            // closest atlas voxel centre by exhaustive search
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..ad.n_spatial() {
                let (ax, ay, az, _) = ad.coords(j).unwrap();
                let d = (p[0] - ax as f64).powi(2)
                    + (p[1] - ay as f64).powi(2)
                    + (p[2] - az as f64).powi(2);
                if d < best.0 {
                    best = (d, j);
                }
            }
            let (bx, by, bz, _) = ad.coords(best.1).unwrap();
            let inside = (p[0] - bx as f64).abs() <= 0.5
                && (p[1] - by as f64).abs() <= 0.5
                && (p[2] - bz as f64).abs() <= 0.5;
            let want = if inside { atlas.labels()[best.1] } else { 0 };
            if got.labels()[i] != want {
                errors.push(format!("alignment {inst} voxel {i}"));
                break;
            }
        }
    }
    if worst_loss > AC5_LOSS_TOL {
        errors.push(format!("masked_mse max abs err {worst_loss:.2e}"));
    }
    check(
        errors.is_empty(),
        format!(
            "{AC5_INSTANCES} instances each of masked_mse (max abs err {worst_loss:.1e}), AUC pair counts, brain popcount, mask_ratio, NN alignment; {} mismatches{}",
            errors.len(),
            errors.first().map(|e| format!("; first: {e}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- AC6

fn ac6() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let phantom = PhantomConfig {
        dims: [8, 8, 8, 16],
        margin: 1,
        n_subjects_per_class: 6,
        ..Default::default()
    };
    synth::write_dataset(&phantom, &data, VolumeFormat::V4d).unwrap();
    let config = tmp.path().join("exp.toml");
    fs::write(
        &config,
        r#"data_dir = "data"
atlas = "data/atlas.nii"
grouping = "data/grouping.txt"
strategies = ["random-tube:0.1", "roi:limbic:1", "window-random:2x2x2:0.2"]
out_dir = "out"
seed = 11
repeats = 2

[train]
epochs = 3
batch_size = 4
lr = 1e-3
"#,
    )
    .unwrap();
    let exe = env!("CARGO_BIN_EXE_roimask");
    let mut csv = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(exe)
            .args(["experiment", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .env("ROIMASK_WORKERS", if run == "a" { "1" } else { "3" })
            .output()
            .unwrap();
        if !status.status.success() {
            return Verdict::Fail(format!(
                "run {run} exited {:?}: {}",
                status.status.code(),
                String::from_utf8_lossy(&status.stderr)
            ));
        }
        csv.push(fs::read(out.join("report.csv")).unwrap());
    }
    let identical = csv[0] == csv[1];

    // every row's loss is recomputable from the saved model and logged seed
    let cfg = ExperimentConfig::load(&config).unwrap();
    let report = read_report(tmp.path().join("a/report.json")).unwrap();
    let ds = load_dataset(&cfg.data, cfg.train.patch, true).unwrap();
    let split = split_subjects(&ds.ids, cfg.split_seed()).unwrap();
    let eval: Vec<usize> = split
        .test
        .iter()
        .map(|id| ds.index_of(id).unwrap())
        .collect();
    let mut worst = 0.0f64;
    for row in &report.rows {
        let model =
            MaeModel::<f32>::load(tmp.path().join("a/models").join(&row.model_file)).unwrap();
        let strategy = MaskStrategy::parse(&row.strategy, row.seed).unwrap();
        let loss = reconstruction_loss(&model, &ds, &eval, &strategy, row.eval_mask_seed).unwrap();
        worst = worst.max((loss - row.recon_loss).abs());
    }
    check(
        identical && worst <= RECON_TOL && report.rows.len() == 6,
        format!(
            "two CLI runs ({} rows, 1 vs 3 workers) byte-identical CSV: {identical}; recon loss recomputed from saved models max abs diff {worst:.1e}",
            report.rows.len()
        ),
    )
}

// ---------------------------------------------------------------- AC7

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn ac7() -> Verdict {
    let mut problems = Vec::new();
    let tmp = tempfile::tempdir().unwrap();
    for name in [
        "golden_f32_le.nii",
        "golden_f64_be.nii",
        "scaled_i16_be.nii",
        "golden_f32_le.nii.gz",
    ] {
        let v: Volume4D<f32> = read_volume(fixture(name)).unwrap();
        let p = tmp.path().join("rt.nii");
        write_volume(&v, &p).unwrap();
        let back: Volume4D<f32> = read_volume(&p).unwrap();
        let same = back.dims() == v.dims()
            && back
                .data()
                .iter()
                .zip(v.data())
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            problems.push(format!("round trip {name}"));
        }
    }
    let mut swapped = 0;
    for (le, be) in [
        ("golden_f32_le.nii", "golden_f32_be.nii"),
        ("golden_f64_le.nii", "golden_f64_be.nii"),
        ("scaled_i16_le.nii", "scaled_i16_be.nii"),
    ] {
        let a: Volume4D<f64> = read_volume(fixture(le)).unwrap();
        let b: Volume4D<f64> = read_volume(fixture(be)).unwrap();
        if a != b {
            problems.push(format!("{le} != {be}"));
        }
        swapped += 1;
    }
    for (le, be) in [
        ("atlas_u8_le.nii", "atlas_u8_be.nii"),
        ("atlas_u16_le.nii", "atlas_u16_be.nii"),
    ] {
        if read_labels(fixture(le)).unwrap() != read_labels(fixture(be)).unwrap() {
            problems.push(format!("{le} != {be}"));
        }
        swapped += 1;
    }
    let variant = |r: Result<(), Error>| match r {
        Err(Error::Nifti(e)) => format!("{e:?}")
            .split([' ', '{'])
            .next()
            .unwrap()
            .to_string(),
        Err(other) => format!("non-NIfTI error {other}"),
        Ok(()) => "no error".into(),
    };
    let volume = |n: &str| read_volume::<f32>(fixture(n)).map(|_| ());
    let labels = |n: &str| read_labels(fixture(n)).map(|_| ());
    let cases: [(&str, &str, bool); 14] = [
        ("bad_header_truncated.nii", "HeaderTruncated", true),
        ("bad_sizeof_hdr.nii", "BadSizeofHdr", true),
        ("bad_nifti2.nii", "Nifti2Unsupported", true),
        ("bad_magic.nii", "BadMagic", true),
        ("bad_paired.nii", "PairedUnsupported", true),
        ("bad_rank.nii", "UnsupportedRank", true),
        ("bad_dim.nii", "BadDim", true),
        ("bad_datatype.nii", "UnsupportedDatatype", true),
        ("bad_vox_offset.nii", "BadVoxOffset", true),
        ("bad_extension.nii", "ExtensionsUnsupported", true),
        ("bad_data_truncated.nii", "DataTruncated", true),
        ("bad_float_labels.nii", "FloatLabels", false),
        ("bad_negative_label.nii", "NegativeLabel", false),
        ("bad_label_frames.nii", "LabelFrames", false),
    ];
    // keeps the table in step with the enum
    let _exhaustive = |e: NiftiError| match e {
        NiftiError::HeaderTruncated { .. }
        | NiftiError::BadSizeofHdr { .. }
        | NiftiError::Nifti2Unsupported
        | NiftiError::BadMagic { .. }
        | NiftiError::PairedUnsupported
        | NiftiError::UnsupportedRank { .. }
        | NiftiError::BadDim { .. }
        | NiftiError::UnsupportedDatatype { .. }
        | NiftiError::BadVoxOffset { .. }
        | NiftiError::ExtensionsUnsupported { .. }
        | NiftiError::DataTruncated { .. }
        | NiftiError::FloatLabels { .. }
        | NiftiError::NegativeLabel { .. }
        | NiftiError::LabelFrames { .. } => (),
    };
    for (name, want, as_volume) in cases {
        let got = variant(if as_volume {
            volume(name)
        } else {
            labels(name)
        });
        if got != want {
            problems.push(format!("{name}: expected {want}, got {got}"));
        }
    }
    check(
        problems.is_empty(),
        format!(
            "4 bit-exact round trips, {swapped} byte-swapped pairs, {} malformed fixtures; {} problems{}",
            cases.len(),
            problems.len(),
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    )
}

// ---------------------------------------------------------------- AC8

fn ac8() -> Verdict {
    let Ok(path) = std::env::var("ROIMASK_AAL3") else {
        return Verdict::Skip("set ROIMASK_AAL3 to the official AAL3 NIfTI to run".into());
    };
    let atlas = read_labels(&path).unwrap();
    let aligned = atlas_on_preprocessed_grid(&atlas, &PreprocessConfig::default()).unwrap();
    let brain = aligned.foreground();
    let table = GroupingTable::default_aal3();
    let r = mask_ratio(
        &aligned,
        table.resolve(RegionName::FrontalLobe).unwrap(),
        &brain,
    )
    .unwrap();
    let count_ok =
        ((r.voxel_count as f64 - AC8_FRONTAL_COUNT) / AC8_FRONTAL_COUNT).abs() <= AC8_COUNT_REL_TOL;
    let pct_ok = (r.percent_of_brain - AC8_FRONTAL_PERCENT).abs() <= AC8_PERCENT_TOL;
    check(
        count_ok && pct_ok,
        format!(
            "frontal lobe {} voxels (target {AC8_FRONTAL_COUNT} ±{}%), {:.2}% of brain (target {AC8_FRONTAL_PERCENT} ±{AC8_PERCENT_TOL})",
            r.voxel_count,
            AC8_COUNT_REL_TOL * 100.0,
            r.percent_of_brain
        ),
    )
}

// ---------------------------------------------------------------- AC9

fn ac9() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let dir = benchmark_dir(tmp.path());
    let defaults = TrainConfig::default();
    let ds = load_dataset(&benchmark_spec(&dir), defaults.patch, true).unwrap();
    let split = split_subjects(&ds.ids, 1).unwrap();
    let train: Vec<&Sample<f32>> = split
        .train
        .iter()
        .map(|id| &ds.samples[ds.index_of(id).unwrap()])
        .collect();
    let mut lines = Vec::new();
    let mut ok = true;
    for spec in [
        "random-random:0.1",
        "random-tube:0.1",
        "window-random:4x4x4:0.1",
        "roi:limbic:1",
    ] {
        for seed in 0..3u64 {
            let strategy = MaskStrategy::parse(spec, seed).unwrap();
            let cfg = TrainConfig {
                seed,
                ..defaults.clone()
            };
            let out = pretrain(&train, &strategy, &cfg, ds.atlas_inputs()).unwrap();
            let (first, last) = (out.epoch_losses[0], *out.epoch_losses.last().unwrap());
            if !(last < first) {
                ok = false;
                lines.push(format!("{spec} seed {seed}: {first:.6} -> {last:.6}"));
            }
        }
    }
    check(
        ok,
        format!(
            "lr {}, {} epochs, 4 strategies x 3 seeds: final < first {}",
            defaults.lr,
            defaults.epochs,
            if ok {
                "in all 12 runs".to_string()
            } else {
                format!("violated: {}", lines.join("; "))
            }
        ),
    )
}
