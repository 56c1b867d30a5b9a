//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines are always printed; exits nonzero if any fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;
#[path = "../../core/tests/fixture/mod.rs"]
mod fixture;
#[path = "../../core/tests/gradsuite/mod.rs"]
mod gradsuite;

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use clap::Parser;
use mimalloc::MiMalloc;
use mtl_cli::{replay, run, test_summary, Cli, ReplayArgs};
use mtl_core::checkpoint::ModelBundle;
use mtl_core::config::RunConfig;
use mtl_core::curriculum::{CurriculumConfig, ResampleMethod};
use mtl_core::episodes::{generate_synthetic, sample_episode, MetaSplit, SyntheticGeometry};
use mtl_core::meta::{adapt_head_trajectory, train, TrainConfig};
use mtl_core::models::{forward_features, ss_param_count, ClassifierHead, ExtractorConfig, FeatureExtractor, HeadKind, Ratio, SSParams, VariantSpec};
use mtl_core::pretrain::pretrain;
use mtl_core::{Rng, Tape};
use rand::Rng as _;

#[global_allocator]
static GLOBAL: MiMalloc = MiMalloc;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn variant(name: &str) -> VariantSpec {
    name.parse().unwrap()
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let worst = gradsuite::run_suite(20);
    let secs = start.elapsed().as_secs_f64();
    let (name, err) = worst.iter().copied().fold(("", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let cases = worst.len();
    check(
        err < 1e-4 && secs < 60.0,
        format!("{cases} cases x 20 seeds, worst {name} {err:.2e}, {secs:.1}s"),
    )
}

fn conv_oracle() -> Verdict {
    let mut r = common::rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (b, c) = (r.random_range(1..=2), r.random_range(1..=3));
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let pad = r.random_range(0..=1);
        let kh = r.random_range(1..=3.min(h + 2 * pad));
        let kw = r.random_range(1..=3.min(w + 2 * pad));
        let (k, stride) = (r.random_range(1..=4), r.random_range(1..=2));
        let x = common::rand_tensor(&mut r, &[b, c, h, w], 1.0);
        let wt = common::rand_tensor(&mut r, &[k, c, kh, kw], 1.0);
        let bias = common::rand_tensor(&mut r, &[k], 1.0);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(&x), t.constant(&wt), t.constant(&bias));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let want = common::naive_conv2d(&x, &wt, &bias, stride, pad);
        if t.value(y).shape() != want.shape() {
            return Err(format!("shape {:?} vs {:?}", t.value(y).shape(), want.shape()));
        }
        worst = worst.max(t.value(y).max_abs_diff(&want));
    }
    check(worst <= 1e-12, format!("50 shapes, max abs diff {worst:.1e}"))
}

fn ss_identity() -> Verdict {
    let ds = fixture::small_dataset(1);
    let ex = fixture::tiny_backbone(&ds, 8, 20, 2);
    let ss = SSParams::fresh(&ex);
    let cfg = fixture::fast_meta();
    let mut rng = Rng::new(3);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let ep = sample_episode(&ds, MetaSplit::Train, cfg.shape(), &mut rng).unwrap();
        let x = ep.train_images(&ds).unwrap();
        let plain = forward_features(&x, &ex, None, cfg.bn_mode).unwrap();
        let with_ss = forward_features(&x, &ex, Some(&ss), cfg.bn_mode).unwrap();
        worst = worst.max(plain.max_abs_diff(&with_ss));
        let head = ClassifierHead::new(HeadKind::FcSoftmax, ex.embedding_dim(), 5, 1, 0.01, &mut Rng::new(4));
        let a = adapt_head_trajectory(&plain, &ep.train_labels, &head, cfg.base_lr, cfg.inner_epochs).unwrap();
        let b = adapt_head_trajectory(&with_ss, &ep.train_labels, &head, cfg.base_lr, cfg.inner_epochs).unwrap();
        for (ha, hb) in a.iter().zip(&b) {
            for (pa, pb) in ha.params().into_iter().zip(hb.params()) {
                worst = worst.max(pa.max_abs_diff(pb));
            }
        }
    }
    check(worst <= 1e-12, format!("10 episodes, forward and trajectory max diff {worst:.1e}"))
}

fn freeze_invariance() -> Verdict {
    let ds = fixture::small_dataset(5);
    let ex = fixture::tiny_backbone(&ds, 8, 50, 6);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pre.mtlc");
    ModelBundle { extractor: ex, ss: None, head: None, tag: None }.save(&path).unwrap();
    let loaded = ModelBundle::load(&path).unwrap().extractor;
    let out = train(&ds, &loaded, variant("ss_full"), &fixture::fast_train(1000), &Rng::new(7)).unwrap();
    let iterations = out.rows.last().map_or(0, |r| r.iteration + 1);
    let same = loaded
        .blocks()
        .iter()
        .zip(out.last.extractor.blocks())
        .flat_map(|(a, b)| {
            [
                (&a.weight, &b.weight),
                (&a.bias, &b.bias),
                (&a.bn_gamma, &b.bn_gamma),
                (&a.bn_beta, &b.bn_beta),
                (&a.running_mean, &b.running_mean),
                (&a.running_var, &b.running_var),
            ]
        })
        .all(|(a, b)| a.checksum() == b.checksum());
    check(
        iterations == 500 && same && out.best.extractor.checksum() == loaded.checksum(),
        format!("{iterations} SS iterations, every backbone tensor checksum unchanged: {same}"),
    )
}

fn parameter_counts() -> Verdict {
    let mut checked = 0;
    for c_in in 1..=8 {
        for filters in [1, 4, 16, 64] {
            for blocks in 1..=4 {
                let ex = FeatureExtractor::init(
                    &ExtractorConfig { in_channels: c_in, filters, blocks, kernel: 3 },
                    &mut Rng::new(0),
                );
                let pc = ss_param_count(&ex).unwrap();
                if !pc.ratio.lt(Ratio::new(2, 9).unwrap()) {
                    return Err(format!("C_in {c_in} filters {filters} blocks {blocks}: {}", pc.ratio));
                }
                if blocks == 1 && pc.ratio != Ratio::new(2, 9 * c_in as u64 + 1).unwrap() {
                    return Err(format!("single block C_in {c_in}: {} != 2/{}", pc.ratio, 9 * c_in + 1));
                }
                checked += 1;
            }
        }
    }
    let seven = FeatureExtractor::init(
        &ExtractorConfig { in_channels: 1, filters: 8, blocks: 1, kernel: 7 },
        &mut Rng::new(0),
    );
    let r = ss_param_count(&seven).unwrap().ratio;
    check(
        r == Ratio::new(2, 50).unwrap() && r.lt(Ratio::new(2, 49).unwrap()),
        format!("{checked} 3x3 configurations below 2/9; 7x7 single-channel ratio {r} < 2/49"),
    )
}

fn second_order_oracle() -> Verdict {
    let mut rng = Rng::new(40);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let v: Vec<f64> = (0..6).map(|_| rng.uniform() * 4.0 - 2.0).collect();
        let alpha = 0.05 + rng.uniform() * 0.3;
        let got = fixture::toy_on_tape(v[0], v[1], v[2], v[3], v[4], v[5], alpha);
        let want = fixture::toy_closed_form(v[0], v[1], v[2], v[3], v[4], v[5], alpha);
        for (g, w) in [(got.0, want.0), (got.1, want.1)] {
            worst = worst.max((g - w).abs() / w.abs().max(1e-12));
        }
    }
    check(worst < 1e-6, format!("200 random toys, worst rel err {worst:.1e}"))
}

fn curriculum_exactness() -> Verdict {
    let ds = fixture::small_dataset(50);
    let ex = fixture::tiny_backbone(&ds, 4, 10, 51);
    let cfg = TrainConfig {
        curriculum: CurriculumConfig { enabled: true, cadence: 10, hard_tasks: 4, method: ResampleMethod::FreshSamples },
        ..fixture::fast_train(200)
    };
    let out = train(&ds, &ex, variant("ss_full"), &cfg, &Rng::new(52)).unwrap();
    let batches = out.rows.iter().filter(|r| r.phase == mtl_core::curriculum::Phase::Normal).count() / 2;
    let mut problems = Vec::new();
    for p in &out.hard_phases {
        if p.flushed.len() != 20 {
            problems.push(format!("phase at {} flushed {}", p.iteration, p.flushed.len()));
        }
        let flushed: BTreeSet<u32> = p.flushed.iter().copied().collect();
        for (classes, padded) in p.episode_classes.iter().zip(&p.padded) {
            if classes.iter().any(|c| !flushed.contains(c) && !padded.contains(c)) {
                problems.push(format!("phase at {}: episode {classes:?} outside set", p.iteration));
            }
        }
    }
    check(
        batches == 100 && out.hard_phases.len() == 10 && problems.is_empty(),
        format!(
            "{batches} meta-batches, {} hard phases, {} problems {}",
            out.hard_phases.len(),
            problems.len(),
            problems.join("; ")
        )
        .trim_end()
        .to_string(),
    )
}

struct SeedResult {
    ss: f64,
    ft: f64,
    uh: f64,
    ss_val: f64,
    ss_ht_val: f64,
}

/// The default synthetic benchmark for one seed, as the CLI would run it.
fn benchmark_seed(seed: u64, threads: usize) -> (SeedResult, f64) {
    let cfg = RunConfig::default();
    let timed = Instant::now();
    let ds = generate_synthetic(100, 60, (3, 16, 16), &SyntheticGeometry::default(), &mut Rng::new(seed)).unwrap();
    let ex = pretrain(&ds, &cfg.pretrain, &mut Rng::new(seed)).unwrap().extractor;
    let mut tcfg = cfg.train.clone();
    tcfg.threads = threads;
    let score = |name: &str, tcfg: &TrainConfig| {
        let o = train(&ds, &ex, variant(name), tcfg, &Rng::new(seed)).unwrap();
        let s = test_summary(&ds, &o.best, variant(name), &cfg, cfg.test_tasks, seed, threads).unwrap();
        (s.mean_acc, o.val_curve.last().map_or(f64::NAN, |p| p.val_acc))
    };
    let (ss, ss_val) = score("ss_full", &tcfg);
    let (ft, _) = score("ft_full", &tcfg);
    let (uh, _) = score("update_head", &tcfg);
    let secs = timed.elapsed().as_secs_f64();
    tcfg.curriculum.enabled = true;
    let (_, ss_ht_val) = score("ss_full", &tcfg);
    (SeedResult { ss, ft, uh, ss_val, ss_ht_val }, secs)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn benchmark(results: &[SeedResult], secs: f64) -> (Verdict, Verdict) {
    let (ss, ft, uh) = (
        100.0 * mean(results.iter().map(|r| r.ss)),
        100.0 * mean(results.iter().map(|r| r.ft)),
        100.0 * mean(results.iter().map(|r| r.uh)),
    );
    let ordering = check(
        ss >= ft && ft >= uh && ss - uh >= 5.0 && secs < 900.0,
        format!("ss_full {ss:.2} ft_full {ft:.2} update_head {uh:.2} (gap {:.2} pts), {secs:.0}s", ss - uh),
    );
    let gain = 100.0 * mean(results.iter().map(|r| r.ss_ht_val - r.ss_val));
    let ht = check(
        gain >= 0.0,
        format!(
            "val acc ss+ht {:.2} vs ss {:.2}, mean gain {gain:+.2} pts",
            100.0 * mean(results.iter().map(|r| r.ss_ht_val)),
            100.0 * mean(results.iter().map(|r| r.ss_val))
        ),
    );
    (ordering, ht)
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let tiny = [
        "--set", "model.filters=4", "--set", "pretrain.max_iterations=30", "--set", "pretrain.batch_size=16",
        "--set", "meta.tasks=20", "--set", "meta.query=5", "--set", "meta.val_every=4", "--set", "meta.val_tasks=4",
        "--set", "ht.cadence=3", "--set", "ht.hard_tasks=2", "--set", "test.tasks=6",
    ];
    let (data, pre, ckpt) = (p("d.mtld"), p("pre.mtlc"), p("ss.mtlc"));
    let commands: Vec<(Vec<&str>, String)> = vec![
        (vec!["gen-data", "--out", &data, "--classes", "40", "--per-class", "12", "--seed", "1"], data.clone()),
        (vec!["pretrain", "--data", &data, "--out", &pre, "--seed", "2"], pre.clone()),
        (
            vec!["meta-train", "--data", &data, "--pretrained", &pre, "--variant", "ss_full", "--ht", "on", "--out", &ckpt, "--seed", "3"],
            ckpt.clone(),
        ),
        (vec!["meta-test", "--ckpt", &ckpt, "--seed", "4"], format!("{ckpt}.test.csv")),
    ];
    let bench = p("bench.csv");
    let conv = p("conv.csv");
    let more: Vec<(Vec<&str>, String)> = vec![
        (vec!["bench", "--data", &data, "--pretrained", &pre, "--variants", "update_head,ft_full,ss_full", "--out", &bench, "--seed", "5"], bench.clone()),
        (vec!["eval-convergence", "--data", &data, "--pretrained", &pre, "--out", &conv, "--seed", "6"], conv.clone()),
    ];
    let mut compared = 0;
    for (i, (args, primary)) in commands.into_iter().chain(more).enumerate() {
        let mut argv = vec!["mtl"];
        argv.extend(&args);
        if !matches!(args[0], "gen-data" | "meta-test") {
            argv.extend(tiny);
        }
        let cli = Cli::try_parse_from(&argv).map_err(|e| e.to_string())?;
        run(&cli.command).map_err(|e| format!("{}: {e:#}", args[0]))?;
        let report = replay(&ReplayArgs {
            manifest: mtl_cli::manifest_path(Path::new(&primary)),
            out_dir: dir.path().join(format!("replay{i}")),
        })
        .map_err(|e| format!("replaying {}: {e:#}", args[0]))?;
        if !report.all_match() {
            return Err(format!("{} replay differs:\n{}", args[0], report.text()));
        }
        compared += report.outputs.len();
    }
    check(compared > 0, format!("6 commands replayed, {compared} outputs byte-identical"))
}

fn main() {
    let threads = mtl_cli::threads().unwrap_or(1);
    let mut verdicts: Vec<(&str, Verdict)> = vec![
        ("1 gradient suite", gradient_suite()),
        ("2 conv oracle", conv_oracle()),
        ("3 SS identity", ss_identity()),
        ("4 freeze invariance", freeze_invariance()),
        ("5 parameter counts", parameter_counts()),
        ("6 second-order oracle", second_order_oracle()),
        ("7 curriculum exactness", curriculum_exactness()),
    ];
    let mut results = Vec::new();
    let mut secs = 0.0;
    for seed in 0..5 {
        let (r, s) = benchmark_seed(seed, threads);
        eprintln!(
            "seed {seed}: ss {:.3} ft {:.3} uh {:.3} | val ss {:.3} ss+ht {:.3} | {s:.0}s",
            r.ss, r.ft, r.uh, r.ss_val, r.ss_ht_val
        );
        results.push(r);
        secs += s;
    }
    let (ordering, ht) = benchmark(&results, secs);
    verdicts.push(("8 desk-scale ordering", ordering));
    verdicts.push(("9 hard-task gain", ht));
    verdicts.push(("10 determinism", determinism()));

    let mut failed = 0;
    for (name, v) in &verdicts {
        match v {
            Ok(d) => println!("PASS criterion {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
