//! Acceptance criteria, one test per criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;

use cpu_time::{ProcessTime, ThreadTime};
use rand::Rng as _;

use metaseg::augment::{apply, augment, jitter_params, AugmentConfig};
use metaseg::checkpoint;
use metaseg::dataset::{export_source, generate_synthetic_source, MetaDataset, Sample, TaskSource};
use metaseg::eval::{evaluate_accumulator, ConfusionAccumulator};
use metaseg::experiment::{self, Mode, RunManifest, CHECKPOINT_FILE, METRICS_FILE};
use metaseg::gradsuite::{self, Check};
use metaseg::matrix::{run_matrix, MatrixConfig, Method, Pretrain};
use metaseg::metatrain::{inner_adapt, maml_outer_step, Learner, MamlConfig, RefineConfig, TaskEpisode, TransferConfig};
use metaseg::optim::AdamState;
use metaseg::rng;
use metaseg::sampler::{batch_loader, episode_loader, SamplerConfig, TaskDistribution};
use metaseg::segnet::{InitSpec, UNet, UNetConfig};
use metaseg::{GradMap, IntMask, ParamSet, Result, Tensor};

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    println!("criterion {n}: {} - {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_1_gradient_suite() {
    let t0 = ThreadTime::now();
    let outcomes = gradsuite::run(&Check::ALL, 0..10).unwrap();
    let cpu = t0.elapsed().as_secs_f64();
    let worst = outcomes
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .unwrap();
    let covered: BTreeSet<&str> = outcomes.iter().map(|o| o.check.name()).collect();
    let pass = worst.report.max_rel_error < gradsuite::TOLERANCE && cpu < 60.0 && covered.len() == Check::ALL.len();
    report(
        1,
        pass,
        format!(
            "{} checks x 10 seeds, worst {:.2e} ({} seed {}), {cpu:.1}s CPU",
            covered.len(),
            worst.report.max_rel_error,
            worst.check.name(),
            worst.seed
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

fn mask(h: usize, w: usize, v: &[u8]) -> IntMask {
    IntMask::new(vec![h, w], v.to_vec()).unwrap()
}

/// Per-pixel set arithmetic, independent of the accumulator.
fn set_oracle(pairs: &[(IntMask, IntMask)], n: usize) -> (Vec<u64>, Vec<u64>, Option<f64>) {
    let mut inter = vec![0u64; n];
    let mut uni = vec![0u64; n];
    for (img, (p, t)) in pairs.iter().enumerate() {
        for c in 0..n as u8 {
            let ps: HashSet<(usize, usize)> = p.data().iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| (img, i)).collect();
            let ts: HashSet<(usize, usize)> = t.data().iter().enumerate().filter(|(_, &v)| v == c).map(|(i, _)| (img, i)).collect();
            inter[c as usize] += ps.intersection(&ts).count() as u64;
            uni[c as usize] += ps.union(&ts).count() as u64;
        }
    }
    let ious: Vec<f64> = (0..n).filter(|&c| uni[c] > 0).map(|c| inter[c] as f64 / uni[c] as f64).collect();
    let miou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    (inter, uni, miou)
}

#[test]
fn criterion_2_miou_oracle() {
    let mut r = rng::stream(2, &[]);
    let mut worst = 0.0f64;
    let mut counts_ok = true;
    for _ in 0..200 {
        let n = r.random_range(2..=6usize);
        let (h, w) = (r.random_range(1..=16usize), r.random_range(1..=16usize));
        let images = r.random_range(1..=3usize);
        let pairs: Vec<(IntMask, IntMask)> = (0..images)
            .map(|_| {
                let mut draw = || (0..h * w).map(|_| r.random_range(0..n as u8)).collect::<Vec<u8>>();
                (mask(h, w, &draw()), mask(h, w, &draw()))
            })
            .collect();
        let mut acc = ConfusionAccumulator::new(n);
        for (p, t) in &pairs {
            acc.accumulate(p, t).unwrap();
        }
        let (inter, uni, miou) = set_oracle(&pairs, n);
        counts_ok &= acc.intersection == inter && acc.union == uni;
        worst = worst.max((acc.miou().unwrap() - miou.unwrap()).abs());
    }
    let mut acc = ConfusionAccumulator::new(2);
    acc.accumulate(&mask(2, 2, &[0, 1, 1, 1]), &mask(2, 2, &[0, 0, 1, 1])).unwrap();
    let worked = acc.miou().unwrap();
    let pass = counts_ok && worst <= 1e-12 && (worked - 7.0 / 12.0).abs() <= 1e-12;
    report(
        2,
        pass,
        format!("200 random cases, counts equal: {counts_ok}, max |diff| {worst:.1e}, 2x2 case {worked:.6} (7/12)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn tiny_source(id: &str, k: usize, n: usize) -> TaskSource<f32> {
    generate_synthetic_source(id, 3, k, n, 4, 4).unwrap()
}

#[test]
fn criterion_3_sampler_statistics() {
    let sources: Vec<TaskSource<f32>> = (0..4).map(|i| tiny_source(&format!("src{i}"), 2 + i, 20)).collect();
    let meta = MetaDataset::all_train(sources).unwrap();
    let ids = meta.ids();
    let cfg = SamplerConfig {
        seed: 11,
        ..SamplerConfig::default()
    };
    let loader = episode_loader(&meta, TaskDistribution::uniform(&ids).unwrap(), &cfg).unwrap();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let (mut episodes, mut homogeneous, mut disjoint) = (0usize, 0usize, 0usize);
    for b in 0..2500 {
        for ep in loader.batch(b).unwrap() {
            episodes += 1;
            *counts.entry(ep.task_id.clone()).or_default() += 1;
            let all = ep.support_samples(&meta).unwrap().into_iter().chain(ep.query_samples(&meta).unwrap());
            if all.into_iter().all(|s| s.source_id == ep.task_id) {
                homogeneous += 1;
            }
            let s: HashSet<usize> = ep.support.iter().copied().collect();
            if ep.query.iter().all(|q| !s.contains(q)) && ep.support.len() == 8 && ep.query.len() == 8 {
                disjoint += 1;
            }
        }
    }
    let in_band = counts.len() == 4 && counts.values().all(|&c| (2370..=2630).contains(&c));

    let sized = MetaDataset::all_train(vec![
        tiny_source("monuseg", 2, 30),
        tiny_source("breastpathq", 2, 154),
        tiny_source("glands", 2, 161),
    ])
    .unwrap();
    let bl = batch_loader(&sized, &cfg).unwrap();
    let mut balanced = true;
    for e in 0..5 {
        let inst = bl.epoch_instances(e);
        let mut per = [0usize; 3];
        for i in &inst {
            per[i.source] += 1;
        }
        balanced &= per == [30, 30, 30] && inst.iter().collect::<HashSet<_>>().len() == 90;
    }
    let pass = episodes == 10_000 && in_band && homogeneous == episodes && disjoint == episodes && balanced;
    report(
        3,
        pass,
        format!(
            "{episodes} episodes, counts {:?}, homogeneous {homogeneous}, disjoint {disjoint}, truncation to 30/source: {balanced}",
            counts.values().collect::<Vec<_>>()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

fn random_sample(r: &mut rng::Rng, h: usize, w: usize, k: u8) -> Sample<f32> {
    let image = Tensor::from_fn(&[3, h, w], |_| r.random::<f32>());
    let m = (0..h * w).map(|_| r.random_range(0..k)).collect();
    Sample::new("x".into(), image, IntMask::new(vec![h, w], m).unwrap(), "src".into()).unwrap()
}

/// True when `|mean - mu| <= 3 sd / sqrt(n)`.
fn within_3_sigma(xs: &[f64], mu: f64, sd: f64) -> bool {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (mean - mu).abs() <= 3.0 * sd / (xs.len() as f64).sqrt()
}

fn uniform_ok(xs: &[f64], lo: f64, hi: f64) -> bool {
    xs.iter().all(|&x| (lo..=hi).contains(&x)) && within_3_sigma(xs, (lo + hi) / 2.0, (hi - lo) / 12f64.sqrt())
}

#[test]
fn criterion_4_augmentation() {
    let mut r = rng::stream(4, &[]);
    let s = random_sample(&mut r, 20, 28, 5);
    let out = augment(&s, &AugmentConfig::identity(20, 28), &mut rng::stream(9, &[])).unwrap();
    let identity = out.image.data().iter().zip(s.image.data()).all(|(a, b)| a.to_bits() == b.to_bits()) && out.mask == s.mask;

    let mut preserved = 0;
    let mut sized = 0;
    for i in 0..1000u64 {
        let (h, w) = (r.random_range(2..=24usize), r.random_range(2..=24usize));
        let k = r.random_range(2..=8u8);
        let s = random_sample(&mut r, h, w, k);
        let crop = [r.random_range(1..=32usize), r.random_range(1..=32usize)];
        let cfg = AugmentConfig::default().with_crop(crop[0], crop[1]);
        let out = augment(&s, &cfg, &mut rng::stream(40, &[i])).unwrap();
        let before: BTreeSet<u8> = s.mask.data().iter().copied().collect();
        if out.mask.data().iter().all(|v| before.contains(v)) {
            preserved += 1;
        }
        if out.image.shape() == [3, crop[0], crop[1]] && out.mask.shape() == crop {
            sized += 1;
        }
    }
    let big = random_sample(&mut r, 800, 800, 3);
    let out = augment(&big, &AugmentConfig::default(), &mut rng::stream(41, &[])).unwrap();
    let default_crop = out.image.shape() == [3, 768, 768] && out.mask.shape() == [768, 768];

    let cfg = AugmentConfig::default();
    let mut pr = rng::stream(42, &[]);
    let draws: Vec<_> = (0..10_000).map(|_| jitter_params(&cfg, &mut pr)).collect();
    let col = |f: &dyn Fn(&metaseg::augment::AugmentParams) -> f64| draws.iter().map(f).collect::<Vec<f64>>();
    let scale = col(&|p| p.scale);
    let scale_mean = scale.iter().sum::<f64>() / scale.len() as f64;
    let flip_h = col(&|p| p.flip_h as u8 as f64);
    let flip_h_freq = flip_h.iter().sum::<f64>() / 1e4;
    let stats = [
        ("scale", uniform_ok(&scale, 0.8, 1.2) && (0.99..=1.01).contains(&scale_mean)),
        ("brightness", uniform_ok(&col(&|p| p.brightness), 0.8, 1.2)),
        ("contrast", uniform_ok(&col(&|p| p.contrast), 0.8, 1.2)),
        ("hue", uniform_ok(&col(&|p| p.hue_shift), -0.1, 0.1)),
        ("saturation", uniform_ok(&col(&|p| p.saturation), 0.9, 1.1)),
        ("angle", uniform_ok(&col(&|p| p.angle_deg), -15.0, 15.0)),
        ("crop_y", uniform_ok(&col(&|p| p.crop_offset.0), 0.0, 1.0)),
        ("crop_x", uniform_ok(&col(&|p| p.crop_offset.1), 0.0, 1.0)),
        ("flip_h", (0.485..=0.515).contains(&flip_h_freq) && within_3_sigma(&flip_h, 0.5, 0.5)),
        ("flip_v", within_3_sigma(&col(&|p| p.flip_v as u8 as f64), 0.5, 0.5)),
    ];
    let bad: Vec<&str> = stats.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    let replay = {
        let mut a = rng::stream(43, &[]);
        let mut b = rng::stream(43, &[]);
        let p = jitter_params(&cfg, &mut a);
        p == jitter_params(&cfg, &mut b) && apply(&s, &cfg.clone().with_crop(8, 8), &p).is_ok()
    };
    let pass = identity && preserved == 1000 && sized == 1000 && default_crop && bad.is_empty() && replay;
    report(
        4,
        pass,
        format!(
            "identity bitwise {identity}, labels preserved {preserved}/1000, crop size {sized}/1000, 800->768 {default_crop}, \
             scale mean {scale_mean:.4}, flipH {flip_h_freq:.4}, out-of-band {bad:?}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5

/// Every item has loss (w - 1)^2.
struct Quadratic;

impl Learner<f64> for Quadratic {
    type Item = ();

    fn loss_and_grad(&self, p: &ParamSet<f64>, _: &str, _: &[()]) -> Result<(f64, GradMap<f64>)> {
        let w = p.get("w")?.item()?;
        let mut g = GradMap::new();
        g.insert("w".into(), Tensor::scalar(2.0 * (w - 1.0)));
        Ok(((w - 1.0).powi(2), g))
    }
}

/// Linear regression `y ~ a x + b`, loss = mean squared error over items.
struct Linear;

impl Learner<f64> for Linear {
    type Item = (f64, f64);

    fn loss_and_grad(&self, p: &ParamSet<f64>, _: &str, items: &[(f64, f64)]) -> Result<(f64, GradMap<f64>)> {
        let (a, b) = (p.get("a")?.item()?, p.get("b")?.item()?);
        let n = items.len() as f64;
        let (mut l, mut ga, mut gb) = (0.0, 0.0, 0.0);
        for &(x, y) in items {
            let e = a * x + b - y;
            l += e * e / n;
            ga += 2.0 * e * x / n;
            gb += 2.0 * e / n;
        }
        let mut g = GradMap::new();
        g.insert("a".into(), Tensor::scalar(ga));
        g.insert("b".into(), Tensor::scalar(gb));
        Ok((l, g))
    }
}

/// Hand-written first-order MAML with Adam on the linear toy.
fn linear_reference(episodes: &[(Vec<(f64, f64)>, Vec<(f64, f64)>)], steps: usize, inner: f64, lr: f64) -> [f64; 2] {
    fn grad(a: f64, b: f64, d: &[(f64, f64)]) -> [f64; 2] {
        let n = d.len() as f64;
        let ga: f64 = d.iter().map(|&(x, y)| 2.0 * (a * x + b - y) * x).sum::<f64>() / n;
        let gb: f64 = d.iter().map(|&(x, y)| 2.0 * (a * x + b - y)).sum::<f64>() / n;
        [ga, gb]
    }
    let mut w = [0.3, -0.2];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for t in 1..=steps {
        let mut g = [0.0; 2];
        for (s, q) in episodes {
            let gs = grad(w[0], w[1], s);
            let gq = grad(w[0] - inner * gs[0], w[1] - inner * gs[1], q);
            g[0] += gq[0] / episodes.len() as f64;
            g[1] += gq[1] / episodes.len() as f64;
        }
        for i in 0..2 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
            let mh = m[i] / (1.0 - 0.9f64.powi(t as i32));
            let vh = v[i] / (1.0 - 0.999f64.powi(t as i32));
            w[i] -= lr * mh / (vh.sqrt() + 1e-8);
        }
    }
    w
}

#[test]
fn criterion_5_fomaml_analytic() {
    let cfg = MamlConfig {
        inner_lr: 0.5,
        ..MamlConfig::default()
    };
    let mut p = ParamSet::new();
    p.insert("w", Tensor::scalar(0.0));
    let adapted = inner_adapt(&Quadratic, &p, "t", &[()], &cfg).unwrap().get("w").unwrap().item().unwrap();
    let ep = TaskEpisode {
        task: "t".to_string(),
        support: vec![()],
        query: vec![()],
    };
    let mut q = p.clone();
    maml_outer_step(&Quadratic, &mut q, &mut AdamState::new(), &[ep], &cfg, None).unwrap();
    let moved = q.get("w").unwrap().item().unwrap().abs();

    let mut r = rng::stream(5, &[]);
    let mut task = |a: f64, b: f64| -> Vec<(f64, f64)> {
        (0..6)
            .map(|_| {
                let x: f64 = r.random_range(-2.0..2.0);
                (x, a * x + b + 0.1 * r.random_range(-1.0..1.0))
            })
            .collect()
    };
    let episodes_raw: Vec<(Vec<(f64, f64)>, Vec<(f64, f64)>)> =
        vec![(task(1.0, 0.5), task(1.0, 0.5)), (task(-0.5, 2.0), task(-0.5, 2.0)), (task(2.0, -1.0), task(2.0, -1.0))];
    let lcfg = MamlConfig {
        inner_lr: 0.05,
        outer_lr: 0.01,
        ..MamlConfig::default()
    };
    let episodes: Vec<TaskEpisode<(f64, f64)>> = episodes_raw
        .iter()
        .enumerate()
        .map(|(i, (s, q))| TaskEpisode {
            task: format!("t{i}"),
            support: s.clone(),
            query: q.clone(),
        })
        .collect();
    let mut lp = ParamSet::new();
    lp.insert("a", Tensor::scalar(0.3));
    lp.insert("b", Tensor::scalar(-0.2));
    let mut adam = AdamState::new();
    let steps = 5;
    for _ in 0..steps {
        maml_outer_step(&Linear, &mut lp, &mut adam, &episodes, &lcfg, None).unwrap();
    }
    let want = linear_reference(&episodes_raw, steps, lcfg.inner_lr, lcfg.outer_lr);
    let got = [lp.get("a").unwrap().item().unwrap(), lp.get("b").unwrap().item().unwrap()];
    let err = (got[0] - want[0]).abs().max((got[1] - want[1]).abs());
    let pass = adapted == 1.0 && moved < 1e-12 && err <= 1e-10;
    report(
        5,
        pass,
        format!("quadratic adapted w {adapted}, outer move {moved:.1e}; linear toy {steps} steps max |diff| {err:.1e}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 6

fn moving_average(losses: &[f64], iter: usize) -> f64 {
    let w = &losses[(iter + 1).saturating_sub(100)..=iter.min(losses.len() - 1)];
    w.iter().sum::<f64>() / w.len() as f64
}

fn read_losses(dir: &Path) -> Vec<f64> {
    std::fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_6_end_to_end_learning() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    for (i, k) in [2usize, 3, 4, 5].into_iter().enumerate() {
        let id = format!("s{i}_k{k}");
        let src = generate_synthetic_source::<f64>(&id, 0, k, 40, 64, 64).unwrap();
        export_source(&src, &data.join(&id)).unwrap();
    }
    let held_out = "s3_k5";
    let base = |mode: Mode, out: &str| RunManifest {
        task: Some(held_out.into()),
        ..RunManifest::new(mode, &data, tmp.path().join(out))
    };
    let meta = experiment::load_meta::<f32>(&base(Mode::Maml, "x")).unwrap();
    let seeds = 0..5u64;
    let refine = |pretrained: Option<&Path>, tag: &str| -> Vec<f64> {
        seeds
            .clone()
            .map(|s| {
                let m = RunManifest {
                    seed: s,
                    pretrained: pretrained.map(Path::to_path_buf),
                    ..base(Mode::Refine, &format!("refine_{tag}_{s}"))
                };
                experiment::run_on::<f32>(&m, &meta).unwrap().miou.unwrap()
            })
            .collect()
    };

    let t0 = ProcessTime::now();
    let control = refine(None, "control");
    let control_cpu = t0.elapsed().as_secs_f64();
    let control_med = median(&control);

    let mut pass = true;
    let mut lines = vec![format!("control mIoU {control:.3?} median {control_med:.3}")];
    for mode in [Mode::Maml, Mode::Transfer] {
        let tag = format!("{mode:?}").to_lowercase();
        let t0 = ProcessTime::now();
        let m = base(mode, &tag);
        experiment::run_on::<f32>(&m, &meta).unwrap();
        let losses = read_losses(&m.out_dir);
        let (ma50, ma500) = (moving_average(&losses, 50), moving_average(&losses, 499));
        let miou = refine(Some(&m.out_dir.join(CHECKPOINT_FILE)), &tag);
        let cpu = t0.elapsed().as_secs_f64() + control_cpu;
        let med = median(&miou);
        let diffs: Vec<f64> = miou.iter().zip(&control).map(|(a, b)| a - b).collect();
        let gain = median(&diffs);
        let ok_a = losses.len() == 500 && ma500 < ma50;
        let ok_b = med >= 0.60 && gain >= 0.05;
        pass &= ok_a && ok_b;
        lines.push(format!(
            "{tag}: (a) MA {ma50:.3} -> {ma500:.3} {}; (b) mIoU {miou:.3?} median {med:.3}, paired gain {gain:+.3} {}; {cpu:.0}s CPU",
            if ok_a { "ok" } else { "not met" },
            if ok_b { "ok" } else { "not met" }
        ));
    }
    report(6, pass, lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- shared tiny setup for 7 and 8

fn write_tiny_dataset(root: &Path) {
    for (i, k) in [2usize, 3, 4].into_iter().enumerate() {
        let id = format!("t{i}_k{k}");
        let src = generate_synthetic_source::<f64>(&id, 8, k, 12, 16, 16).unwrap();
        export_source(&src, &root.join(&id)).unwrap();
    }
}

fn tiny_sampler() -> SamplerConfig {
    SamplerConfig {
        episode_size: 4,
        support_size: 2,
        batch_episodes: 3,
        instance_batch_size: 4,
        seed: 1,
    }
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        depth: 2,
        base_channels: 4,
        in_channels: 3,
    }
}

fn tiny_manifest(mode: Mode, data: &Path, out: &Path) -> RunManifest {
    RunManifest {
        seed: 17,
        sampler: tiny_sampler(),
        augment: AugmentConfig::default().with_crop(16, 16),
        unet: tiny_unet(),
        maml: MamlConfig {
            max_iters: 6,
            ..MamlConfig::default()
        },
        transfer: TransferConfig {
            lr: 1e-3,
            max_iters: 6,
        },
        refine: RefineConfig {
            lr: 1e-3,
            iters: 4,
            ..RefineConfig::default()
        },
        ..RunManifest::new(mode, data, out)
    }
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_7_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_tiny_dataset(&data);
    let mut lines = Vec::new();
    let mut pass = true;
    for mode in [Mode::Maml, Mode::Transfer] {
        let run = |name: &str, workers: usize| {
            let mut m = tiny_manifest(mode, &data, &tmp.path().join(name));
            m.workers = workers;
            m.task = Some("t2_k4".into());
            experiment::run::<f64>(&m).unwrap();
            let metrics = std::fs::read(m.out_dir.join(METRICS_FILE)).unwrap();
            let params = checkpoint::load::<f64>(&m.out_dir.join(CHECKPOINT_FILE)).unwrap().params;
            (metrics, params)
        };
        let tag = format!("{mode:?}").to_lowercase();
        let (m1, p1) = run(&format!("{tag}_a"), 1);
        let (m2, p2) = run(&format!("{tag}_b"), 1);
        let (_, p3) = run(&format!("{tag}_w3"), 3);
        let same_tsv = m1 == m2 && m1.iter().filter(|&&b| b == b'\n').count() == 7;
        let diff = p1.max_abs_diff(&p3).unwrap();
        pass &= same_tsv && p1 == p2 && diff < 1e-12;
        lines.push(format!("{tag}: metrics identical {same_tsv}, 1 vs 3 workers max |dp| {diff:.1e}"));
    }
    report(7, pass, lines.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_matrix_parity() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_tiny_dataset(&data);
    let base = tiny_manifest(Mode::Maml, &data, tmp.path());
    let cfg = MatrixConfig {
        seed: base.seed,
        sampler: base.sampler.clone(),
        augment: base.augment.clone(),
        unet: base.unet,
        maml: base.maml.clone(),
        transfer: base.transfer.clone(),
        refine: base.refine.clone(),
        ..MatrixConfig::default()
    };
    let grid = run_matrix::<f64>(&data, &cfg, &tmp.path().join("matrix"), |_| {}).unwrap();
    let shape_ok = grid.rows.len() == 3
        && grid.columns.len() == 4
        && grid.cells.len() == 24
        && grid.cells.iter().filter(|c| c.miou.is_none()).count() == 6
        && grid.cells.iter().flat_map(|c| c.miou).all(|v| (0.0..=1.0).contains(&v));

    // scripted train -> refine -> eval in separate directories
    let compose = |column: &Pretrain, method: Method, name: &str| -> f64 {
        let task = "t0_k2";
        let mode = if method == Method::Maml { Mode::Maml } else { Mode::Transfer };
        let mut train = tiny_manifest(mode, &data, &tmp.path().join(name).join("train"));
        match column {
            Pretrain::Single(id) => train.train_sources = vec![id.clone()],
            Pretrain::AllOthers => train.task = Some(task.into()),
        }
        experiment::run::<f64>(&train).unwrap();
        let mut refine = tiny_manifest(Mode::Refine, &data, &tmp.path().join(name).join("refine"));
        refine.task = Some(task.into());
        refine.pretrained = Some(train.out_dir.join(CHECKPOINT_FILE));
        experiment::run::<f64>(&refine).unwrap();
        let ck = checkpoint::load::<f64>(&refine.out_dir.join(CHECKPOINT_FILE)).unwrap();
        let meta = experiment::load_meta::<f64>(&refine).unwrap();
        let src = meta.source(task).unwrap();
        let acc =
            evaluate_accumulator(&UNet::new(ck.unet).unwrap(), &ck.params, src, &meta.split(task).unwrap().test).unwrap();
        acc.miou().unwrap()
    };
    let mut lines = Vec::new();
    let mut equal = true;
    for (column, method, name) in [
        (Pretrain::Single("t1_k3".into()), Method::Maml, "c1"),
        (Pretrain::AllOthers, Method::Transfer, "c2"),
    ] {
        let composed = compose(&column, method, name);
        let cell = grid.get("t0_k2", &column, method).unwrap().miou.unwrap();
        equal &= composed.to_bits() == cell.to_bits();
        lines.push(format!("({}, {}) cell {cell} composed {composed}", column.label(), method.label()));
    }
    let pass = shape_ok && equal;
    report(8, pass, format!("3x4x2 grid ok {shape_ok}; {}", lines.join("; ")));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn round_trip<T: metaseg::Scalar>(dir: &Path) -> (bool, bool) {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params: ParamSet<T> = net
        .build(&[("a".to_string(), 2), ("b".to_string(), 5)], &InitSpec::new(99))
        .unwrap();
    let images = Tensor::<T>::from_fn(&[2, 3, 16, 16], |i| T::from_f64_lossy(((i * 37) % 101) as f64 / 101.0));
    let before = net.logits(&params, "b", images.clone()).unwrap();
    let p1 = dir.join(format!("{}_1.bin", T::DTYPE));
    let p2 = dir.join(format!("{}_2.bin", T::DTYPE));
    checkpoint::save(&p1, &net.config, &params).unwrap();
    let loaded = checkpoint::load::<T>(&p1).unwrap();
    checkpoint::save(&p2, &loaded.unet, &loaded.params).unwrap();
    let bytes_equal = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();
    let after = net.logits(&loaded.params, "b", images).unwrap();
    let forward_equal = before.data().iter().zip(after.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
    (bytes_equal, forward_equal)
}

#[test]
fn criterion_9_checkpoint_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let (b32, f32_) = round_trip::<f32>(tmp.path());
    let (b64, f64_) = round_trip::<f64>(tmp.path());
    let pass = b32 && f32_ && b64 && f64_;
    report(
        9,
        pass,
        format!("f32 bytes {b32} forward {f32_}; f64 bytes {b64} forward {f64_}"),
    );
    assert!(pass);
}
