//! End-to-end acceptance checks on trained desk-scale models. Prints one
//! PASS/FAIL line per criterion. Panics (broken invariants, I/O) always fail
//! the run; criterion failures do so only with `DEEPBOUND_STRICT_ACCEPTANCE`.
//!
//! Trained weights are cached under `CARGO_TARGET_TMPDIR`; training is
//! deterministic, so a cached file equals a fresh one.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use deepbound::attack::{
    binary_search_step, bim_attack, calibrate_epsilon, clipping_attack, d2b_attack, run_batch, search_step,
    two_step_attack, AttackConfig, AttackResult, BarrierKind, BimConfig, ClipConfig, Mode, Throttle, ThrottlePlane,
    TwoStepConfig,
};
use deepbound::bounds::{minmax_bound, quantile_bound, BoundKind};
use deepbound::data::{generate_dataset, LabeledDataset};
use deepbound::detect::{calibrate_threshold, detect, divergence_score, Squeezer};
use deepbound::loss::poly_barrier_loss;
use deepbound::metrics::{checkerboard_energy, difference, ssim};
use deepbound::model::{Arch, Model, ModelSpec};
use deepbound::plane::{enumerate_planes, find_plane, Plane};
use deepbound::profile::{profile_plane, PlaneProfile};
use deepbound::quantile::{NeuronDistribution, GRID};
use deepbound::train::{train, TrainConfig};
use deepbound::weights::{load_model, save_model};
use deepbound::{Graph, NodeId, Tensor};
use common::{eval_f64, relu_pattern};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Targeted attacks toward `(label + 1) % 10` throughout.
const MODE: Mode = Mode::TargetedOffset { offset: 1 };
const ITERS: usize = 200;
const PLAIN_PLANE: &str = "stage2.bias";
const RES_PLANE: &str = "block.bias2+block.shortcut";
const SEARCH_RANGE: (f64, f64) = (0.0, 0.01);
const SEARCH_PROBES: usize = 8;
const PROBE_ITERS: usize = 25;
const PROBE_SAMPLES: usize = 8;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, n: usize, pass: bool, detail: impl AsRef<str>) {
        println!("criterion {n:2}: {} | {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
        self.failures += !pass as usize;
    }
}

fn rate(rs: &[AttackResult], f: impl Fn(&AttackResult) -> bool) -> f64 {
    rs.iter().filter(|r| f(r)).count() as f64 / rs.len() as f64
}

fn mean(rs: &[AttackResult], f: impl Fn(&AttackResult) -> f64) -> f64 {
    rs.iter().map(f).sum::<f64>() / rs.len() as f64
}

fn model_for(arch: Arch, data: &LabeledDataset) -> Model {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{arch}.dbw"));
    if let Ok(m) = load_model(&path) {
        return m;
    }
    let t = Instant::now();
    let (m, report) = train(&ModelSpec::new(arch), data, &TrainConfig::default()).unwrap();
    println!("trained {arch}: held-out accuracy {:.3} in {:.0?}", report.accuracy, t.elapsed());
    save_model(&m, &path).unwrap();
    m
}

fn throttle<'a>(model: &'a Model, plane: &'a Plane, profile: &'a PlaneProfile, kind: BoundKind, eps: f64) -> Throttle<'a> {
    Throttle::new(model, vec![ThrottlePlane { plane, profile, kind, eps }]).unwrap()
}

fn shared_step(samples: &[(Tensor, usize)], model: &Model, th: &Throttle, cfg: &AttackConfig) -> f64 {
    let s = search_step(&samples[..PROBE_SAMPLES], model, th, cfg, SEARCH_RANGE, SEARCH_PROBES, PROBE_ITERS).unwrap();
    assert!(!s.warning, "no feasible step");
    s.step
}

fn main() {
    let started = Instant::now();
    let mut report = Report { failures: 0 };
    let data = generate_dataset(1, 200).unwrap();
    let (train_set, test_set) = data.split();
    let samples: Vec<(Tensor, usize)> = test_set.images.iter().cloned().zip(test_set.labels.iter().copied()).collect();
    let (s50, s100) = (&samples[..50], &samples[..100]);

    gradients(&mut report);
    quantile_oracle(&mut report);
    bound_shapes(&mut report);
    barrier_calibration(&mut report);

    let plain = model_for(Arch::PlainCnn, &data);
    let res = model_for(Arch::ResCnn, &data);

    optimiser_comparison(&mut report, &res, &train_set, s100);

    let planes = enumerate_planes(&plain.graph);
    let plane = find_plane(&planes, PLAIN_PLANE).expect("plain plane");
    let profile = profile_plane(&plain, &train_set.images, plane).unwrap();
    let eps_base = calibrate_epsilon(&plain, &[(plane, &profile)], &plain, s50, &BimConfig::with_eps(MODE, 0.04)).unwrap()[0];
    println!("{PLAIN_PLANE}: eps_base {eps_base:.4}");

    barrier_comparison(&mut report, &plain, plane, &profile, eps_base, s100);
    let sweep = epsilon_sweep(&mut report, &plain, plane, &profile, eps_base, s50);
    calibration_consistency(&mut report, eps_base, &sweep);
    plane_cuts(&mut report, &plain, &res);
    smoothing(&mut report, &plain, plane, &profile, eps_base, s50, &sweep);
    binary_search(&mut report);
    detection(&mut report, &plain, &test_set, &sweep);
    structural_similarity(&mut report, &plain, s50, &sweep);
    pipeline_determinism(&mut report);

    println!("acceptance finished in {:.0?}: {} of 14 criteria failed", started.elapsed(), report.failures);
    // Failing criteria are reported, not hidden; set the variable to turn
    // them into a failing exit status.
    if report.failures > 0 && std::env::var_os("DEEPBOUND_STRICT_ACCEPTANCE").is_some() {
        std::process::exit(1);
    }
}

/// 64-bit central differences of a random logit functional with respect to
/// single input pixels, away from ReLU kinks.
fn gradients(report: &mut Report) {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (arch, seed) in [(Arch::PlainCnn, 21u64), (Arch::ResCnn, 22)] {
        let model = Model::init(ModelSpec::new(arch), seed).unwrap();
        let g = &model.graph;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut done = 0;
        while done < 100 {
            let x: Vec<f32> = (0..3 * 32 * 32).map(|_| rng.random()).collect();
            let u: Vec<f32> = (0..g.classes()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let i = rng.random_range(0..x.len());
            let h = 1e-3;
            let x64: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let shifted = |d: f64| {
                let mut s = x64.clone();
                s[i] += d;
                eval_f64(g, &s)
            };
            let (plus, minus, centre) = (shifted(h), shifted(-h), shifted(0.0));
            let pattern = relu_pattern(g, &centre);
            if relu_pattern(g, &plus) != pattern || relu_pattern(g, &minus) != pattern {
                continue;
            }
            let f = |v: &[Vec<f64>]| v[g.logits_id()].iter().zip(&u).map(|(a, &b)| a * b as f64).sum::<f64>();
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let (_, tape) = g.forward(&Tensor::new(vec![3, 32, 32], x).unwrap()).unwrap();
            let an = tape.backward(&[(g.logits_id(), &Tensor::vector(&u))]).unwrap().input().data()[i] as f64;
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
            done += 1;
        }
        checked += done;
    }
    report.check(
        1,
        worst <= 1e-3,
        format!("input gradients of both architectures vs 64-bit central differences at {checked} points: worst relative error {worst:.2e} (primitive ops: tests/gradients.rs)"),
    );
}

/// Counting/interpolation oracle for the quantile table and its CDF.
fn quantile_oracle(report: &mut Report) {
    // Hazen positions of the order statistics, linear in between.
    fn oracle_quantile(sorted: &[f64], p: f64) -> f64 {
        let n = sorted.len();
        let pos: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        if p <= pos[0] {
            return sorted[0];
        }
        for i in 1..n {
            if p <= pos[i] {
                let t = (p - pos[i - 1]) / (pos[i] - pos[i - 1]);
                return sorted[i - 1] + t * (sorted[i] - sorted[i - 1]);
            }
        }
        sorted[n - 1]
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut q_err, mut c_err, mut rt_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut right_end = true;
    for set in 0..1000 {
        let n = rng.random_range(4..=64);
        // Every fifth set draws from a coarse grid to force ties.
        let s: Vec<f32> = (0..n)
            .map(|_| if set % 5 == 0 { rng.random_range(0..6) as f32 / 4.0 } else { rng.random_range(-1.0f32..1.0) })
            .collect();
        let d = NeuronDistribution::from_samples(&s).unwrap();
        let mut sorted: Vec<f64> = s.iter().map(|&v| v as f64).collect();
        sorted.sort_by(f64::total_cmp);
        // The stored table holds f32 values.
        let table: Vec<f64> = (0..=GRID).map(|j| oracle_quantile(&sorted, j as f64 / GRID as f64) as f32 as f64).collect();
        let interp = |p: f64| {
            let t = p * GRID as f64;
            let j = (t.floor() as usize).min(GRID - 1);
            table[j] + (t - j as f64) * (table[j + 1] - table[j])
        };
        for _ in 0..20 {
            let p: f64 = rng.random();
            q_err = q_err.max((d.quantile(p) as f64 - interp(p)).abs());
        }
        for j in 0..=GRID {
            let p = j as f64 / GRID as f64;
            q_err = q_err.max((d.quantile(p) as f64 - oracle_quantile(&sorted, p)).abs());
        }
        // C(y) = sup{p : Q(p) <= y}, found by bisection.
        let (lo, hi) = (sorted[0], sorted[n - 1]);
        let mut ys: Vec<f32> = (0..20).map(|_| rng.random_range(lo as f32 - 0.1..hi as f32 + 0.1)).collect();
        ys.extend(s.iter().take(5));
        for y in ys {
            let y64 = y as f64;
            let oracle = if y64 < table[0] {
                0.0
            } else if y64 >= table[GRID] {
                1.0
            } else {
                let (mut a, mut b) = (0.0f64, 1.0f64);
                for _ in 0..60 {
                    let m = 0.5 * (a + b);
                    if interp(m) <= y64 {
                        a = m;
                    } else {
                        b = m;
                    }
                }
                a
            };
            c_err = c_err.max((d.cdf(y) - oracle).abs());
        }
        // Interior grid: strictly between the Hazen positions of the extremes,
        // where the table is strictly increasing for distinct samples. Inside a
        // run of tied samples C returns the right end of the run.
        let inner = (0.5 / n as f64, 1.0 - 0.5 / n as f64);
        for j in 1..GRID {
            let q = j as f64 / GRID as f64;
            let back = d.cdf(d.quantile(q));
            if set % 5 == 0 {
                right_end &= back >= q - 1e-9;
            } else if q > inner.0 && q < inner.1 {
                rt_err = rt_err.max((back - q).abs());
            }
        }
    }
    report.check(
        2,
        q_err <= 1e-6 && c_err <= 1e-6 && rt_err <= 1.0 / GRID as f64 && right_end,
        format!(
            "1000 sets: max |C^-1 - oracle| {q_err:.1e}, max |C - oracle| {c_err:.1e}; distinct samples, interior grid: max |C(C^-1(q)) - q| {rt_err:.2e} (limit {:.2e}); tied samples map to the run's right end: {right_end}",
            1.0 / GRID as f64
        ),
    );
}

fn bound_shapes(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut extremes = true;
    let mut contains = true;
    for _ in 0..200 {
        let n = rng.random_range(4..64);
        let s: Vec<f32> = (0..n).map(|_| rng.random_range(-3.0f32..5.0)).collect();
        let d = NeuronDistribution::from_samples(&s).unwrap();
        let y: f32 = rng.random_range(-4.0..6.0);
        let full = quantile_bound(&d, y, 1.0).unwrap();
        extremes &= full.low == d.min().min(y) && full.high == d.max().max(y);
        let eps: f64 = rng.random_range(0.001..1.0);
        contains &= quantile_bound(&d, y, eps).unwrap().contains(y);
    }
    let skewed = NeuronDistribution::from_samples(&[0.0, 0.1, 0.2, 10.0]).unwrap();
    let q = quantile_bound(&skewed, 0.1, 0.3).unwrap();
    let m = minmax_bound(&skewed, 0.1, 0.3).unwrap();
    let (q_down, q_up) = (0.1 - q.low as f64, q.high as f64 - 0.1);
    let (m_down, m_up) = (0.1f32 as f64 - m.low as f64, m.high as f64 - 0.1f32 as f64);
    // Endpoints are f32: symmetric up to one rounding of each endpoint.
    let ulp = f32::EPSILON as f64 * m.high.abs().max(m.low.abs()) as f64;
    let asym = (q_up - q_down).abs() > 0.1;
    let sym = (m_up - m_down).abs() <= ulp;
    report.check(
        3,
        extremes && contains && asym && sym,
        format!(
            "eps=1 gives extremes: {extremes}; contains y_nat: {contains}; skewed set eps=0.3: quantile [-{q_down:.3}, +{q_up:.3}], min-max [-{m_down:.6}, +{m_up:.6}]"
        ),
    );
}

fn barrier_calibration(report: &mut Report) {
    let v = poly_barrier_loss(0.99, 0.0, -1.0, 1.0, 1e5, 200.0);
    let expected = 1e5 * 0.99f64.powi(200);
    report.check(4, (v / expected - 1.0).abs() <= 0.01, format!("barrier at ratio 0.99: {v:.1} (expected {expected:.1})"));
}

fn optimiser_comparison(report: &mut Report, res: &Model, train_set: &LabeledDataset, samples: &[(Tensor, usize)]) {
    let t = Instant::now();
    let planes = enumerate_planes(&res.graph);
    let plane = find_plane(&planes, RES_PLANE).expect("res plane");
    let profile = profile_plane(res, &train_set.images, plane).unwrap();
    let th = throttle(res, plane, &profile, BoundKind::MinMax, 0.01);
    let base = AttackConfig { mode: MODE, max_iters: ITERS, ..AttackConfig::default() };
    let cfg = AttackConfig { step: shared_step(samples, res, &th, &base), ..base };
    let poly = run_batch(samples, |x, l| d2b_attack(x, l, res, &th, &cfg)).unwrap();
    let clip_cfg = ClipConfig { mode: MODE, iters: ITERS, ..ClipConfig::default() };
    let clip = run_batch(samples, |x, l| clipping_attack(x, l, res, &th, &clip_cfg)).unwrap();
    let two_cfg = TwoStepConfig { mode: MODE, ..TwoStepConfig::default() };
    let two = run_batch(samples, |x, l| two_step_attack(x, l, res, &th, &two_cfg)).unwrap();

    let summary = |rs: &[AttackResult]| {
        (rate(rs, |r| r.feasible), mean(rs, |r| r.occupancy), rate(rs, |r| r.success), rs.iter().all(|r| r.consistent), rs.iter().any(|r| r.consistent))
    };
    let (pf, po, ps, pc, _) = summary(&poly);
    let (cf, co, cs, _, cc) = summary(&clip);
    let (tf, to, ts, _, tc) = summary(&two);
    let pass = pf >= 0.95 && po < 1.0 && (cf == 0.0 || co > 1.0) && (tf == 0.0 || to > 1.0) && pc && !cc && !tc;
    report.check(
        5,
        pass,
        format!(
            "res-cnn {RES_PLANE}, min-max 1%, {} samples, step {:.2e}: poly feasible {pf:.2} occupancy {:.0}% success {ps:.2}; clip feasible {cf:.2} occupancy {:.0}% success {cs:.2}; two-step feasible {tf:.2} occupancy {:.0}% success {ts:.2}; consistent poly/clip/two-step {pc}/{cc}/{tc} ({:.0?})",
            samples.len(),
            cfg.step,
            po * 100.0,
            co * 100.0,
            to * 100.0,
            t.elapsed()
        ),
    );
}

fn barrier_comparison(report: &mut Report, m: &Model, plane: &Plane, profile: &PlaneProfile, eps_base: f64, samples: &[(Tensor, usize)]) {
    let t = Instant::now();
    let th = throttle(m, plane, profile, BoundKind::Quantile, 0.4 * eps_base);
    let checkpoints = [10usize, 25, 50, 100, 150, 200];
    let mut curves = BTreeMap::new();
    let mut steps = Vec::new();
    for barrier in [BarrierKind::Polynomial, BarrierKind::Linear] {
        let base = AttackConfig { mode: MODE, barrier, max_iters: ITERS, patience: usize::MAX, ..AttackConfig::default() };
        let cfg = AttackConfig { step: shared_step(samples, m, &th, &base), ..base };
        steps.push(cfg.step);
        let rs = run_batch(samples, |x, l| d2b_attack(x, l, m, &th, &cfg)).unwrap();
        let at = |r: &AttackResult, c: usize| r.trace[(c - 1).min(r.trace.len() - 1)].clone();
        let curve: Vec<(f64, f64)> =
            checkpoints.iter().map(|&c| (rate(&rs, |r| at(r, c).success), rate(&rs, |r| at(r, c).feasible))).collect();
        curves.insert(barrier == BarrierKind::Polynomial, curve);
    }
    let (poly, lin) = (&curves[&true], &curves[&false]);
    let first = |curve: &[(f64, f64)], level: f64| curve.iter().position(|&(s, _)| s >= level);
    let mut pass = true;
    for &(level, _) in lin.iter().filter(|(s, _)| *s > 0.0) {
        let (li, pi) = (first(lin, level).unwrap(), first(poly, level));
        pass &= matches!(pi, Some(pi) if pi <= li && poly[pi].1 >= lin[li].1);
    }
    let fmt = |c: &[(f64, f64)]| {
        checkpoints.iter().zip(c).map(|(i, (s, f))| format!("{i}:{s:.2}/{f:.2}")).collect::<Vec<_>>().join(" ")
    };
    report.check(
        6,
        pass,
        format!(
            "plain-cnn {PLAIN_PLANE}, 40% eps, {} samples, iteration:success/in-bound; poly (step {:.2e}) {}; linear (step {:.2e}) {} ({:.0?})",
            samples.len(),
            steps[0],
            fmt(poly),
            steps[1],
            fmt(lin),
            t.elapsed()
        ),
    );
}

/// Results of the epsilon sweep, by percentage of `eps_base`.
struct Sweep {
    step: f64,
    runs: Vec<(u32, f64, Vec<AttackResult>)>,
}

fn epsilon_sweep(report: &mut Report, m: &Model, plane: &Plane, profile: &PlaneProfile, eps_base: f64, samples: &[(Tensor, usize)]) -> Sweep {
    let t = Instant::now();
    let base = AttackConfig { mode: MODE, max_iters: ITERS, ..AttackConfig::default() };
    // One step for the whole sweep, searched at the tightest setting.
    let step = shared_step(samples, m, &throttle(m, plane, profile, BoundKind::Quantile, 0.1 * eps_base), &base);
    let cfg = AttackConfig { step, ..base };
    let mut runs = Vec::new();
    for pct in [10u32, 20, 30, 40, 50] {
        let eps = eps_base * pct as f64 / 100.0;
        let th = throttle(m, plane, profile, BoundKind::Quantile, eps);
        runs.push((pct, eps, run_batch(samples, |x, l| d2b_attack(x, l, m, &th, &cfg)).unwrap()));
    }
    let rows: Vec<(f64, f64, f64, bool)> = runs
        .iter()
        .map(|(_, eps, rs)| {
            let within = rs.iter().filter(|r| r.feasible).all(|r| r.quantile_distances[0] <= eps + 1.0 / GRID as f64);
            (mean(rs, |r| r.quantile_distances[0]), rate(rs, |r| r.success), mean(rs, |r| r.confidence), within)
        })
        .collect();
    let increasing = rows.windows(2).all(|w| w[1].0 > w[0].0);
    let success_up = rows.windows(2).all(|w| w[1].1 >= w[0].1);
    let confidence_up = rows.windows(2).all(|w| w[1].2 >= w[0].2);
    let within = rows.iter().all(|r| r.3);
    let table = runs
        .iter()
        .zip(&rows)
        .map(|((pct, _, _), (qd, s, c, _))| format!("{pct}%: qd {qd:.3} success {s:.2} confidence {c:.2}"))
        .collect::<Vec<_>>()
        .join("; ");
    report.check(
        7,
        increasing && success_up && confidence_up && within,
        format!("plain-cnn {PLAIN_PLANE}, {} samples, step {step:.2e}: {table}; within eps {within} ({:.0?})", samples.len(), t.elapsed()),
    );
    Sweep { step, runs }
}

fn calibration_consistency(report: &mut Report, eps_base: f64, sweep: &Sweep) {
    let (_, _, d50) = sweep.runs.last().unwrap();
    let qd = d50.iter().map(|r| r.quantile_distances[0]).fold(0.0, f64::max);
    report.check(8, eps_base > 0.3 && eps_base > qd, format!("eps_base {eps_base:.3} on {PLAIN_PLANE}; largest D2B-50 quantile distance {qd:.3}"));
}

/// Independent reachability: can the logits be reached from the input
/// avoiding `removed`?
fn reachable(graph: &Graph, removed: &[NodeId]) -> bool {
    let mut live = vec![false; graph.nodes().len()];
    for (id, node) in graph.nodes().iter().enumerate() {
        live[id] = !removed.contains(&id) && (id == graph.input_id() || node.inputs.iter().any(|&i| live[i]));
    }
    live[graph.logits_id()]
}

fn plane_cuts(report: &mut Report, plain: &Model, res: &Model) {
    let mut all_cut = true;
    let mut count = 0;
    for m in [plain, res] {
        for p in enumerate_planes(&m.graph) {
            all_cut &= !reachable(&m.graph, &p.nodes);
            count += 1;
        }
    }
    let res_planes = enumerate_planes(&res.graph);
    let main_only = res.graph.node_id("block.bias2").unwrap();
    let rejected = reachable(&res.graph, &[main_only]) && res_planes.iter().all(|p| p.nodes != [main_only]);
    let pair = res_planes.iter().any(|p| p.name == RES_PLANE);
    report.check(
        9,
        all_cut && rejected && pair,
        format!("{count} planes, all cuts: {all_cut}; main-branch-only site rejected: {rejected}; operand-pair plane present: {pair}"),
    );
}

fn smoothing(report: &mut Report, m: &Model, plane: &Plane, profile: &PlaneProfile, eps_base: f64, samples: &[(Tensor, usize)], sweep: &Sweep) {
    let t = Instant::now();
    let (_, eps, with) = &sweep.runs[0];
    let th = throttle(m, plane, profile, BoundKind::Quantile, *eps);
    let mut cfg = AttackConfig { mode: MODE, max_iters: ITERS, step: sweep.step, ..AttackConfig::default() };
    cfg.weights.alpha = 0.0;
    let without = run_batch(samples, |x, l| d2b_attack(x, l, m, &th, &cfg)).unwrap();
    let energy = |rs: &[AttackResult]| {
        rs.iter().zip(samples).map(|(r, (x, _))| checkerboard_energy(&difference(x, &r.x_adv).unwrap()).unwrap()).sum::<f64>() / rs.len() as f64
    };
    let (e10, e0) = (energy(with), energy(&without));
    let (s10, s0) = (rate(with, |r| r.success), rate(&without, |r| r.success));
    report.check(
        10,
        e10 <= e0 && s0 - s10 < 0.10,
        format!(
            "{}% of eps_base ({:.3}), {} samples: checkerboard energy {e10:.4} (alpha 10) vs {e0:.4} (alpha 0); success {s10:.2} vs {s0:.2} ({:.0?})",
            sweep.runs[0].0,
            eps_base * 0.1,
            samples.len(),
            t.elapsed()
        ),
    );
}

fn binary_search(report: &mut Report) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..50 {
        let (lo, hi) = (rng.random_range(0.0..0.01), rng.random_range(0.02..1.0));
        let threshold = rng.random_range(lo..hi);
        let probes = rng.random_range(8..24);
        let s = binary_search_step(|x| x <= threshold, lo, hi, probes);
        let tol = (hi - lo) / (1u64 << probes) as f64;
        worst = worst.max((s.step - threshold).abs() / tol);
        ok &= s.step <= threshold && threshold - s.step <= tol && !s.warning;
    }
    report.check(11, ok, format!("50 predicates: worst error {worst:.2} of the (hi - lo) / 2^probes tolerance"));
}

fn detection(report: &mut Report, m: &Model, test_set: &LabeledDataset, sweep: &Sweep) {
    let squeezers = Squeezer::standard();
    let benign = &test_set.images[100..300];
    let (calib, held) = benign.split_at(100);
    let scores: Vec<f64> = calib.iter().map(|x| divergence_score(m, x, &squeezers).unwrap()).collect();
    let threshold = calibrate_threshold(&scores).unwrap();
    let adv: Vec<&Tensor> = sweep.runs.last().unwrap().2.iter().map(|r| &r.x_adv).collect();
    let flags = || -> Vec<bool> {
        calib.iter().chain(held).chain(adv.iter().copied()).map(|x| detect(m, x, &squeezers, threshold).unwrap()).collect()
    };
    let (first, second) = (flags(), flags());
    let calib_rate = first[..calib.len()].iter().filter(|&&f| f).count() as f64 / calib.len() as f64;
    let held_rate = first[calib.len()..calib.len() + held.len()].iter().filter(|&&f| f).count() as f64 / held.len() as f64;
    let adv_rate = first[calib.len() + held.len()..].iter().filter(|&&f| f).count() as f64 / adv.len() as f64;
    report.check(
        12,
        calib_rate <= 0.05 && first == second,
        format!(
            "threshold {threshold:.4}: benign false-flag rate {calib_rate:.2} (held-out {held_rate:.2}), D2B-50 flagged {adv_rate:.2}; reruns identical: {}",
            first == second
        ),
    );
}

fn structural_similarity(report: &mut Report, m: &Model, samples: &[(Tensor, usize)], sweep: &Sweep) {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut identity, mut asym) = (true, 0.0f64);
    for (x, _) in samples.iter().take(20) {
        identity &= ssim(x, x).unwrap() == 1.0;
        let noise: Vec<f32> = (0..x.len()).map(|_| rng.random_range(-0.05f32..0.05)).collect();
        let y = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&noise).map(|(v, n)| (v + n).clamp(0.0, 1.0)).collect()).unwrap();
        asym = asym.max((ssim(x, &y).unwrap() - ssim(&y, x).unwrap()).abs());
    }
    let mean_ssim = |rs: &[AttackResult]| rs.iter().zip(samples).map(|(r, (x, _))| ssim(x, &r.x_adv).unwrap()).sum::<f64>() / rs.len() as f64;
    let (pct, _, d2b) = &sweep.runs[0];
    let (d_ssim, d_success) = (mean_ssim(d2b), rate(d2b, |r| r.success));
    // Smallest pixel budget whose success reaches the bounded attack's.
    let grid = [0.0025, 0.005, 0.0075, 0.01, 0.015, 0.02, 0.03, 0.04];
    let mut matched = None;
    for eps in grid {
        let rs = run_batch(samples, |x, l| bim_attack(x, l, m, &BimConfig::with_eps(MODE, eps), None)).unwrap();
        if rate(&rs, |r| r.success) >= d_success || eps == grid[grid.len() - 1] {
            matched = Some((eps, rate(&rs, |r| r.success), mean_ssim(&rs)));
            break;
        }
    }
    let (b_eps, b_success, b_ssim) = matched.unwrap();
    report.check(
        13,
        identity && asym <= 1e-6 && d_ssim - b_ssim >= 0.0 && b_success >= d_success,
        format!(
            "ssim(x,x)=1: {identity}; max asymmetry {asym:.1e}; D2B-{pct} SSIM {d_ssim:.4} (success {d_success:.2}) vs BIM eps {b_eps} SSIM {b_ssim:.4} (success {b_success:.2}) over {} samples",
            samples.len()
        ),
    );
}

fn run_cli(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_deepbound")).args(args).env("RUST_LOG", "error").output().unwrap();
    assert!(out.status.success(), "deepbound {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn pipeline(root: &Path) {
    let p = |s: &str| root.join(s).to_str().unwrap().to_string();
    run_cli(&["generate", "--seed", "5", "--per-class", "10", "--out", &p("data")]);
    run_cli(&["train", "--arch", "plain-cnn", "--seed", "2", "--data", &p("data"), "--epochs", "3", "--out", &p("model.dbw")]);
    run_cli(&["profile", "--model", &p("model.dbw"), "--data", &p("data"), "--out", &p("profiles")]);
    run_cli(&["calibrate", "--reference", &p("model.dbw"), "--profiles", &p("profiles"), "--data", &p("data"), "--samples", "10", "--out", &p("calibration.csv")]);
    run_cli(&[
        "attack", "--target", &p("model.dbw"), "--profiles", &p("profiles"), "--data", &p("data"), "--samples", "6",
        "--eps-rel", "40", "--calibration", &p("calibration.csv"), "--iters", "20", "--probes", "6", "--probe-iters", "5",
        "--probe-samples", "3", "--out", &p("d2b"),
    ]);
    run_cli(&["attack", "--method", "bim", "--target", &p("model.dbw"), "--data", &p("data"), "--samples", "6", "--out", &p("bim")]);
    run_cli(&["evaluate", "--model", &p("model.dbw"), "--attack", &p("d2b"), "--out", &p("transfer.csv")]);
    run_cli(&["detect", "--model", &p("model.dbw"), "--benign", &p("data"), "--attack", &p("bim"), "--out", &p("flags.csv")]);
    run_cli(&["diff", "--attack", &p("d2b"), "--data", &p("data"), "--out", &p("diff")]);
    run_cli(&["report", "--input", &p("d2b"), &p("bim"), "--out", &p("report")]);
}

fn pipeline_determinism(report: &mut Report) {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let differing: Vec<_> = ta.keys().filter(|k| tb.get(*k) != ta.get(*k)).cloned().collect();
    report.check(
        14,
        ta.len() == tb.len() && differing.is_empty(),
        format!("two CLI pipeline runs: {} vs {} files, {} differ ({:.0?})", ta.len(), tb.len(), differing.len(), t.elapsed()),
    );
}
