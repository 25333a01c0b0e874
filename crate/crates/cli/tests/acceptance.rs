//! Acceptance checks, one PASS/FAIL line per criterion. Select a subset with
//! `cargo test --release --test acceptance -- 3 5`.
//!
//! Criteria 6 to 8 share one toy task: WRN-10-1 on a 10-class synthetic set
//! of 32x32 images, a teacher trained once, and Fisher and random pruning
//! curves for three seeds.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use staircase::data::{synthetic, Split, SyntheticConfig};
use staircase::discovery::{discover, estimate_latency, nearest_point, Origin};
use staircase::distill::{attention_grads, attention_map, attention_term, distill, DistillConfig, Distance};
use staircase::nn::{
    cross_entropy, evaluate, train_from_scratch, BatchNorm2d, Conv2d, GlobalAvgPool, GroupSpec, Linear, Mode, NetworkSpec,
    Relu, TrainConfig,
};
use staircase::profiler::{
    detect_steps, profile_network, sweep_layer, FakeTimer, HarnessConfig, LatencyProfile, MonotonicTimer, NetworkProfile,
    OptimalPoints, Sample, SIGMA,
};
use staircase::saliency::{prune_loop, sample_indices, FisherAccumulator, PruneConfig, PruneMethod};
use staircase::tensor::{ConvGeometry, Gemm};
use staircase::{Network, Rng, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn main() -> ExitCode {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut toy = Toy::new();
    let mut failed = 0;
    for n in 1..=9 {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| match n {
            1 => fisher_oracle(),
            2 => gradient_suite(),
            3 => step_fixtures(),
            4 => real_staircase(),
            5 => snapping_fixtures(),
            6 => pruning_quality(&mut toy),
            7 => distillation_direction(&mut toy),
            8 => snapping_direction(&mut toy),
            _ => determinism(),
        }));
        let secs = start.elapsed().as_secs_f64();
        let v = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!v.pass);
        println!("criterion {n}: {} ({secs:.1}s) {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- criterion 1

fn fisher_oracle() -> Verdict {
    let mut rng = Rng::new(101);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let c = 1 + rng.below(6);
        let mut acc = FisherAccumulator::new(&[c]);
        let mask = vec![vec![true; c]];
        let mut oracle = vec![0.0; c];
        for _ in 0..1 + rng.below(5) {
            let (n, h, w) = (1 + rng.below(4), 1 + rng.below(8), 1 + rng.below(8));
            let a = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut rng);
            let g = Tensor::<f64>::randn(&[n, c, h, w], 1.0, &mut rng);
            acc.accumulate(&[&a], &[&g], &mask).unwrap();
            for ch in 0..c {
                for e in 0..n {
                    let mut s = 0.0;
                    for i in 0..h {
                        for j in 0..w {
                            let k = ((e * c + ch) * h + i) * w + j;
                            s += a.data()[k] * g.data()[k];
                        }
                    }
                    oracle[ch] += s * s / (2.0 * n as f64);
                }
            }
        }
        for (got, want) in acc.values()[0].iter().zip(&oracle) {
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        }
    }
    verdict(worst <= 1e-6, format!("50 batch sequences, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 2

const H: f64 = 1e-5;

#[derive(Default)]
struct GradReport {
    checked: usize,
    bad: Vec<String>,
    worst: f64,
}

impl GradReport {
    /// Central differences of `f` at every entry of `x` against `analytic`.
    fn check(&mut self, what: &str, x: &Tensor<f64>, analytic: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) {
        assert_eq!(x.shape(), analytic.shape(), "{what}: gradient shape");
        let mut probe = x.clone();
        for i in 0..x.len() {
            let orig = probe.data()[i];
            probe.data_mut()[i] = orig + H;
            let up = f(&probe);
            probe.data_mut()[i] = orig - H;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic.data()[i];
            let diff = (numeric - a).abs();
            let scale = numeric.abs().max(a.abs());
            self.checked += 1;
            self.worst = self.worst.max(diff / scale.max(1e-8));
            if diff > 1e-6 && diff > 1e-4 * scale {
                self.bad.push(format!("{what}[{i}] {numeric} vs {a}"));
            }
        }
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn gradient_suite() -> Verdict {
    let mut r = GradReport::default();
    let mut rng = Rng::new(202);
    let gemm = Gemm::single_thread();

    for geometry in [ConvGeometry::same3x3(1), ConvGeometry::same3x3(2), ConvGeometry::projection(2)] {
        let mut conv = Conv2d::<f64>::new(3, 4, geometry, &mut rng);
        let x = Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng);
        let y = conv.forward(&x, gemm).unwrap();
        let s = Tensor::randn(y.shape(), 1.0, &mut rng);
        let dx = conv.backward(&s, gemm, true).unwrap().unwrap();
        let (w, dw) = (conv.weight.value.clone(), conv.weight.grad.clone());
        r.check("conv dx", &x, &dx, |x| dot(&conv.infer(x, gemm).unwrap(), &s));
        r.check("conv dw", &w, &dw, |w| {
            dot(&Conv2d::from_weight(w.clone(), geometry).unwrap().infer(&x, gemm).unwrap(), &s)
        });
    }

    let mut bn = BatchNorm2d::<f64>::new(3);
    bn.gamma.value = Tensor::randn(&[3], 1.0, &mut rng);
    bn.beta.value = Tensor::randn(&[3], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 3, 2, 2], 1.0, &mut rng);
    let y = bn.forward(&x, Mode::Train).unwrap();
    let s = Tensor::randn(y.shape(), 1.0, &mut rng);
    let dx = bn.backward(&s).unwrap();
    let (g, b) = (bn.gamma.value.clone(), bn.beta.value.clone());
    let (dg, db) = (bn.gamma.grad.clone(), bn.beta.grad.clone());
    let train_bn = |x: &Tensor<f64>, g: &Tensor<f64>, b: &Tensor<f64>| {
        let mut n = BatchNorm2d::<f64>::new(3);
        n.gamma.value = g.clone();
        n.beta.value = b.clone();
        dot(&n.forward(x, Mode::Train).unwrap(), &s)
    };
    r.check("bn dx", &x, &dx, |x| train_bn(x, &g, &b));
    r.check("bn dgamma", &g, &dg, |g| train_bn(&x, g, &b));
    r.check("bn dbeta", &b, &db, |b| train_bn(&x, &g, b));

    let mut bn = BatchNorm2d::<f64>::new(2);
    bn.running_mean = Tensor::randn(&[2], 1.0, &mut rng);
    bn.running_var = Tensor::full(&[2], 2.5);
    bn.gamma.value = Tensor::randn(&[2], 1.0, &mut rng);
    let x = Tensor::randn(&[2, 2, 3, 3], 1.0, &mut rng);
    let y = bn.forward(&x, Mode::Eval).unwrap();
    let s = Tensor::randn(y.shape(), 1.0, &mut rng);
    let dx = bn.backward(&s).unwrap();
    r.check("bn eval dx", &x, &dx, |x| dot(&bn.infer(x).unwrap(), &s));

    let x = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
    let mut relu = Relu::default();
    let y = relu.forward(&x);
    let s = Tensor::randn(y.shape(), 1.0, &mut rng);
    r.check("relu", &x, &relu.backward(&s).unwrap(), |x| dot(&Relu::infer(x), &s));
    let mut pool = GlobalAvgPool::default();
    let y = pool.forward(&x).unwrap();
    let s = Tensor::randn(y.shape(), 1.0, &mut rng);
    r.check("pool", &x, &pool.backward(&s).unwrap(), |x| dot(&GlobalAvgPool::infer(x).unwrap(), &s));

    let mut lin = Linear::<f64>::new(5, 3, &mut rng);
    lin.bias.value = Tensor::randn(&[3], 1.0, &mut rng);
    let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
    let y = lin.forward(&x, gemm).unwrap();
    let s = Tensor::randn(y.shape(), 1.0, &mut rng);
    let dx = lin.backward(&s, gemm).unwrap();
    let (w, b) = (lin.weight.value.clone(), lin.bias.value.clone());
    let (dw, db) = (lin.weight.grad.clone(), lin.bias.grad.clone());
    r.check("linear dx", &x, &dx, |x| dot(&lin.infer(x, gemm).unwrap(), &s));
    r.check("linear dw", &w, &dw, |w| dot(&Linear::from_parts(w.clone(), b.clone()).infer(&x, gemm).unwrap(), &s));
    r.check("linear db", &b, &db, |b| dot(&Linear::from_parts(w.clone(), b.clone()).infer(&x, gemm).unwrap(), &s));

    let z = Tensor::<f64>::randn(&[5, 4], 2.0, &mut rng);
    let labels = [0, 3, 1, 1, 2];
    let (_, dz) = cross_entropy(&z, &labels).unwrap();
    r.check("cross-entropy", &z, &dz, |z| cross_entropy(z, &labels).unwrap().0);

    for distance in [
        Distance { squared: false, per_element: false },
        Distance { squared: true, per_element: false },
        Distance { squared: false, per_element: true },
        Distance { squared: true, per_element: true },
    ] {
        let acts = [Tensor::randn(&[2, 3, 3, 3], 1.0, &mut rng), Tensor::randn(&[2, 2, 2, 2], 1.0, &mut rng)];
        let teacher = [
            attention_map(&Tensor::randn(&[2, 5, 3, 3], 1.0, &mut rng)).unwrap(),
            attention_map(&Tensor::randn(&[2, 4, 2, 2], 1.0, &mut rng)).unwrap(),
        ];
        let beta = 7.0;
        let (_, grads) = attention_grads(&teacher, &acts, beta, distance).unwrap();
        for p in 0..acts.len() {
            r.check(&format!("attention {distance:?} point {p}"), &acts[p], &grads[p], |a| {
                let mut all = acts.clone();
                all[p] = a.clone();
                let maps: Vec<Tensor<f64>> = all.iter().map(|x| attention_map(x).unwrap()).collect();
                beta * attention_term(&teacher, &maps, distance).unwrap()
            });
        }
    }

    // Whole network, with one pruned channel and injected attention gradients.
    let spec = NetworkSpec {
        input: [2, 6, 6],
        classes: 3,
        stem_width: 3,
        groups: vec![
            GroupSpec { width: 3, stride: 1, blocks: vec![2] },
            GroupSpec { width: 4, stride: 2, blocks: vec![3, 2] },
        ],
        attention: vec![0, 1],
    };
    let mut net = Network::<f64>::new(&spec, &mut rng).unwrap();
    net.prune_channel(1, 1).unwrap();
    let x = Tensor::randn(&[3, 2, 6, 6], 1.0, &mut rng);
    let labels = [0, 2, 1];
    let out = net.forward(&x, Mode::Train).unwrap();
    let s: Vec<Tensor<f64>> = out.attention.iter().map(|a| Tensor::randn(a.shape(), 0.1, &mut rng)).collect();
    let (_, dlogits) = cross_entropy(&out.logits, &labels).unwrap();
    net.backward(&dlogits, Some(&s)).unwrap();
    let params: Vec<(Tensor<f64>, Tensor<f64>)> = net.params_mut().iter().map(|p| (p.value.clone(), p.grad.clone())).collect();
    for (k, (v, g)) in params.iter().enumerate() {
        let mut probe = net.clone();
        r.check(&format!("network param {k}"), v, g, |v| {
            probe.params_mut()[k].value = v.clone();
            let out = probe.forward(&x, Mode::Train).unwrap();
            let (ce, _) = cross_entropy(&out.logits, &labels).unwrap();
            ce + out.attention.iter().zip(&s).map(|(a, s)| dot(a, s)).sum::<f64>()
        });
    }

    let detail = format!("{} entries, worst relative error {:.2e}", r.checked, r.worst);
    match r.bad.first() {
        None => verdict(true, detail),
        Some(first) => verdict(false, format!("{detail}; {} mismatches, first {first}", r.bad.len())),
    }
}

// ---------------------------------------------------------------- criterion 3

fn profile_of(times: &[f64]) -> LatencyProfile {
    LatencyProfile {
        layer: 0,
        input: [1, 1, 1],
        stride: 1,
        samples: times
            .iter()
            .enumerate()
            .map(|(i, &t)| Sample { channels: i + 1, median_ns: t, iqr_ns: 0.0, flagged: false })
            .collect(),
    }
}

fn step_fixtures() -> Verdict {
    let plateau: Vec<f64> = (1..=20).map(|c| if c <= 10 { 100.0 } else { 200.0 }).collect();
    let constant = vec![50.0; 20];
    let linear: Vec<f64> = (1..=20).map(|c| 3.0 + 0.5 * c as f64).collect();
    let quick = HarnessConfig { warmup: 0, runs: 3, ..Default::default() };
    let mut fake = FakeTimer::Ceil { step: 8, ns: 1000.0 };
    let stair = sweep_layer(0, 16, (8, 8), ConvGeometry::same3x3(1), 64, &quick, &mut fake).unwrap();
    let got = [
        detect_steps(&profile_of(&plateau)).unwrap().points,
        detect_steps(&profile_of(&constant)).unwrap().points,
        detect_steps(&profile_of(&linear)).unwrap().points,
        detect_steps(&stair).unwrap().points,
    ];
    let want = [vec![10], vec![], vec![], (1..8).map(|k| 8 * k).collect::<Vec<_>>()];
    verdict(got == want, format!("plateau {:?}, constant {:?}, linear {:?}, ceil(c/8) {:?}", got[0], got[1], got[2], got[3]))
}

// ---------------------------------------------------------------- criterion 4

fn real_staircase() -> Verdict {
    let start = Instant::now();
    let harness = HarnessConfig { warmup: 1, runs: 5, ..Default::default() };
    let mut timer = MonotonicTimer::new();
    let p = sweep_layer(0, 64, (56, 56), ConvGeometry::same3x3(1), 256, &harness, &mut timer).unwrap();
    let points = detect_steps(&p).unwrap().points;
    let secs = start.elapsed().as_secs_f64();
    let m = p.medians();
    verdict(
        !points.is_empty() && secs < 600.0,
        format!(
            "3x3 conv 64->1..256 at 56x56: steps after {points:?}; 1 ch {:.2} ms, 256 ch {:.2} ms",
            m[0] / 1e6,
            m[255] / 1e6
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn one_group(widths: &[usize]) -> NetworkSpec {
    NetworkSpec {
        input: [3, 8, 8],
        classes: 10,
        stem_width: 4,
        groups: vec![GroupSpec { width: 4, stride: 1, blocks: widths.to_vec() }],
        attention: vec![0],
    }
}

fn points_for(sets: &[Vec<usize>]) -> Vec<OptimalPoints> {
    sets.iter()
        .enumerate()
        .map(|(layer, p)| OptimalPoints { layer, points: p.clone(), sigma: SIGMA })
        .collect()
}

fn snapping_fixtures() -> Verdict {
    let t = one_group(&[128, 40, 16]);
    let f = t.with_widths(&[100, 30, 7]).unwrap();
    let fixture = discover(&t, &f, &points_for(&[vec![64, 128], vec![], vec![8, 16]])).unwrap().spec.widths();
    let mut failures = Vec::new();
    let mut rng = Rng::new(505);
    for case in 0..100 {
        let layers = 1 + rng.below(4);
        let tw: Vec<usize> = (0..layers).map(|_| 1 + rng.below(64)).collect();
        let fw: Vec<usize> = tw.iter().map(|&t| 1 + rng.below(t)).collect();
        let sets: Vec<Vec<usize>> = tw
            .iter()
            .map(|&t| {
                let mut s: Vec<usize> = (0..rng.below(4)).map(|_| 1 + rng.below(t)).collect();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        let t = one_group(&tw);
        let f = t.with_widths(&fw).unwrap();
        let points = points_for(&sets);
        let s = discover(&t, &f, &points).unwrap();
        let idempotent = discover(&t, &s.spec, &points).unwrap().spec == s.spec;
        let fallback = s.layers.iter().zip(&sets).zip(&fw).all(|((c, set), &w)| {
            if set.is_empty() {
                c.origin == Origin::FisherFallback && c.chosen == w
            } else {
                c.origin == Origin::OptimalPoint && c.chosen == nearest_point(w, set).unwrap() && set.contains(&c.chosen)
            }
        });
        let empty = points_for(&vec![vec![]; layers]);
        let all_fallback = discover(&t, &f, &empty).unwrap().spec == f;
        if !(idempotent && fallback && all_fallback) {
            failures.push(case);
        }
    }
    verdict(
        fixture == [128, 30, 8] && failures.is_empty(),
        format!("(100,30,7) -> {fixture:?}; 100 random fixtures, failing cases {failures:?}"),
    )
}

// ---------------------------------------------------------- toy task (6 to 8)

const SEEDS: [u64; 3] = [0, 1, 2];
const SAMPLES: usize = 10;

fn toy_train(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 6,
        batch_size: 64,
        lr: 0.1,
        lr_decay: 5.0,
        lr_milestones: vec![3, 5],
        seed,
        ..TrainConfig::default()
    }
}

fn toy_prune(method: PruneMethod, seed: u64) -> PruneConfig {
    PruneConfig {
        method,
        lr: toy_train(seed).lowest_lr(),
        steps_per_prune: 10,
        batch_size: 32,
        seed,
        ..PruneConfig::default()
    }
}

struct Pruned {
    spec: NetworkSpec,
    test_err: f64,
}

struct Toy {
    data: Option<Split>,
    teacher: Option<Network<f32>>,
    curves: BTreeMap<(PruneMethod, u64), Vec<Pruned>>,
    profile: Option<NetworkProfile>,
}

impl Toy {
    fn new() -> Self {
        Self { data: None, teacher: None, curves: BTreeMap::new(), profile: None }
    }

    fn data(&mut self) -> &Split {
        self.data.get_or_insert_with(|| {
            synthetic(&SyntheticConfig { classes: 10, shape: [3, 32, 32], train: 2000, test: 1000, ..Default::default() })
                .unwrap()
        })
    }

    fn teacher(&mut self) -> &Network<f32> {
        if self.teacher.is_none() {
            let spec = NetworkSpec::wide_resnet(10, 1, [3, 32, 32], 10).unwrap();
            let (net, m) = train_from_scratch::<f32>(&spec, self.data(), &toy_train(0)).unwrap();
            eprintln!("  teacher: {} params, test error {:.3}", spec.param_count(), m.last().unwrap().test_err);
            self.teacher = Some(net);
        }
        self.teacher.as_ref().unwrap()
    }

    /// Pruning curve sampled at `SAMPLES` evenly spaced parameter counts.
    fn curve(&mut self, method: PruneMethod, seed: u64) -> &[Pruned] {
        if !self.curves.contains_key(&(method, seed)) {
            let mut net = self.teacher().clone();
            let data = self.data.as_ref().unwrap();
            let outcome = prune_loop(&mut net, &data.train, &toy_prune(method, seed)).unwrap();
            let picks = sample_indices(&outcome.trace, SAMPLES).unwrap();
            let curve: Vec<Pruned> = picks
                .into_iter()
                .map(|event| {
                    let net = outcome.snapshots[event].restore::<f32>().unwrap().compact().unwrap();
                    let (_, test_err) = evaluate(&net, &data.test, 250).unwrap();
                    Pruned { spec: net.spec().clone(), test_err }
                })
                .collect();
            let errs: Vec<String> = curve.iter().map(|p| format!("{:.3}", p.test_err)).collect();
            eprintln!("  {method} seed {seed}: errors {}", errs.join(" "));
            self.curves.insert((method, seed), curve);
        }
        &self.curves[&(method, seed)]
    }

    /// Host-timed profile of the teacher's prunable layers.
    fn profile(&mut self) -> &NetworkProfile {
        if self.profile.is_none() {
            let spec = self.teacher().spec().clone();
            let p = profile_network(&spec, &HarnessConfig::default(), &mut MonotonicTimer::new()).unwrap();
            for pts in &p.points {
                eprintln!("  layer {} optimal points {:?}", pts.layer, pts.points);
            }
            self.profile = Some(p);
        }
        self.profile.as_ref().unwrap()
    }
}

/// Largest latency jump across a detected step of this layer; zero when
/// the layer has none.
fn step_height(profile: &NetworkProfile, layer: usize) -> f64 {
    let m = profile.layers[layer].medians();
    profile.points[layer]
        .points
        .iter()
        .filter(|&&c| c < m.len())
        .map(|&c| m[c] - m[c - 1])
        .fold(0.0, f64::max)
}

/// Sample whose parameter count is nearest `fraction` of the teacher's.
fn nearest_fraction(curve: &[Pruned], teacher_params: usize, fraction: f64) -> usize {
    let target = teacher_params as f64 * fraction;
    (0..curve.len())
        .min_by(|&a, &b| {
            let da = (curve[a].spec.param_count() as f64 - target).abs();
            let db = (curve[b].spec.param_count() as f64 - target).abs();
            da.total_cmp(&db)
        })
        .unwrap()
}

// ---------------------------------------------------------------- criterion 6

fn pruning_quality(toy: &mut Toy) -> Verdict {
    let start = Instant::now();
    let mut mean = |method| {
        let mut sums = vec![0.0; SAMPLES];
        for seed in SEEDS {
            for (s, p) in sums.iter_mut().zip(toy.curve(method, seed)) {
                *s += p.test_err / SEEDS.len() as f64;
            }
        }
        sums
    };
    let fisher = mean(PruneMethod::Fisher);
    let random = mean(PruneMethod::Random);
    let wins = fisher.iter().zip(&random).filter(|(f, r)| f <= r).count();
    let secs = start.elapsed().as_secs_f64();
    let pairs: Vec<String> = fisher.iter().zip(&random).map(|(f, r)| format!("{f:.3}/{r:.3}")).collect();
    verdict(
        wins * 10 >= 7 * SAMPLES && secs < 3600.0,
        format!("fisher <= random at {wins}/{SAMPLES} sampled widths (fisher/random mean error: {})", pairs.join(" ")),
    )
}

// ---------------------------------------------------------------- criterion 7

fn distillation_direction(toy: &mut Toy) -> Verdict {
    let start = Instant::now();
    let teacher = toy.teacher().clone();
    let teacher_params = teacher.spec().param_count();
    let profile = toy.profile().clone();
    let tolerance = (0..profile.layers.len()).map(|l| step_height(&profile, l)).fold(0.0, f64::max);
    let (mut at, mut scratch, mut pruned) = (Vec::new(), Vec::new(), Vec::new());
    let mut notes = Vec::new();
    for seed in SEEDS {
        toy.curve(PruneMethod::Fisher, seed);
        let curve = &toy.curves[&(PruneMethod::Fisher, seed)];
        let j = nearest_fraction(curve, teacher_params, 0.5);
        let student = discover(teacher.spec(), &curve[j].spec, &profile.points).unwrap().spec;
        let est = estimate_latency(&student, &profile).unwrap();
        // Fisher-pruned network at the same estimated latency.
        let (k, gap) = curve
            .iter()
            .enumerate()
            .map(|(k, p)| (k, (estimate_latency(&p.spec, &profile).unwrap() - est).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let fisher_err = curve[k].test_err;
        let data = toy.data.as_ref().unwrap();
        let config = DistillConfig { train: toy_train(seed), ..DistillConfig::default() };
        let (_, m_at) = distill(&teacher, &student, data, &config).unwrap();
        let (_, m_scratch) = train_from_scratch::<f32>(&student, data, &toy_train(seed)).unwrap();
        let (e_at, e_scratch) = (m_at.last().unwrap().test_err, m_scratch.last().unwrap().test_err);
        eprintln!(
            "  seed {seed}: student {:?} at {:.3}/scratch {:.3}; pruned sample {k} {:?} {:.3} (latency gap {:.0} ns)",
            student.widths(),
            e_at,
            e_scratch,
            curve[k].spec.widths(),
            fisher_err,
            gap
        );
        if gap > tolerance {
            notes.push(format!("seed {seed}: no pruned sample within one step ({gap:.0} ns > {tolerance:.0} ns)"));
        }
        at.push(e_at);
        scratch.push(e_scratch);
        pruned.push(fisher_err);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, s, p) = (mean(&at), mean(&scratch), mean(&pruned));
    let secs = start.elapsed().as_secs_f64();
    verdict(
        a <= s && a < p && notes.is_empty() && secs < 7200.0,
        format!(
            "mean test error: snapped+AT {a:.4}, same student from scratch {s:.4}, Fisher-pruned at equal latency {p:.4}{}",
            if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 8

fn snapping_direction(toy: &mut Toy) -> Verdict {
    let teacher = toy.teacher().spec().clone();
    let profile = toy.profile().clone();
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in SEEDS {
        let curve = toy.curve(PruneMethod::Fisher, seed);
        let j = nearest_fraction(curve, teacher.param_count(), 0.25);
        let fisher = &curve[j].spec;
        let student = discover(&teacher, fisher, &profile.points).unwrap().spec;
        let more = student.param_count() > fisher.param_count() && student.mac_count() > fisher.mac_count();
        let mut within = true;
        for (l, (&f, &s)) in fisher.widths().iter().zip(&student.widths()).enumerate() {
            let delta = profile.layers[l].latency_at(s).unwrap() - profile.layers[l].latency_at(f).unwrap();
            within &= f == s || delta < step_height(&profile, l);
        }
        let de = estimate_latency(&student, &profile).unwrap() - estimate_latency(fisher, &profile).unwrap();
        ok &= more && within;
        parts.push(format!(
            "seed {seed}: {:?} -> {:?}, params {} -> {}, MACs {} -> {}, est latency {de:+.0} ns{}",
            fisher.widths(),
            student.widths(),
            fisher.param_count(),
            student.param_count(),
            fisher.mac_count(),
            student.mac_count(),
            if more && within { "" } else { " (violated)" }
        ));
    }
    verdict(ok, parts.join("; "))
}

// ---------------------------------------------------------------- criterion 9

const TINY: &str = r#"
samples = 4
[data.synthetic]
shape = [3, 8, 8]
train = 256
test = 128
[train]
epochs = 2
batch_size = 32
lr_milestones = [1]
[prune]
steps_per_prune = 2
batch_size = 16
[harness]
warmup = 0
runs = 3
threads = 1
[distill.train]
epochs = 2
batch_size = 32
lr_milestones = [1]
"#;

fn pipeline(dir: &Path) {
    fs::write(dir.join("toy.toml"), TINY).unwrap();
    let steps: [&[&str]; 8] = [
        &["train"],
        &["prune", "--method", "fisher"],
        &["prune", "--method", "l1"],
        &["prune", "--method", "random"],
        &["profile", "--fake-timer", "ceil:8:1000"],
        &["discover"],
        &["distill", "--scratch"],
        &["report"],
    ];
    for args in steps {
        let out = Command::new(env!("CARGO_BIN_EXE_staircase"))
            .current_dir(dir)
            .args(["-c", "toy.toml", "--seed", "3"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

fn files(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (files(&a.path().join("out")), files(&b.path().join("out")));
    let differing: Vec<&String> = fa.keys().chain(fb.keys()).filter(|k| fa.get(*k) != fb.get(*k)).collect();
    verdict(
        differing.is_empty() && !fa.is_empty(),
        format!("{} files from two full pipeline runs; differing: {differing:?}", fa.len()),
    )
}
