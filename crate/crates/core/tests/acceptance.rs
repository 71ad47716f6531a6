//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs sharing the same configuration and seed are trained once and reused.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use feddsr::diagnostics::{convergence_trend, heterogeneity, running_mean, theorem1_bound, BoundInputs};
use feddsr::experiment::{
    gradcheck_objective, initial_model, median, prepare_data, reduction_percent, rounds_to_target, run_prepared,
    ExperimentConfig, LogRecord, Prepared, TapWeights,
};
use feddsr::federation::{LrSchedule, Vehicle};
use feddsr::metrics::{compute_metrics, ConfusionMatrix};
use feddsr::model::{PositionBias, TapSpec};
use feddsr::numeric::RngStream;
use rand_distr::{Distribution, Uniform};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn workspace() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(workspace().join("configs").join(name)).expect("config loads")
}

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: String) -> Outcome {
    Outcome { ok, detail }
}

/// Trains each distinct `(variant, seed)` once; data is generated once per seed.
struct Lab {
    base: ExperimentConfig,
    scratch: tempfile::TempDir,
    data: BTreeMap<u64, Prepared>,
    runs: BTreeMap<(String, u64), Vec<LogRecord>>,
}

impl Lab {
    fn new() -> Self {
        Self {
            base: load("reference.json"),
            scratch: tempfile::tempdir().expect("scratch dir"),
            data: BTreeMap::new(),
            runs: BTreeMap::new(),
        }
    }

    fn dir(&self, variant: &str, seed: u64) -> PathBuf {
        self.scratch.path().join(format!("{variant}-s{seed}"))
    }

    fn config(&self, variant: &str, seed: u64) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.seed = seed;
        match variant {
            "fedavg" => c.model.taps = TapSpec::disabled(),
            "feddsr" => {}
            "lambda0-r60" => {
                c.training.lambda = TapWeights::Uniform(0.0);
                c.training.rounds = 60;
            }
            "count2" | "count3" | "count5" => {
                let m = variant[5..].parse().unwrap();
                c.model.taps = TapSpec::between_blocks(m, 1, PositionBias::Central);
            }
            "invsqrt" => {
                c.training.schedule = LrSchedule::InvSqrtT;
                c.evaluation.diagnostics_every = 1;
            }
            "feddsr-t8" => c.threads = 8,
            other => panic!("unknown variant {other}"),
        }
        c
    }

    fn run(&mut self, variant: &str, seed: u64) -> &[LogRecord] {
        let key = (variant.to_string(), seed);
        if !self.runs.contains_key(&key) {
            let cfg = self.config(variant, seed);
            let dir = self.dir(variant, seed);
            let data = self
                .data
                .entry(seed)
                .or_insert_with(|| prepare_data(&cfg).expect("data prepares"));
            let out = run_prepared::<f32>(&cfg, data, Some(&dir)).expect("run succeeds");
            self.runs.insert(key.clone(), out.records);
        }
        &self.runs[&key]
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.2}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradient_correctness() -> Outcome {
    let cfg = load("tiny.json");
    let single = gradcheck_objective::<f32>(&cfg, 2).expect("single gradcheck");
    let double = gradcheck_objective::<f64>(&cfg, 2).expect("double gradcheck");
    outcome(
        single.max_rel_error < 1e-3 && double.max_rel_error < 1e-5 && single.checked > 0 && double.checked > 0,
        format!(
            "f32 max rel {:.2e} over {} coords, f64 max rel {:.2e} over {} coords",
            single.max_rel_error, single.checked, double.max_rel_error, double.checked
        ),
    )
}

fn degeneration() -> Outcome {
    let mut cfg = load("reference.json");
    cfg.training.rounds = 20;
    cfg.training.alpha = TapWeights::Uniform(0.0);
    cfg.training.lambda = TapWeights::Uniform(0.0);
    let data = prepare_data(&cfg).expect("data");
    let with_taps = run_prepared::<f32>(&cfg, &data, None).expect("tapped run");
    cfg.model.taps = TapSpec::disabled();
    let plain = run_prepared::<f32>(&cfg, &data, None).expect("plain run");
    let (a, b) = (with_taps.theta_digest(), plain.theta_digest());
    outcome(a == b, format!("theta sha256 {} vs {}", &a[..16], &b[..16]))
}

fn rounds_reduction(lab: &mut Lab) -> Outcome {
    let start = Instant::now();
    let mut reductions = Vec::new();
    let mut cells = Vec::new();
    for seed in SEEDS {
        let base = lab.run("fedavg", seed).to_vec();
        let dsr = lab.run("feddsr", seed).to_vec();
        let target = base[99].miou.expect("evaluated every round");
        let ra = rounds_to_target(&base, target).expect("baseline reaches its own value");
        let rb = rounds_to_target(&dsr, target);
        let red = rb.map_or(f64::NEG_INFINITY, |rb| reduction_percent(ra, rb));
        reductions.push(red);
        cells.push(format!(
            "s{seed}: {ra}->{}",
            rb.map_or("never".into(), |r| r.to_string())
        ));
    }
    let med = median(&reductions).unwrap();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        med >= 10.0 && secs < 1800.0,
        format!(
            "median reduction {med:.1}% (>= 10%), {}, {secs:.0} s for 10 runs",
            cells.join(" ")
        ),
    )
}

fn count_ablation(lab: &mut Lab) -> Outcome {
    let mut finals = BTreeMap::new();
    for m in [2, 3, 5] {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|&s| lab.run(&format!("count{m}"), s).last().unwrap().miou.unwrap())
            .collect();
        finals.insert(m, v);
    }
    let med = |m| median(&finals[&m]).unwrap();
    let best = med(2).max(med(3));
    outcome(
        best >= med(5),
        format!(
            "median final mIoU M=2 {:.2} {}, M=3 {:.2} {}, M=5 {:.2} {}",
            med(2),
            fmt_list(&finals[&2]),
            med(3),
            fmt_list(&finals[&3]),
            med(5),
            fmt_list(&finals[&5])
        ),
    )
}

fn entropy_effect(lab: &mut Lab) -> Outcome {
    let at60 = |r: &[LogRecord]| r.iter().find(|x| x.t == 60).expect("round 60 logged").tap_entropy[0];
    let with: Vec<f64> = SEEDS.iter().map(|&s| at60(lab.run("feddsr", s))).collect();
    let without: Vec<f64> = SEEDS.iter().map(|&s| at60(lab.run("lambda0-r60", s))).collect();
    let (a, b) = (median(&with).unwrap(), median(&without).unwrap());
    outcome(
        a > b,
        format!(
            "median tap-1 entropy at round 60: lambda=0.1 {a:.4} vs lambda=0 {b:.4} (per seed {:?} vs {:?})",
            with.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>(),
            without.iter().map(|x| (x * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn heterogeneity_sanity() -> Outcome {
    let cfg = load("reference.json");
    let data = prepare_data(&cfg).expect("data");
    let model = initial_model::<f32>(&cfg).expect("model");
    let weights = cfg.loss_weights().expect("weights");
    let shared: Vec<Vehicle> = (0..data.fleet.len())
        .map(|id| Vehicle {
            id,
            data: data.fleet[0].data.clone(),
        })
        .collect();
    let same = heterogeneity(&model, &shared, &weights).expect("identical fleet");
    let skew = heterogeneity(&model, &data.fleet, &weights).expect("partitioned fleet");
    outcome(
        same.h <= 1e-9 * same.grad_norm_sq && skew.h > 0.0,
        format!(
            "identical H {:.3e} (grad scale {:.3e}), gamma=0.3 H {:.3e}",
            same.h, same.grad_norm_sq, skew.h
        ),
    )
}

/// Per-class scalar formulas evaluated independently of the library.
fn brute_metrics(k: usize, cm: &[u64]) -> [f64; 4] {
    let mut sums = [0.0; 4];
    let mut present = 0usize;
    for c in 0..k {
        let tp = cm[c * k + c] as f64;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for o in 0..k {
            if o != c {
                fp += cm[o * k + c] as f64;
                fneg += cm[c * k + o] as f64;
            }
        }
        if tp + fp + fneg == 0.0 {
            continue;
        }
        present += 1;
        let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
        sums[0] += div(tp, tp + fp + fneg);
        sums[1] += div(2.0 * tp, 2.0 * tp + fp + fneg);
        sums[2] += div(tp, tp + fp);
        sums[3] += div(tp, tp + fneg);
    }
    sums.map(|s| if present == 0 { 0.0 } else { 100.0 * s / present as f64 })
}

fn metric_oracle() -> Outcome {
    let hand = compute_metrics(&ConfusionMatrix::from_counts(2, vec![50, 10, 20, 20]).unwrap()).unwrap();
    let hand_ok = (hand.miou - 51.25).abs() < 1e-12;
    let mut rng = RngStream::new(0x7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = 2 + i % 7;
        let hi = [3u64, 20, 1000][i % 3];
        let dist = Uniform::new_inclusive(0, hi).unwrap();
        // An all-zero matrix has no metrics; redraw it.
        let counts = loop {
            let c: Vec<u64> = (0..k * k)
                .map(|_| if rng.below(5) == 0 { 0 } else { dist.sample(&mut rng) })
                .collect();
            if c.iter().any(|&x| x > 0) {
                break c;
            }
        };
        let got = compute_metrics(&ConfusionMatrix::from_counts(k, counts.clone()).unwrap()).unwrap();
        let want = brute_metrics(k, &counts);
        for (g, w) in [got.miou, got.mf1, got.mpre, got.mrec].into_iter().zip(want) {
            worst = worst.max((g - w).abs() / w.abs().max(1e-300));
        }
    }
    outcome(
        hand_ok && worst <= 1e-12,
        format!(
            "hand case mIoU {:.4}, worst relative deviation {worst:.1e} over 1000 matrices",
            hand.miou
        ),
    )
}

fn bound_arithmetic() -> Outcome {
    let base = BoundInputs {
        delta: 1.0,
        eta: 0.1,
        rounds: 100.0,
        local_epochs: 0.0,
        c: 1.0,
        l_max: 0.0,
        g_t2: 0.0,
        sigma_t2: 0.0,
        grad_norm_sq: 0.0,
        h: 0.0,
    };
    let gap = theorem1_bound(&base).unwrap();
    let full = BoundInputs {
        local_epochs: 2.0,
        l_max: 5.0,
        g_t2: 3.0,
        sigma_t2: 1.0,
        grad_norm_sq: 0.5,
        h: 0.25,
        ..base.clone()
    };
    // 2.0 + (5·0.1/10)·(3 + 1 + 4·0.75) = 2.35
    let r = theorem1_bound(&full).unwrap();
    let hand_ok = gap.total == 2.0 && gap.gap_term == 2.0 && r.drift == 3.0 && (r.total - 2.35).abs() < 1e-15;
    let total = |f: &dyn Fn(&mut BoundInputs)| {
        let mut x = full.clone();
        f(&mut x);
        theorem1_bound(&x).unwrap().total
    };
    let mut mono = true;
    for step in 1..50 {
        let s = step as f64;
        mono &= total(&|x| x.rounds = 10.0 * (s + 1.0)) < total(&|x| x.rounds = 10.0 * s);
        mono &= total(&|x| x.delta = 0.1 * (s + 1.0)) > total(&|x| x.delta = 0.1 * s);
        mono &= total(&|x| x.local_epochs = s + 1.0) > total(&|x| x.local_epochs = s);
    }
    outcome(
        hand_ok && mono,
        format!(
            "gap term {} for delta=1 eta=0.1 T=100, full case {:.6}, monotone in T/delta/E: {mono}",
            gap.gap_term, r.total
        ),
    )
}

fn files_equal(a: &Path, b: &Path, rel: &str) -> bool {
    fs::read(a.join(rel))
        .ok()
        .is_some_and(|x| fs::read(b.join(rel)).ok() == Some(x))
}

fn determinism(lab: &mut Lab) -> Outcome {
    lab.run("feddsr", 0);
    lab.run("feddsr-t8", 0);
    let (a, b) = (lab.dir("feddsr", 0), lab.dir("feddsr-t8", 0));
    let files = ["rounds.csv", "rounds.jsonl", "model.ckpt", "adapters.ckpt"];
    let same: Vec<bool> = files.iter().map(|f| files_equal(&a, &b, f)).collect();
    outcome(
        same.iter().all(|&x| x),
        format!(
            "threads 1 vs 8 byte-identical {:?}",
            files.iter().zip(&same).collect::<Vec<_>>()
        ),
    )
}

fn convergence(lab: &mut Lab) -> Outcome {
    let records = lab.run("invsqrt", 0);
    let g: Vec<f64> = records
        .iter()
        .map(|r| r.grad_norm_sq.expect("diagnostics every round"))
        .collect();
    let trend = convergence_trend(&running_mean(&g), None).expect("trend fit");
    outcome(
        (-1.0..=-0.2).contains(&trend.slope),
        format!(
            "slope {:.3} in [-1.0, -0.2], residual {:.3}, {} points",
            trend.slope, trend.residual, trend.points
        ),
    )
}

type Check = Box<dyn FnOnce(&mut Lab) -> Outcome>;

fn main() {
    let mut lab = Lab::new();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient correctness", Box::new(|_| gradient_correctness())),
        ("degeneration to FedAvg", Box::new(|_| degeneration())),
        ("rounds-to-target reduction", Box::new(rounds_reduction)),
        ("tap count ablation", Box::new(count_ablation)),
        ("entropy effect", Box::new(entropy_effect)),
        ("heterogeneity sanity", Box::new(|_| heterogeneity_sanity())),
        ("metric oracle", Box::new(|_| metric_oracle())),
        ("bound arithmetic", Box::new(|_| bound_arithmetic())),
        ("determinism across threads", Box::new(determinism)),
        ("convergence trend", Box::new(convergence)),
    ];
    // `ACCEPTANCE_ONLY=7,8` runs a subset; the default is all criteria.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let (mut failed, mut ran) = (0, 0);
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let r = check(&mut lab);
        failed += usize::from(!r.ok);
        println!(
            "[{}] {:>2} {name}: {} ({:.1} s)",
            if r.ok { "PASS" } else { "FAIL" },
            i + 1,
            r.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
