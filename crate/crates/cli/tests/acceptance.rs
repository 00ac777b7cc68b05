//! Acceptance suite. Runs without the libtest harness and prints one
//! `PASS`/`FAIL` line per criterion; exits nonzero if any criterion fails.

use std::f64::consts::LN_2;
use std::fs;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use logitshield_core::bench::{self, EvalReport, SweepPlan};
use logitshield_core::decode::{
    build_repe_steering_vector, constrained_step, dynamic_correct, repe_baseline_step,
    static_correct, InterventionConfig, LogitPair, Method, RepeBaselineConfig,
};
use logitshield_core::lens;
use logitshield_core::model::{LayeredModel, ModelSource};
use logitshield_core::numerics::{cosine, jsd, softmax, top_k, LogitVector, ProbDist};
use logitshield_core::synthetic::{make_toy, ToyBundle, ToyConfig};

const BIN: &str = env!("CARGO_BIN_EXE_logitshield");

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        let ok = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn random_dist(rng: &mut ChaCha8Rng, n: usize) -> ProbDist {
    let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
    softmax(&logits).unwrap()
}

fn greedy(method: Method, gamma: f64) -> InterventionConfig {
    InterventionConfig {
        method,
        gamma,
        greedy: true,
        max_new_tokens: 1,
        layer_start: 1,
        ..Default::default()
    }
}

fn numerics_suite() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 10_000;
    for i in 0..n {
        let len = rng.random_range(2..12);
        let p = random_dist(&mut rng, len);
        let q = random_dist(&mut rng, len);
        let pq = jsd(&p, &q).unwrap();
        let qp = jsd(&q, &p).unwrap();
        ensure!(pq == qp, "instance {i}: JSD asymmetric ({pq} vs {qp})");
        ensure!(
            (0.0..=LN_2).contains(&pq),
            "instance {i}: JSD {pq} outside [0, ln 2]"
        );
        ensure!(
            jsd(&p, &p).unwrap() <= 1e-9,
            "instance {i}: JSD(p, p) > 1e-9"
        );
        let gap = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        ensure!(
            gap < 1e-6 || pq > 0.0,
            "instance {i}: distinct distributions with zero JSD"
        );

        let x: Vec<f64> = (0..len).map(|_| rng.random_range(-30.0..30.0)).collect();
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let a = softmax(&x).unwrap();
        let b = softmax(&shifted).unwrap();
        let worst = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        ensure!(
            worst <= 1e-12,
            "instance {i}: softmax shift changed a probability by {worst:e}"
        );

        let y: Vec<f64> = (0..len).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cos = cosine(&x, &y).unwrap().value;
        ensure!(
            (-1.0..=1.0).contains(&cos),
            "instance {i}: cosine {cos} out of range"
        );
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{n} instances in {:.2}s", elapsed.as_secs_f64()))
}

fn algebraic_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 2_000;
    for i in 0..n {
        let v = rng.random_range(2..16);
        let d = rng.random_range(2..6);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..v).map(|_| rng.random_range(-10.0..10.0)).collect()
        };
        let pair = LogitPair::new(
            LogitVector::new(draw(&mut rng)).unwrap(),
            LogitVector::new(draw(&mut rng)).unwrap(),
        )
        .unwrap();
        let at0 = static_correct(&pair, 0.0);
        let at1 = static_correct(&pair, 1.0);
        for t in 0..v {
            ensure!(
                (at0.as_slice()[t] - pair.biased.as_slice()[t]).abs() <= 1e-12,
                "instance {i}: γ=0 differs from biased"
            );
            ensure!(
                (at1.as_slice()[t] - pair.pure.as_slice()[t]).abs() <= 1e-12,
                "instance {i}: γ=1 differs from pure"
            );
        }

        let cands = top_k(&pair.biased, rng.random_range(1..=v)).unwrap();
        let biased = pair.biased.gather(&cands);
        let e_bias: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vectors: Vec<Vec<f64>> = cands
            .iter()
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let gamma = rng.random_range(0.1..20.0);
        let zero_gamma = dynamic_correct(&pair, &cands, &e_bias, &vectors, 0.0)
            .unwrap()
            .0;
        ensure!(
            zero_gamma == biased,
            "instance {i}: dynamic γ=0 is not a no-op"
        );
        let zero_bias = dynamic_correct(&pair, &cands, &vec![0.0; d], &vectors, gamma)
            .unwrap()
            .0;
        ensure!(
            zero_bias == biased,
            "instance {i}: zero e_bias is not a no-op"
        );
        // token vectors orthogonal to e_bias = e0
        let mut axis = vec![0.0; d];
        axis[0] = 1.0;
        let orth: Vec<Vec<f64>> = vectors
            .iter()
            .map(|u| {
                let mut u = u.clone();
                u[0] = 0.0;
                u
            })
            .collect();
        let orthogonal = dynamic_correct(&pair, &cands, &axis, &orth, gamma)
            .unwrap()
            .0;
        ensure!(
            orthogonal == biased,
            "instance {i}: orthogonal token vectors are not a no-op"
        );
    }
    Ok(format!("{n} random instances"))
}

fn sampling_oracle() -> Check {
    let biased = LogitVector::new(vec![2.0, 0.5, 1.5, 1.0, -1.0]).unwrap();
    let corrected = [0.2, 3.0, 1.0, 0.6, 3.0];
    let config = InterventionConfig {
        top_k: 3,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let mut counts = [0usize; 5];
    for _ in 0..n {
        let step = constrained_step(&biased, &config, &mut rng, |c| {
            Ok(c.iter().map(|t| corrected[t]).collect())
        })
        .unwrap();
        counts[step.token] += 1;
    }
    ensure!(
        counts[1] == 0 && counts[4] == 0,
        "token outside V_K emitted: {counts:?}"
    );
    let z: f64 = [0, 2, 3].iter().map(|&t| f64::exp(corrected[t])).sum();
    let mut worst: f64 = 0.0;
    for t in [0, 2, 3] {
        let p = corrected[t].exp() / z;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let dev = (counts[t] as f64 / n as f64 - p).abs() / sigma;
        worst = worst.max(dev);
        ensure!(
            dev <= 4.0,
            "token {t}: {:.2}σ from the exact probability {p:.4}",
            dev
        );
    }
    Ok(format!("{n} draws, max deviation {worst:.2}σ"))
}

fn localization() -> Check {
    let start = Instant::now();
    let mut checked = 0;
    for inject_layer in 1..23 {
        let toy = make_toy(&ToyConfig {
            n_layers: 24,
            inject_layer,
            bias_strength: 2.0,
            effect_scale: 0.2,
            seed: 100 + inject_layer as u64,
            ..Default::default()
        })
        .unwrap();
        for s in &toy.dataset {
            let prompts = bench::build_prompts(s, true);
            let tb = toy.model.forward(&prompts.biased, true).unwrap();
            let tp = toy.model.forward(&prompts.pure, true).unwrap();
            let traj = lens::jsd_trajectory_contrast(&tb, &tp).unwrap();
            let found = lens::locate_critical_layer(&traj, 0).unwrap();
            ensure!(
                found == inject_layer,
                "inject_layer {inject_layer}, sample {}: found {found}",
                s.id
            );
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!(
        "{checked}/{checked} samples over inject layers 1..=22 in {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn end_to_end(toy: &ToyBundle) -> Check {
    let eval = |cfg: &InterventionConfig, with_context| {
        bench::evaluate(&toy.model, &toy.dataset, cfg, &[1], with_context, 1).unwrap()
    };
    let none = eval(&greedy(Method::None, 0.0), true);
    let no_context = eval(&greedy(Method::None, 0.0), false);
    let fixed = eval(&greedy(Method::Static, 1.0), true);
    let dynamic = eval(&greedy(Method::Dynamic, 5.0), true);
    ensure!(
        none.shares.stereotype == 100.0,
        "with-context stereotype {}",
        none.shares.stereotype
    );
    ensure!(
        fixed.shares == no_context.shares,
        "static γ=1 {:?} vs no-context {:?}",
        fixed.shares,
        no_context.shares
    );
    ensure!(
        dynamic.shares == no_context.shares,
        "dynamic γ=5 {:?} vs no-context {:?}",
        dynamic.shares,
        no_context.shares
    );
    for r in [&none, &no_context, &fixed, &dynamic] {
        ensure!(
            r.shares.invalid == 0.0,
            "{} invalid {}",
            r.method,
            r.shares.invalid
        );
    }
    Ok(format!(
        "stereo none={} static(1)={} dynamic(5)={} no-context={}",
        none.shares.stereotype,
        fixed.shares.stereotype,
        dynamic.shares.stereotype,
        no_context.shares.stereotype
    ))
}

fn dose_response() -> Check {
    let toy = make_toy(&ToyConfig {
        n_samples: 60,
        seed: 6,
        ..Default::default()
    })
    .unwrap();
    let plan = SweepPlan {
        methods: vec![Method::Static],
        gammas: vec![0.5, 1.0, 1.5, 2.0],
        seeds: vec![1],
    };
    let reports = bench::sweep(
        &toy.model,
        &toy.dataset,
        &plan,
        &greedy(Method::Static, 0.0),
        1,
    )
    .unwrap();
    let rates: Vec<f64> = reports.iter().map(|r| r.shares.stereotype).collect();
    ensure!(
        rates.windows(2).all(|w| w[1] <= w[0]),
        "not non-increasing: {rates:?}"
    );
    Ok(format!("stereo_pct over γ 0.5..2: {rates:?}"))
}

fn repe_baseline(toy: &ToyBundle) -> Check {
    let stereo: Vec<Vec<usize>> = toy
        .dataset
        .iter()
        .map(|s| bench::build_prompts(s, true).biased)
        .collect();
    let anti: Vec<Vec<usize>> = toy
        .dataset
        .iter()
        .map(|s| s.question_tokens.clone())
        .collect();
    let v = build_repe_steering_vector(&toy.model, &stereo, &anti, 16).unwrap();
    let c = cosine(&v, &toy.truth.bias_direction).unwrap().value;
    ensure!(c > 0.99, "cosine with the injected direction is {c}");
    let cfg = RepeBaselineConfig {
        steer_layer: 16,
        multiplier: 0.0,
        steering_vector: v,
    };
    for s in &toy.dataset {
        let tokens = bench::build_prompts(s, true).biased;
        let steered = repe_baseline_step(&toy.model, &tokens, &cfg).unwrap();
        let plain = toy.model.forward(&tokens, false).unwrap().final_logits;
        let same = steered
            .as_slice()
            .iter()
            .zip(plain.as_slice())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure!(same, "multiplier 0 changed logits for {}", s.id);
    }
    Ok(format!(
        "cosine {c:.6}, multiplier 0 bit-exact on {} samples",
        toy.dataset.len()
    ))
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn protocol_round_trip(toy: &ToyBundle, dir: &Path) -> Check {
    let spec = dir.join("toy_model.json");
    toy.model.save(&spec).unwrap();
    let mut child = Command::new(BIN)
        .args(["serve", "--listen", "127.0.0.1:0", "--model"])
        .arg(format!("toy:{}", spec.display()))
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let _server = Server(child);
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or(format!("unexpected banner `{line}`"))?
        .to_string();

    let sources = [
        format!("exec:{BIN} serve --model toy:{}", spec.display()),
        format!("tcp:{addr}"),
    ];
    let configs = [
        InterventionConfig {
            method: Method::None,
            top_k: 5,
            max_new_tokens: 3,
            ..Default::default()
        },
        InterventionConfig {
            method: Method::Static,
            gamma: 0.5,
            top_k: 5,
            max_new_tokens: 3,
            ..Default::default()
        },
        InterventionConfig {
            method: Method::Dynamic,
            gamma: 2.0,
            top_k: 5,
            max_new_tokens: 3,
            layer_start: 1,
            ..Default::default()
        },
    ];
    let run = |model: &dyn LayeredModel, cfg: &InterventionConfig| -> EvalReport {
        bench::evaluate(model, &toy.dataset, cfg, &[1, 2], true, 1).unwrap()
    };
    let local: Vec<EvalReport> = configs.iter().map(|c| run(&toy.model, c)).collect();
    for source in &sources {
        let remote = ModelSource::parse(source)
            .unwrap()
            .open()
            .map_err(|e| e.to_string())?;
        for (cfg, expected) in configs.iter().zip(&local) {
            let got = run(remote.as_ref(), cfg);
            ensure!(
                &got == expected,
                "{source} {}: {:?} vs {:?}",
                cfg.method,
                got.shares,
                expected.shares
            );
        }
    }
    Ok(format!(
        "exec and tcp backends match in-process on {} configs",
        configs.len()
    ))
}

fn determinism(toy: &ToyBundle, dir: &Path) -> Check {
    let spec = dir.join("toy_model.json");
    let data = dir.join("dataset.jsonl");
    toy.model.save(&spec).unwrap();
    bench::save_dataset(&data, &toy.dataset).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.join(format!("report_{run}.csv"));
        let status = Command::new(BIN)
            .args([
                "eval",
                "--method",
                "dynamic",
                "--gamma",
                "1.5",
                "--layer-start",
                "1",
                "--seeds",
                "1,2,3",
                "--jobs",
                "3",
            ])
            .arg("--model")
            .arg(format!("toy:{}", spec.display()))
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .stdout(Stdio::null())
            .status()
            .unwrap();
        ensure!(status.success(), "eval exited with {status}");
        outputs.push(fs::read(&out).unwrap());
    }
    ensure!(outputs[0] == outputs[1], "CSV outputs differ");
    Ok(format!("two runs, {} identical bytes", outputs[0].len()))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let toy = make_toy(&ToyConfig::default()).unwrap();
    let criteria: Vec<Criterion<'_>> = vec![
        ("numerics property suite", Box::new(numerics_suite)),
        ("algebraic identities", Box::new(algebraic_identities)),
        ("constrained sampling oracle", Box::new(sampling_oracle)),
        ("critical-layer localization", Box::new(localization)),
        ("end-to-end toy debiasing", Box::new(|| end_to_end(&toy))),
        ("static dose-response monotonicity", Box::new(dose_response)),
        ("steering baseline", Box::new(|| repe_baseline(&toy))),
        (
            "protocol round trip",
            Box::new(|| protocol_round_trip(&toy, dir.path())),
        ),
        (
            "cmd_eval determinism",
            Box::new(|| determinism(&toy, dir.path())),
        ),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".to_string()));
        match result {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail})", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {}: FAIL  {name} ({why})", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
