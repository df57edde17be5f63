//! Acceptance suite: every criterion prints one PASS/FAIL line, and the
//! process exits non-zero if any criterion fails.

use std::process::{Command, ExitCode};

use fedpriv_cli::config::ExperimentConfig;
use fedpriv_cli::experiments::{budget_plan, median, run_experiment, seed_list, RunOutcome};
use fedpriv_core::aggregation::{fedavg, krum_select, weighted_aggregate, Strategy, WeightVector};
use fedpriv_core::comms::{dequantize, entropy_decode, entropy_encode, quantize, CommsConfig, EncodedBlob};
use fedpriv_core::data::{dataset_from_idx, idx_bytes, load_idx, write_idx, PartitionKind};
use fedpriv_core::model::{loss, loss_and_grad, Activation, EncoderConfig, Layout};
use fedpriv_core::privacy::{add_gaussian_noise, calibrate_sigma};
use fedpriv_core::secure_agg::{decode_fixed, encode_fixed, ring_sum, secure_aggregate, split_shares};
use fedpriv_core::simulation::AttackMode;
use fedpriv_core::{ClientUpdate, Dataset, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEEDS: usize = 5;

type Check = Result<String, String>;

fn pv(values: Vec<f64>) -> ParamVector {
    ParamVector::from_flat(values).unwrap()
}

fn update(id: u32, values: Vec<f64>, samples: usize) -> ClientUpdate {
    ClientUpdate { client_id: id, delta: pv(values), sample_count: samples, loss_delta: 0.0, staleness: 0 }
}

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn budget() -> Check {
    let plan = budget_plan(2.0, 20, &[(1000.0, 1.2)], Some(10_000.0)).map_err(|e| e.to_string())?;
    let (eps_t, eps_i) = (plan.per_round, plan.clients[0].epsilon);
    ensure((eps_t - 0.1).abs() <= 1e-12 && (eps_i - 0.012).abs() <= 1e-12, format!("eps_t = {eps_t}, eps_i,t = {eps_i}"))
}

fn secret_sharing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..1000 {
        let dim = rng.random_range(1..=1024);
        let m = rng.random_range(1..=5);
        let v = pv((0..dim).map(|_| rng.random_range(-1000.0..1000.0)).collect());
        let set = split_shares(trial, &v, m, rng.random()).map_err(|e| e.to_string())?;
        let sum = ring_sum(&set.shares).map_err(|e| e.to_string())?;
        let enc = encode_fixed(&v).map_err(|e| e.to_string())?;
        if sum != enc || decode_fixed(&sum, v.layout()).unwrap() != decode_fixed(&enc, v.layout()).unwrap() {
            return Err(format!("trial {trial}: ring reconstruction differs"));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let dim = rng.random_range(1..=256);
        let vs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1000.0..1000.0)).collect()).collect();
        let sets: Vec<_> = vs.iter().enumerate().map(|(i, v)| split_shares(i as u32, &pv(v.clone()), 3, rng.random()).unwrap()).collect();
        let got = secure_aggregate(&sets, n, &Layout::flat(dim)).unwrap();
        for j in 0..dim {
            let mean = vs.iter().map(|v| v[j]).sum::<f64>() / n as f64;
            let err = (got.values()[j] - mean).abs() / (n as f64 * 2f64.powi(-17));
            worst = worst.max(err);
        }
    }
    if worst > 1.0 {
        return Err(format!("secure mean error {worst:.3} x n*2^-17"));
    }
    let critical = ChiSquared::new(15.0).unwrap().inverse_cdf(0.999);
    let v = pv(vec![12.5, -3.0]);
    let mut counts = [0usize; 16];
    for seed in 0..100_000u64 {
        counts[(split_shares(0, &v, 3, seed).unwrap().shares[0][0] >> 60) as usize] += 1;
    }
    let e = 100_000.0 / 16.0;
    let chi: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    ensure(chi < critical, format!("1000 exact reconstructions, mean error <= {worst:.3} x n*2^-17, chi-square {chi:.2} < {critical:.3}"))
}

fn dp_noise() -> Check {
    let oracle = (2.0 * (1.25f64 / 1e-5).ln()).sqrt();
    let sigma = calibrate_sigma(1.0, 1e-5, 1.0).map_err(|e| e.to_string())?;
    let noise = add_gaussian_noise(&ParamVector::zeros(Layout::flat(1_000_000)), sigma, 7).map_err(|e| e.to_string())?;
    let n = noise.len() as f64;
    let mean = noise.values().iter().sum::<f64>() / n;
    let std = (noise.values().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    ensure(
        (sigma - 4.8448).abs() <= 1e-3 && (sigma - oracle).abs() <= 1e-9 && (std - sigma).abs() / sigma < 0.01,
        format!("sigma {sigma:.6} (oracle {oracle:.6}), sample std {std:.5}"),
    )
}

fn brute_force_krum(points: &[Vec<f64>], f: usize, m: usize) -> Vec<u32> {
    let n = points.len();
    let k = n - f - 2;
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            (0u32..1 << others.len())
                .filter(|mask| mask.count_ones() as usize == k)
                .map(|mask| others.iter().enumerate().filter(|(b, _)| mask >> b & 1 == 1).map(|(_, &j)| d2(&points[i], &points[j])).sum())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mut ids: Vec<u32> = (0..n as u32).collect();
    ids.sort_by(|&a, &b| scores[a as usize].partial_cmp(&scores[b as usize]).unwrap().then(a.cmp(&b)));
    ids.truncate(m);
    ids
}

fn aggregators() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..200 {
        let n = rng.random_range(1..10);
        let dim = rng.random_range(1..30);
        let samples = rng.random_range(1..500);
        let updates: Vec<ClientUpdate> =
            (0..n).map(|i| update(i, (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect(), samples)).collect();
        let base = pv((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect());
        let w = weighted_aggregate(&updates, &WeightVector::uniform(n as usize).unwrap(), &base).unwrap();
        if w != fedavg(&updates, &base).unwrap() {
            return Err(format!("trial {trial}: uniform weighted aggregate differs from fedavg"));
        }
    }
    let mut checked = 0;
    while checked < 100 {
        let n = rng.random_range(3..=8);
        let f = rng.random_range(0..=2);
        if n < 2 * f + 3 {
            continue;
        }
        let dim = rng.random_range(1..5);
        let points: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-3..=3) as f64).collect()).collect();
        let m = rng.random_range(1..=n - f - 2);
        let ups: Vec<ClientUpdate> = points.iter().enumerate().map(|(i, p)| update(i as u32, p.clone(), 1)).collect();
        if krum_select(&ups, f, m).unwrap() != brute_force_krum(&points, f, m) {
            return Err(format!("krum mismatch on {points:?} f={f} m={m}"));
        }
        checked += 1;
    }
    Ok("200 uniform-weight checks exact, 100/100 krum instances match brute force".into())
}

fn run_seeds(cfg: &ExperimentConfig) -> Result<Vec<RunOutcome>, String> {
    seed_list(cfg, SEEDS)
        .into_iter()
        .map(|seed| run_experiment(&ExperimentConfig { seed, ..cfg.clone() }).map_err(|e| e.to_string()))
        .collect()
}

fn defense() -> Check {
    let mut cfg = ExperimentConfig { clients: 30, rounds: 20, ..ExperimentConfig::default() };
    cfg.data.partition = PartitionKind::Iid {};
    cfg.aggregator.strategy = Strategy::Robust;
    cfg.aggregator.krum_f = 6;
    let clean = run_seeds(&cfg)?;
    let mut lines = Vec::new();
    let mut ok = true;
    for mode in [AttackMode::NormBoost { factor: 10.0 }, AttackMode::SignFlip {}] {
        let mut attacked = cfg.clone();
        attacked.attack.enabled = true;
        attacked.attack.mode = mode;
        attacked.attack.malicious = 6;
        let runs = run_seeds(&attacked)?;
        let rate = median(&runs.iter().map(|r| r.defense_rate.unwrap_or(0.0)).collect::<Vec<_>>());
        let drop = median(&clean.iter().zip(&runs).map(|(c, a)| 100.0 * (c.final_accuracy - a.final_accuracy)).collect::<Vec<_>>());
        ok &= rate >= 0.90 && drop <= 2.0;
        lines.push(format!("{}: defense {:.1}%, drop {drop:.2} pts", mode.name(), 100.0 * rate));
    }
    ensure(ok, lines.join("; "))
}

fn communication() -> Check {
    let mut dense = ExperimentConfig::default();
    dense.aggregator.strategy = Strategy::Fedavg;
    let full = ExperimentConfig { comms: CommsConfig::full(), ..dense.clone() };
    let (a, b) = (run_seeds(&dense)?, run_seeds(&full)?);
    let med = |runs: &[RunOutcome], f: &dyn Fn(&RunOutcome) -> f64| median(&runs.iter().map(f).collect::<Vec<_>>());
    let bytes_cut = 1.0 - med(&b, &|r| r.upload_bytes as f64) / med(&a, &|r| r.upload_bytes as f64);
    let acc_gap = 100.0 * (med(&a, &|r| r.final_accuracy) - med(&b, &|r| r.final_accuracy));
    let latency_cut = 1.0 - med(&b, &|r| r.seconds) / med(&a, &|r| r.seconds);
    ensure(
        bytes_cut >= 0.5 && acc_gap <= 1.0 && latency_cut >= 0.15,
        format!("upload bytes -{:.1}%, accuracy gap {acc_gap:.2} pts, latency -{:.1}%", 100.0 * bytes_cut, 100.0 * latency_cut),
    )
}

fn convergence() -> Check {
    let cfg = ExperimentConfig::default();
    let strategies = [Strategy::Robust, Strategy::Weighted, Strategy::Fedavg];
    let runs: Vec<Vec<RunOutcome>> = strategies
        .iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.aggregator.strategy = s;
            run_seeds(&c)
        })
        .collect::<Result<_, _>>()?;
    let mut rtt = vec![Vec::new(); 3];
    for seed in 0..SEEDS {
        let best = runs.iter().map(|r| r[seed].best_accuracy()).fold(0.0, f64::max);
        for (k, r) in runs.iter().enumerate() {
            let reached = fedpriv_core::simulation::rounds_to_target(&r[seed].reports, 0.9 * best);
            rtt[k].push(reached.map_or(f64::INFINITY, |x| x as f64));
        }
    }
    let rounds: Vec<f64> = rtt.iter().map(|v| median(v)).collect();
    let acc: Vec<f64> = runs.iter().map(|r| median(&r.iter().map(|o| o.final_accuracy).collect::<Vec<_>>())).collect();
    ensure(
        rounds[0] <= rounds[1] && rounds[1] <= rounds[2] && acc[0] >= acc[1] && acc[1] >= acc[2],
        format!(
            "rounds-to-target robust {} / weighted {} / fedavg {}; final accuracy {:.2} / {:.2} / {:.2}",
            rounds[0],
            rounds[1],
            rounds[2],
            100.0 * acc[0],
            100.0 * acc[1],
            100.0 * acc[2]
        ),
    )
}

fn codecs() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for trial in 0..10_000 {
        let len = rng.random_range(0..300);
        let alphabet = rng.random_range(1..=512u16);
        let symbols: Vec<u16> = (0..len).map(|_| rng.random_range(0..alphabet)).collect();
        let blob = EncodedBlob::from_bytes(&entropy_encode(&symbols).to_bytes()).map_err(|e| e.to_string())?;
        if entropy_decode(&blob).map_err(|e| e.to_string())? != symbols {
            return Err(format!("entropy round trip {trial} failed"));
        }
    }
    for _ in 0..2000 {
        let bits = rng.random_range(2..=16u8);
        let clip = rng.random_range(0.01..10.0);
        let values: Vec<f64> = (0..64).map(|_| rng.random_range(-clip..clip)).collect();
        let back = dequantize(&quantize(&values, bits, clip).unwrap().symbols, bits, clip).unwrap();
        let bound = clip / ((1u32 << bits) - 1) as f64;
        if values.iter().zip(&back).any(|(v, b)| (v - b).abs() > bound * (1.0 + 1e-12)) {
            return Err(format!("quantizer bound violated at bits {bits}"));
        }
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pixels: Vec<f64> = (0..60).map(|i| ((i * 37) % 256) as f64 / 255.0).collect();
    let data = Dataset::new(6, 4, pixels, (0..10).map(|i| i % 4).collect()).unwrap();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&data, 2, 3, &img, &lab).map_err(|e| e.to_string())?;
    let back = load_idx(&img, &lab).map_err(|e| e.to_string())?;
    if back != data {
        return Err("IDX round trip differs".into());
    }
    let (images, labels) = idx_bytes(&data, 2, 3).unwrap();
    let mut bad_magic = images.clone();
    bad_magic[3] = 0x02;
    let truncated = &images[..images.len() - 1];
    let mut short_labels = labels.clone();
    short_labels[7] = 9;
    short_labels.truncate(8 + 9);
    let rejected = [
        dataset_from_idx(&bad_magic, &labels).is_err(),
        dataset_from_idx(truncated, &labels).is_err(),
        dataset_from_idx(&images, &short_labels).is_err(),
    ];
    ensure(rejected.iter().all(|&r| r), format!("10^4 entropy round trips, quantizer bound holds, IDX round trip ok, malformed rejected {rejected:?}"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"rounds": 5, "comms": {"enabled": true}, "mode": "async"}"#).unwrap();
    let mut outputs = Vec::new();
    for i in 0..2 {
        let out = dir.path().join(format!("run{i}.jsonl"));
        let run = Command::new(env!("CARGO_BIN_EXE_fedpriv"))
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .output()
            .map_err(|e| e.to_string())?;
        if !run.status.success() {
            return Err(format!("run exited with {}", run.status));
        }
        outputs.push(std::fs::read(&out).unwrap());
    }
    ensure(outputs[0] == outputs[1] && !outputs[0].is_empty(), format!("two runs, {} bytes each, identical", outputs[0].len()))
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let acts = [Activation::Relu, Activation::Tanh, Activation::Identity];
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let dims = vec![rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(2..=3)];
        let cfg = EncoderConfig::new(dims.clone(), vec![acts[rng.random_range(0..3)]]).unwrap();
        let params = cfg.init_params(rng.random());
        let n = rng.random_range(1..8);
        let features = (0..n * dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..dims[2])).collect();
        let data = Dataset::new(dims[0], dims[2], features, labels).unwrap();
        let (_, grad) = loss_and_grad(&params, &cfg, &data).unwrap();
        let h = 1e-6;
        let numeric: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut p = params.values().to_vec();
                p[i] += h;
                let up = loss(&params.with_values(p.clone()).unwrap(), &cfg, &data).unwrap();
                p[i] -= 2.0 * h;
                let down = loss(&params.with_values(p).unwrap(), &cfg, &data).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff = grad.values().iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = grad.norm_l2().max(numeric.iter().map(|x| x * x).sum::<f64>().sqrt()).max(1e-12);
        worst = worst.max(diff / scale);
    }
    ensure(worst <= 1e-4, format!("worst relative error {worst:.2e} over 20 configurations"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("1 budget planner", budget),
        ("2 secret sharing", secret_sharing),
        ("3 DP noise", dp_noise),
        ("4 aggregator correctness", aggregators),
        ("5 poisoning defense", defense),
        ("6 communication", communication),
        ("7 convergence ordering", convergence),
        ("8 codec properties", codecs),
        ("9 determinism", determinism),
        ("10 gradient check", gradients),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
