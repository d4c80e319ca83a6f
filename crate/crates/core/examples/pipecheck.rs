//! Reduced-scale rehearsal of the acceptance pipeline (scratch tool).

use std::collections::BTreeMap;
use std::time::Instant;

use lanepilot::dataset::{self, mix_equal_parts, split, CollectOptions, Dataset};
use lanepilot::eval::{offline_matrix, policy_from_model, scenario_suite, DrivePolicy, ExpertDriver, Scenario};
use lanepilot::expert::{calibrate_gains, ExpertPilot, ManeuverTable, PerturbConfig, DEFAULT_KD_GRID, DEFAULT_KP_GRID};
use lanepilot::nn::{ModelConfig, ModelParams};
use lanepilot::render::{CameraModel, Domain};
use lanepilot::rng::{derive, derive_idx};
use lanepilot::simcore::{MapPreset, TrackMap};
use lanepilot::train::{multi_seed_on, OptimSettings, TrainConfig};

const SEED: u64 = 42;
const FRAMES: usize = 600;
const EPOCHS: usize = 12;
const K_SEEDS: usize = 1;
const STARTS: usize = 2;
const LIMIT_S: f64 = 20.0;

fn main() {
    let t0 = Instant::now();
    let table = ManeuverTable::seeded();
    let loop_map = TrackMap::preset(MapPreset::Loop);
    let cross_map = TrackMap::preset(MapPreset::Cross);
    let heldout = TrackMap::preset(MapPreset::Heldout);
    let camera = CameraModel::default();
    let gains = calibrate_gains(&loop_map, &table, &DEFAULT_KP_GRID, &DEFAULT_KD_GRID).unwrap().best;
    println!("[{:6.1}s] gains kp={} kd={}", t0.elapsed().as_secs_f64(), gains.kp, gains.kd);

    let perturb = Some(PerturbConfig { prob_per_sec: 0.25, burst_secs: 0.3, magnitude: 0.3 });
    let sources: [(&str, &TrackMap, Domain); 4] = [
        ("SIM-LP", &loop_map, Domain::SimLp),
        ("SIM-IS", &cross_map, Domain::SimIs),
        ("PSEUDO-REAL-A", &loop_map, Domain::PseudoRealA),
        ("PSEUDO-REAL-B", &cross_map, Domain::PseudoRealB),
    ];

    // Collect + split.
    let mut halves: BTreeMap<String, (Dataset, Dataset)> = BTreeMap::new();
    for (name, map, domain) in sources {
        let pilot = ExpertPilot { map, gains, table: &table, perturb };
        let (ds, rep) = dataset::collect_with(
            &pilot, domain, &camera, FRAMES,
            derive(SEED, &format!("collect:{name}")),
            CollectOptions { drop_perturbed: false, appearance: None },
        ).unwrap();
        let (tr, va) = split(&ds, 0.30, derive(SEED, &format!("split:{name}"))).unwrap();
        println!("[{:6.1}s] {name}: {} frames ({} episodes, {} perturbed kept) -> {}/{} split",
            t0.elapsed().as_secs_f64(), rep.frames, rep.episodes, rep.perturbed_kept, tr.len(), va.len());
        halves.insert(name.to_string(), (tr, va));
    }

    let methods: Vec<(&str, Vec<&str>)> = vec![
        ("SIM-LP", vec!["SIM-LP"]),
        ("SIM-IS", vec!["SIM-IS"]),
        ("PSEUDO-REAL-A", vec!["PSEUDO-REAL-A"]),
        ("PSEUDO-REAL-B", vec!["PSEUDO-REAL-B"]),
        ("SIM", vec!["SIM-LP", "SIM-IS"]),
        ("PSEUDO-REAL", vec!["PSEUDO-REAL-A", "PSEUDO-REAL-B"]),
        ("HYBRID", vec!["SIM-LP", "SIM-IS", "PSEUDO-REAL-A", "PSEUDO-REAL-B"]),
    ];

    let mut models: Vec<(String, ModelParams<f32>)> = Vec::new();
    for (label, srcs) in &methods {
        let parts: Vec<(String, &Dataset)> =
            srcs.iter().map(|s| (s.to_string(), &halves[*s].0)).collect();
        let per = parts.iter().map(|(_, d)| d.len()).min().unwrap();
        let total = per * parts.len();
        let pool = mix_equal_parts(&parts, total, derive(SEED, &format!("mix:{label}"))).unwrap();
        let cfg = TrainConfig {
            mix: None,
            epochs: EPOCHS,
            batch_size: 64,
            optimizer: OptimSettings::default(),
            model: ModelConfig::default(),
            seed: derive(SEED, &format!("train:{label}")),
            val_fraction: 0.30,
            split_seed: None,
        };
        let out = multi_seed_on(&pool, &cfg, K_SEEDS).unwrap();
        println!("[{:6.1}s] trained {label} on {} (best avg {:.4})",
            t0.elapsed().as_secs_f64(), total, out.summary.avg[out.summary.best]);
        let (params, _) = out.runs.into_iter().nth(out.summary.best).unwrap();
        models.push((label.to_string(), params));
    }

    // Shared validation matrix.
    let val_sets: BTreeMap<String, Vec<_>> =
        halves.iter().map(|(k, (_, v))| (k.clone(), v.samples.clone())).collect();
    let refs: Vec<(String, &ModelParams<f32>)> =
        models.iter().map(|(l, p)| (l.clone(), p)).collect();
    let matrix = offline_matrix(&ModelConfig::default(), &refs, &val_sets).unwrap();
    println!("\n{}", matrix.text_table());

    // Criterion 4a rehearsal.
    let cross_of = |m: &str| -> Vec<&str> {
        if m.starts_with("SIM") { vec!["PSEUDO-REAL-A", "PSEUDO-REAL-B"] } else { vec!["SIM-LP", "SIM-IS"] }
    };
    for m in ["SIM-LP", "SIM-IS", "PSEUDO-REAL-A", "PSEUDO-REAL-B"] {
        let row = matrix.row(m).unwrap();
        let own = row.by_source[m];
        for c in cross_of(m) {
            let ratio = row.by_source[c] / own;
            println!("4a {m}: own {:.4} vs {c} {:.4} (ratio {:.1}x) {}",
                own, row.by_source[c], ratio, if ratio >= 2.0 { "ok" } else { "FAIL" });
        }
    }
    let hybrid_avg = matrix.row("HYBRID").unwrap().avg;
    let others_min = matrix.rows.iter().filter(|r| r.method != "HYBRID").map(|r| r.avg).fold(f64::INFINITY, f64::min);
    println!("4b HYBRID avg {:.4} vs best other {:.4} {}", hybrid_avg, others_min,
        if hybrid_avg < others_min { "ok" } else { "FAIL" });

    // Criterion 5 rehearsal: closed loop on the held-out map.
    let hm = &heldout;
    let scenarios: Vec<Scenario> = [Domain::SimLp, Domain::PseudoRealB]
        .into_iter()
        .flat_map(|domain| {
            (0..STARTS).map(move |i| Scenario {
                name: format!("{}-start-{i}", domain.name()),
                domain,
                start: hm.spawn_at((i as f64 + 0.5) / STARTS as f64),
                time_limit_s: LIMIT_S,
                appearance: None,
            })
        })
        .collect();
    let pilot = ExpertPilot { map: &heldout, gains, table: &table, perturb: None };
    let mut expert = ExpertDriver::new(pilot);
    let mut hybrid = policy_from_model(&ModelConfig::default(), &models.iter().find(|(l, _)| l == "HYBRID").map(|(_, p)| p).unwrap()).unwrap();
    let mut sim = policy_from_model(&ModelConfig::default(), &models.iter().find(|(l, _)| l == "SIM").map(|(_, p)| p).unwrap()).unwrap();
    let mut policies: Vec<(String, &mut dyn DrivePolicy)> = vec![
        ("EXPERT".into(), &mut expert),
        ("HYBRID".into(), &mut hybrid),
        ("SIM".into(), &mut sim),
    ];
    let suite = scenario_suite(&mut policies, &heldout, &camera, &scenarios, derive_idx(derive(SEED, "rollout"), 0)).unwrap();
    println!("\n[{:6.1}s] closed loop (heldout, {} starts x {LIMIT_S} s):", t0.elapsed().as_secs_f64(), STARTS);
    println!("{}", suite.text_table());
    for policy in ["EXPERT", "HYBRID", "SIM"] {
        let total = |d: Domain| -> f64 {
            suite.scenarios.iter().zip(&suite.policies.iter().find(|p| p.policy == policy).unwrap().results)
                .filter(|(sc, _)| sc.domain == d).map(|(_, r)| r.tiles).sum()
        };
        println!("{policy}: clean {:.2} shifted {:.2}", total(Domain::SimLp), total(Domain::PseudoRealB));
    }
    println!("\ntotal {:.1}s", t0.elapsed().as_secs_f64());
}
