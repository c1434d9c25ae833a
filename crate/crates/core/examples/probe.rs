// Temporary tuning probe; not part of the deliverable.

use std::time::Instant;

use fedcy_core::federation::{
    aggregate, local_unsupervised_epoch, AdamState, ClientState, Federation, FederationConfig,
    TrainMode,
};
use fedcy_core::losses::tcc_pair_loss;
use fedcy_core::metrics::evaluate_scenario;
use fedcy_core::model::{init_params, extract_features, ModelConfig};
use fedcy_core::rng::stream;
use fedcy_core::sampling::{sample_epoch_clips, SamplerConfig};
use fedcy_core::synthdata::{
    generate_client, generate_scenario, ClientProfile, ClientRole, ScenarioConfig, Split,
    SplitCounts, WorkflowConfig,
};

fn model_cfg() -> ModelConfig {
    let hidden: usize = std::env::var("HIDDEN").ok().and_then(|s| s.parse().ok()).unwrap_or(32);
    let embed: usize = std::env::var("EMBED").ok().and_then(|s| s.parse().ok()).unwrap_or(16);
    ModelConfig { input_dim: 10, hidden_dims: vec![hidden], embed_dim: embed, num_phases: 6 }
}

fn fed_cfg(mode: TrainMode, seed: u64, lr: f64) -> FederationConfig {
    let envu = |k: &str, d: u64| std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d);
    FederationConfig {
        mode,
        learning_rate: lr,
        weight_decay: 1e-4,
        rounds_max: envu("ROUNDS", 40),
        min_epochs: envu("MINEP", 6),
        patience: envu("PATIENCE", 3),
        master_seed: seed,
        fedtcc_pretrain_rounds: envu("PRETRAIN", 15),
        ..FederationConfig::default()
    }
}

fn criterion3_probe(lr: f64, tau: f64, lambda_sigma: f64) {
    // two clients, same workflow order (Q = P), duration scales 1.0 / 2.0
    let train_videos: usize = std::env::var("C3_VIDEOS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let total: u64 = std::env::var("C3_SEEDS").ok().and_then(|s| s.parse().ok()).unwrap_or(4);
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d);
    let workflow = WorkflowConfig {
        sequential_prefix: 6,
        duration_sigma: envf("DSIGMA", 0.5),
        ..WorkflowConfig::default()
    };
    let scfg = ScenarioConfig {
        workflow: workflow.clone(),
        heterogeneity: 0.0,
        num_unlabeled: 2,
        unlabeled_videos: SplitCounts { train: train_videos, validation: 1, test: 2 },
        labeled_videos: SplitCounts { train: 1, validation: 1, test: 1 },
        held_out_videos: 1,
        drift_amplitude: envf("DRIFT", 0.2),
        noise_sigma: envf("NOISE", 0.1),
        ..ScenarioConfig::default()
    };
    let mcfg = model_cfg();
    let mut ok = 0;
    for seed in 0..total {
        let reference = generate_scenario(&scfg, 100 + seed).unwrap();
        let mut profile_a = reference.unlabeled[0].profile.clone();
        profile_a.duration_scale = 1.0;
        profile_a.client_id = "warp_a".into();
        let mut profile_b: ClientProfile = profile_a.clone();
        profile_b.duration_scale = 2.0;
        profile_b.client_id = "warp_b".into();
        let counts = SplitCounts { train: train_videos, validation: 0, test: 2 };
        let a = generate_client(profile_a, ClientRole::Unlabeled, &workflow, &counts, 500 + seed, 0)
            .unwrap();
        let b = generate_client(profile_b, ClientRole::Unlabeled, &workflow, &counts, 600 + seed, 1)
            .unwrap();

        let mut cfg = fed_cfg(TrainMode::Fedcy, seed, lr);
        cfg.tcc.tau = tau;
        cfg.tcc.lambda_sigma = lambda_sigma;
        let init = init_params(&mcfg, seed).unwrap();
        let mut clients: Vec<ClientState> = [&a, &b]
            .iter()
            .map(|d| ClientState {
                client_id: d.client_id.clone(),
                role: ClientRole::Unlabeled,
                params: init.clone(),
                optimizer: AdamState::new(),
                data_fraction: 0.5,
            })
            .collect();
        let mut global = init.clone();

        // held-out pairs: one epoch clip per test video of each client
        let eval_pairs = |params: &fedcy_core::model::ParameterSet| {
            let mut rng = stream(999, &[seed]);
            let mut losses = Vec::new();
            for (da, db) in a
                .videos_in_split(Split::Test)
                .iter()
                .zip(b.videos_in_split(Split::Test).iter())
            {
                let ca = &sample_epoch_clips(da.num_frames(), &cfg.sampler, &mut rng).unwrap()[0];
                let cb = &sample_epoch_clips(db.num_frames(), &cfg.sampler, &mut rng).unwrap()[0];
                let fa: Vec<Vec<f64>> = ca.frame_ids().iter().map(|&i| da.frames().row(i - 1).to_vec()).collect();
                let fb: Vec<Vec<f64>> = cb.frame_ids().iter().map(|&i| db.frames().row(i - 1).to_vec()).collect();
                let ea = extract_features(&mcfg, params, &fedcy_core::engine::Array::from_rows(&fa).unwrap()).unwrap();
                let eb = extract_features(&mcfg, params, &fedcy_core::engine::Array::from_rows(&fb).unwrap()).unwrap();
                losses.push(tcc_pair_loss(&ea, &eb, &cfg.tcc).unwrap());
            }
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        let initial = eval_pairs(&global);
        let t0 = Instant::now();
        for round in 1..=50u64 {
            for (idx, (client, data)) in clients.iter_mut().zip([&a, &b]).enumerate() {
                let mut rng = stream(cfg.master_seed, &[2, idx as u64, round]);
                local_unsupervised_epoch(client, &global, data, &mcfg, &cfg, &mut rng).unwrap();
            }
            let params: Vec<&fedcy_core::model::ParameterSet> =
                clients.iter().map(|c| &c.params).collect();
            global = aggregate(&params, &[0.5, 0.5], 0).unwrap();
        }
        let final_loss = eval_pairs(&global);
        let reduced = final_loss < 0.5 * initial;
        if reduced {
            ok += 1;
        }
        println!(
            "  c3 seed {seed}: initial {initial:.4} final {final_loss:.4} ratio {:.3} ({}) [{:.1}s]",
            final_loss / initial,
            if reduced { "OK" } else { "MISS" },
            t0.elapsed().as_secs_f64()
        );
    }
    println!("criterion3 lr={lr} tau={tau} ls={lambda_sigma}: {ok}/{total}");
}

fn table_probe(lr: f64, seeds: u64, scenario_seed: u64) {
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d);
    let scfg = ScenarioConfig {
        noise_sigma: envf("NOISE", 0.1),
        drift_amplitude: envf("DRIFT", 0.8),
        heterogeneity: envf("HET", 0.5),
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(&scfg, scenario_seed).unwrap();
    let mcfg = model_cfg();
    println!(
        "scenario: labeled train frames {}, unlabeled {:?}",
        scenario.labeled.num_frames_in_split(Split::Train),
        scenario
            .unlabeled
            .iter()
            .map(|c| c.num_frames_in_split(Split::Train))
            .collect::<Vec<_>>()
    );
    for mode in [
        TrainMode::FullsupLabeledOnly,
        TrainMode::FedcyNoCont,
        TrainMode::Fedcy,
        TrainMode::Fedtcc,
    ] {
        let mut unl = Vec::new();
        let mut held = Vec::new();
        let mut lab = Vec::new();
        let t0 = Instant::now();
        let mut rounds_used = Vec::new();
        for seed in 1..=seeds {
            let cfg = fed_cfg(mode, seed, lr);
            let fed = Federation::new(
                mcfg.clone(),
                cfg,
                &scenario.labeled,
                scenario.unlabeled.iter().collect(),
            )
            .unwrap();
            let run = fed.run().unwrap();
            let report = evaluate_scenario(
                &mcfg,
                &run.best_params,
                &scenario,
                Split::Test,
                mode.as_str(),
                seed,
            )
            .unwrap();
            unl.push(report.overall_unlabeled);
            held.push(report.held_out.f1);
            lab.push(report.labeled.f1);
            rounds_used.push(run.reports.len());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let std = |v: &[f64]| {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0).max(1.0))
                .sqrt()
        };
        println!(
            "{:22} labeled {:.3} unlabeled {:.3}±{:.3} held {:.3}±{:.3} rounds {:?} [{:.0}s]",
            mode.as_str(),
            mean(&lab),
            mean(&unl),
            std(&unl),
            mean(&held),
            std(&held),
            rounds_used,
            t0.elapsed().as_secs_f64()
        );
    }
}

fn rounds_probe(lr: f64, mode: TrainMode, seed: u64, scenario_seed: u64, rounds: u64) {
    let envf = |k: &str, d: f64| std::env::var(k).ok().and_then(|s| s.parse().ok()).unwrap_or(d);
    let scfg = ScenarioConfig {
        noise_sigma: envf("NOISE", 0.3),
        ..ScenarioConfig::default()
    };
    let scenario = generate_scenario(&scfg, scenario_seed).unwrap();
    let mcfg = model_cfg();
    let mut cfg = fed_cfg(mode, seed, lr);
    cfg.rounds_max = rounds;
    cfg.min_epochs = rounds; // disable early stop for diagnostics
    let mut fed = Federation::new(
        mcfg.clone(),
        cfg,
        &scenario.labeled,
        scenario.unlabeled.iter().collect(),
    )
    .unwrap();
    println!("mode {} seed {seed}", mode.as_str());
    for r in 1..=rounds {
        let rep = fed.run_round().unwrap();
        if r % 2 == 0 || r == 1 {
            let ev = evaluate_scenario(&mcfg, &fed.global, &scenario, Split::Test, mode.as_str(), seed)
                .unwrap();
            println!(
                "  round {r:3} val {:.3} labeled {:.3} unlabeled {:.3} held {:.3} loss {:?}",
                rep.val_f1,
                ev.labeled.f1,
                ev.overall_unlabeled,
                ev.held_out.f1,
                rep.client_losses.iter().map(|(_, l)| (l * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("all");
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    if which == "c3" || which == "all" {
        let tau: f64 = std::env::var("TAU").ok().and_then(|s| s.parse().ok()).unwrap_or(0.05);
        let ls: f64 = std::env::var("LS").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
        criterion3_probe(lr, tau, ls);
    }
    if which == "table" || which == "all" {
        let seeds = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3);
        let scenario_seed = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(17);
        table_probe(lr, seeds, scenario_seed);
    }
    if which == "rounds" {
        let mode: TrainMode = args.get(3).map(String::as_str).unwrap_or("fedcy").parse().unwrap();
        let seed = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
        let rounds = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(30);
        rounds_probe(lr, mode, seed, 17, rounds);
    }
}
