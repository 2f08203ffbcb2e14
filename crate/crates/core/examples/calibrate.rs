//! Desk calibration run: trains the desk profile on a generated corpus and
//! prints per-epoch test metrics.
//!
//! `cargo run --release -p ksvqe --example calibrate -- [seeds] [localized] [toggles]`
//!
//! `CAL_CORPUS`, `CAL_LR`, `CAL_BATCH`, `CAL_WD` and `CAL_CONST` (constant
//! learning rate) override the corpus seed and the recipe.

use std::time::Instant;

use ksvqe::model::Toggles;
use ksvqe::trainer::{train, TrainConfig};
use ksvqe::worksim::{check_trends, generate_corpus, WorksimConfig};

fn main() -> ksvqe::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(1);
    let localized = args.get(1).is_some_and(|s| s == "localized");
    let toggles = match args.get(2).map(String::as_str) {
        None | Some("all") => Toggles::ALL,
        Some(spec) => {
            let on: Vec<&str> = spec.split('+').collect();
            Toggles { qrs: on.contains(&"qrs"), cam: on.contains(&"cam"), dam: on.contains(&"dam") }
        }
    };
    for seed in 0..seeds {
        let t0 = Instant::now();
        let wcfg = WorksimConfig { localized, ..Default::default() };
        let corpus_seed = std::env::var("CAL_CORPUS").ok().and_then(|v| v.parse().ok()).unwrap_or(0);
        let corpus = generate_corpus(&wcfg, corpus_seed)?;
        let trends = check_trends(&corpus.manifest);
        println!("seed {seed}: corpus in {:.1}s, trends hold: {}", t0.elapsed().as_secs_f64(), trends.holds());
        let mut cfg = TrainConfig::desk();
        cfg.seed = seed;
        cfg.model.toggles = toggles;
        if let Some(lr) = std::env::var("CAL_LR").ok().and_then(|v| v.parse().ok()) {
            cfg.lr = lr;
        }
        if std::env::var("CAL_CONST").is_ok() {
            cfg.lr_schedule = ksvqe::trainer::LrSchedule::Constant;
        }
        if let Some(wd) = std::env::var("CAL_WD").ok().and_then(|v| v.parse().ok()) {
            cfg.weight_decay = wd;
        }
        if let Some(b) = std::env::var("CAL_BATCH").ok().and_then(|v| v.parse().ok()) {
            cfg.batch_size = b;
        }
        let t1 = Instant::now();
        let out = train(&cfg, &corpus, None)?;
        for l in &out.logs {
            println!(
                "  epoch {:2} loss {:.4} plcc_loss {:.4} contrastive {:?} test SROCC {:.4} PLCC {:.4}",
                l.epoch, l.train_loss, l.plcc_loss, l.contrastive_loss.map(|c| (c * 1e4).round() / 1e4), l.test_srocc, l.test_plcc
            );
        }
        println!(
            "  {} final SROCC {:.4} PLCC {:.4} in {:.1}s",
            toggles.label(),
            out.final_eval.srocc,
            out.final_eval.plcc,
            t1.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
