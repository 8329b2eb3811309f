//! Paired AKD vs DBPR runs on synthetic data.
//!
//! cargo run --release --example lift -- [seeds] [key=value ...]
//! Keys: noise, boost, suppression, style, vdim, cdim, epochs, lr, c, rho_max, rho_alpha, hidden.

use outfit_compat::catalog::SplitFractions;
use outfit_compat::dataset::Dataset;
use outfit_compat::eval::{evaluate_auc, StudentScorer, TeacherScorer};
use outfit_compat::synth::{gen_synthetic, SynthConfig};
use outfit_compat::trainer::{train, TrainConfig};
use rayon::prelude::*;

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut synth = SynthConfig::default();
    let mut cfg = TrainConfig::default();
    for kv in args {
        let (k, v) = kv.split_once('=').expect("key=value");
        let f: f64 = v.parse().expect("number");
        match k {
            "noise" => synth.noise = f,
            "boost" => synth.rule_boost = f,
            "suppression" => synth.suppression = f,
            "style" => synth.style_weight = f,
            "epochs" => cfg.epochs = f as usize,
            "lr" => cfg.learning_rate = f,
            "c" => cfg.c = f,
            "rho_max" => cfg.rho_max = f,
            "rho_alpha" => cfg.rho_alpha = f,
            "vdim" => synth.visual_dim = f as usize,
            "cdim" => synth.contextual_dim = f as usize,
            "hidden" => cfg.hidden_sizes = vec![f as usize],
            _ => panic!("unknown key {k}"),
        }
    }
    if let Ok(r) = std::env::var("RULES") {
        synth.rules = r.split(';').map(String::from).collect();
    }
    let seed0: u64 = std::env::var("SEED0").ok().and_then(|s| s.parse().ok()).unwrap_or(0);
    let rows: Vec<_> = (seed0..seed0 + seeds)
        .into_par_iter()
        .map(|seed| {
            let data = gen_synthetic(&SynthConfig { seed, ..synth.clone() }).unwrap();
            let ds = Dataset::split(data.catalog, &data.pairs, data.rules, SplitFractions::default(), seed).unwrap();
            let test = ds.test_triplets(3).unwrap();
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let akd = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg).unwrap();
            let dbpr = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg.as_dbpr()).unwrap();
            let p = |ck: &outfit_compat::trainer::Checkpoint| {
                evaluate_auc(&StudentScorer::new(&ck.student, &ds.catalog).unwrap(), &test).unwrap().auc
            };
            let q = evaluate_auc(&TeacherScorer::new(&akd.student, &akd.attention, &ds.rules, &ds.catalog, cfg.c).unwrap(), &test)
                .unwrap()
                .auc;
            let first = akd.history[0].train_loss;
            let last = akd.history.last().unwrap().train_loss;
            let dfirst = dbpr.history[0].train_loss;
            let dlast = dbpr.history.last().unwrap().train_loss;
            (seed, p(&dbpr), p(&akd), q, last / first, dlast / dfirst, akd.epoch, dbpr.epoch)
        })
        .collect();
    let mut sums = [0.0; 3];
    for r in &rows {
        println!(
            "seed {} dbpr {:.4} akd-p {:.4} akd-q {:.4} loss-ratio akd {:.3} dbpr {:.3} best-epoch {}/{}",
            r.0, r.1, r.2, r.3, r.4, r.5, r.6, r.7
        );
        sums[0] += r.1;
        sums[1] += r.2;
        sums[2] += r.3;
    }
    let n = rows.len() as f64;
    println!(
        "mean dbpr {:.4} akd-p {:.4} (lift {:+.4}) akd-q {:.4} (lift {:+.4})",
        sums[0] / n,
        sums[1] / n,
        (sums[1] - sums[0]) / n,
        sums[2] / n,
        (sums[2] - sums[0]) / n
    );
}
