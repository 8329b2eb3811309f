//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the PASS/FAIL lines are always printed.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use outfit_compat::catalog::{sample_triplets, Catalog, Item, PairSet, Side, SplitFractions, Triplet};
use outfit_compat::dataset::Dataset;
use outfit_compat::distill::{
    attention_confidence, attention_forward, build_teacher, distill_backward, distill_forward, distill_loss,
    teacher_objective, AttentionParams, ScoreDistribution,
};
use outfit_compat::eval::{evaluate_auc, mrr_retrieval, rand_baseline, QuerySplit, StudentScorer, TeacherScorer};
use outfit_compat::numerics::{finite_diff_gradient, relative_error, softmax2};
use outfit_compat::params::Parameters;
use outfit_compat::rules::{constraint_vector, reward_indicators, Attribute, Polarity, Rule, RuleConstraint, RuleSet};
use outfit_compat::student::{bpr_loss, student_forward, EncoderParams, StudentConfig};
use outfit_compat::synth::{gen_synthetic, random_pairs, SynthConfig};
use outfit_compat::trainer::{
    resume, save_checkpoint, train, train_with_observer, Checkpoint, Selection, TrainConfig,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()
}

fn randomize<P: Parameters>(p: &mut P, rng: &mut ChaCha8Rng, scale: f64) {
    let flat = gaussian(rng, p.num_values(), scale);
    p.assign_flat(&flat);
}

/// One top and two bottoms; rule `l` fires on a random non-empty subset of
/// the two pairs, so every rule is activated.
fn gradient_instance(rng: &mut ChaCha8Rng, n_rules: usize) -> (Catalog, RuleSet) {
    let tokens: Vec<String> = (0..n_rules).map(|l| format!("c{l}")).collect();
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for t in &tokens {
        match rng.random_range(0..3) {
            0 => pos.push(t.clone()),
            1 => neg.push(t.clone()),
            _ => {
                pos.push(t.clone());
                neg.push(t.clone());
            }
        }
    }
    let item = |rng: &mut ChaCha8Rng, id: &str, side, toks: &[String]| {
        Item::new(id, side, gaussian(rng, 6, 1.0), gaussian(rng, 4, 1.0), toks)
    };
    let catalog = Catalog::from_items([
        item(rng, "t", Side::Top, &tokens),
        item(rng, "b0", Side::Bottom, &pos),
        item(rng, "b1", Side::Bottom, &neg),
    ])
    .unwrap();
    let rules = RuleSet::new(
        tokens
            .iter()
            .map(|t| {
                let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                Rule::new(Attribute::Color, t, t, polarity)
            })
            .collect(),
    );
    (catalog, rules)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cfg = StudentConfig::new(vec![8, 5], 0.0).unwrap();
    let t = Triplet::new(0, 0, 1);
    let mut worst: f64 = 0.0;
    let instances = 24;
    for _ in 0..instances {
        let (catalog, rules) = gradient_instance(&mut rng, 4);
        let mut student = EncoderParams::init(10, &cfg, rng.random()).unwrap();
        randomize(&mut student, &mut rng, 0.8);
        let mut att = AttentionParams::init(10, 4, 7, rng.random()).unwrap();
        randomize(&mut att, &mut rng, 0.8);
        let rho = rng.random_range(0.05..0.95);
        let c = rng.random_range(0.5..6.0);

        let fw = distill_forward(&student, &att, &catalog, &rules, t, rho, c).unwrap();
        assert_eq!(fw.constraints.len(), 4);
        let mut gs = student.zeros_like();
        let mut ga = att.zeros_like();
        distill_backward(&student, &att, &fw, &mut gs, &mut ga).unwrap();

        // q is a constant target for the student; p is constant for Φ.
        let q = fw.teacher.q;
        let theta = |flat: &[f64]| {
            let mut s = student.clone();
            s.assign_flat(flat);
            let sf = student_forward(&s, &catalog, t).unwrap();
            let p = ScoreDistribution::from_scores(sf.m_ij, sf.m_ik);
            distill_loss(p, q, bpr_loss(sf.m_ij, sf.m_ik), rho).unwrap().value
        };
        let p = fw.p;
        let ids: Vec<usize> = fw.constraints.iter().map(|c| c.rule_id).collect();
        let phi = |flat: &[f64]| {
            let mut a = att.clone();
            a.assign_flat(flat);
            let conf = attention_confidence(&a, &catalog, t, &ids).unwrap();
            let q = build_teacher(p, &fw.constraints, &conf, c).q;
            distill_loss(p, q, fw.bpr, rho).unwrap().value
        };
        let num_theta = finite_diff_gradient(theta, &student.flatten(), 1e-5).unwrap();
        let num_phi = finite_diff_gradient(phi, &att.flatten(), 1e-5).unwrap();
        for (a, b) in gs.flatten().iter().zip(num_theta.iter()).chain(ga.flatten().iter().zip(num_phi.iter())) {
            worst = worst.max(relative_error(*a, *b, 1e-6));
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{instances} instances, max relative error {worst:.2e} (tolerance 1e-4)"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    let mut below = false;
    let instances = 12;
    for _ in 0..instances {
        let (a, b) = softmax2(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
        let p = ScoreDistribution::new(a, b).unwrap();
        let n_rules = rng.random_range(1..=4);
        let constraints: Vec<RuleConstraint> = (0..n_rules)
            .map(|l| {
                let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                RuleConstraint::from_activation(l, polarity, rng.random_bool(0.5), rng.random_bool(0.5))
            })
            .collect();
        let raw: Vec<f64> = (0..n_rules).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let conf: Vec<(usize, f64)> = raw.iter().enumerate().map(|(l, v)| (l, v / total)).collect();
        let c = rng.random_range(0.1..8.0);

        let q = build_teacher(p, &constraints, &conf, c).q;
        let closed = teacher_objective(q, p, &constraints, &conf, c);
        let grid_best = (0..=10_000)
            .map(|k| {
                let x = k as f64 * 1e-4;
                teacher_objective(ScoreDistribution { ij: x, ik: 1.0 - x }, p, &constraints, &conf, c)
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((closed - grid_best).abs());
        below |= closed > grid_best + 1e-12;
    }
    outcome(
        worst <= 1e-3 && !below,
        format!("{instances} instances, max |closed form − grid best| {worst:.2e} (tolerance 1e-3), closed form never above grid: {}", !below),
    )
}

fn synthetic_dataset(seed: u64) -> Dataset {
    let data = gen_synthetic(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
    Dataset::split(data.catalog, &data.pairs, data.rules, SplitFractions::default(), seed).unwrap()
}

fn trajectory(ds: &Dataset, rules: &RuleSet, cfg: &TrainConfig) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    train_with_observer(&ds.catalog, &ds.train, &ds.valid, rules, cfg, &mut |_, s, _| {
        out.push(s.flatten().iter().map(|v| v.to_bits()).collect())
    })
    .unwrap();
    out
}

fn criterion_3() -> Outcome {
    let ds = synthetic_dataset(0);
    let cfg = TrainConfig {
        epochs: 5,
        seed: 7,
        ..TrainConfig::default()
    };
    let dbpr = trajectory(&ds, &ds.rules, &cfg.as_dbpr());
    let zero_rho = trajectory(&ds, &ds.rules, &TrainConfig { rho_max: 0.0, ..cfg.clone() });
    let no_rules = trajectory(&ds, &RuleSet::default(), &cfg);
    let with_rules = trajectory(&ds, &ds.rules, &cfg);
    let (a, b) = (zero_rho == dbpr, no_rules == dbpr);
    outcome(
        a && b && dbpr.len() == 5,
        format!(
            "5 epochs: rho=0 identical {a}, empty rule set identical {b} (control: default AKD differs {})",
            with_rules != dbpr
        ),
    )
}

struct LiftRun {
    dbpr: f64,
    akd_p: f64,
    akd_q: f64,
    akd_loss_ratio: f64,
    dbpr_loss_ratio: f64,
}

fn loss_ratio(ck: &Checkpoint) -> f64 {
    ck.history[39].train_loss / ck.history[0].train_loss
}

fn lift_run(seed: u64) -> LiftRun {
    let ds = synthetic_dataset(seed);
    let test = ds.test_triplets(3).unwrap();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let akd = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg).unwrap();
    let dbpr = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg.as_dbpr()).unwrap();
    let p_auc = |ck: &Checkpoint| {
        evaluate_auc(&StudentScorer::new(&ck.student, &ds.catalog).unwrap(), &test)
            .unwrap()
            .auc
    };
    let teacher = TeacherScorer::new(&akd.student, &akd.attention, &ds.rules, &ds.catalog, cfg.c).unwrap();
    LiftRun {
        dbpr: p_auc(&dbpr),
        akd_p: p_auc(&akd),
        akd_q: evaluate_auc(&teacher, &test).unwrap().auc,
        akd_loss_ratio: loss_ratio(&akd),
        dbpr_loss_ratio: loss_ratio(&dbpr),
    }
}

fn criterion_4(runs: &[LiftRun]) -> Outcome {
    let n = runs.len() as f64;
    let mean = |f: fn(&LiftRun) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let (d, p, q) = (mean(|r| r.dbpr), mean(|r| r.akd_p), mean(|r| r.akd_q));
    outcome(
        p - d >= 0.01 && q - d >= 0.01,
        format!(
            "{} seeds: DBPR {d:.4} (calibration range 0.6..0.9: {}), AKD-p {p:.4} (lift {:+.4}), AKD-q {q:.4} (lift {:+.4}); both lifts must be >= 0.01",
            runs.len(),
            d > 0.6 && d < 0.9,
            p - d,
            q - d
        ),
    )
}

fn criterion_5() -> Outcome {
    // One triplet per distinct positive pair, so the 10,000 outcomes are
    // not correlated through repeated positive scores.
    let data = gen_synthetic(&SynthConfig::default()).unwrap();
    let positives = random_pairs(&data.catalog, 10_000, 4).unwrap();
    let triplets = sample_triplets(&data.catalog, &positives, 1, 1).unwrap();
    let rand = rand_baseline(99);
    let auc = evaluate_auc(&rand, &triplets).unwrap();

    let big = gen_synthetic(&SynthConfig {
        n_tops: 3000,
        n_pairs: 2500,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let none = PairSet::for_catalog(vec![], &big.catalog).unwrap();
    let mrr = mrr_retrieval(&rand, &big.catalog, &big.pairs, &none, &big.pairs, 10, 3, QuerySplit::All).unwrap();
    let expected: f64 = (1..=10).map(|k| 1.0 / k as f64).sum::<f64>() / 10.0;
    let auc_ok = (auc.auc - 0.5).abs() <= 0.02 && auc.n_triplets >= 10_000;
    let mrr_ok = (mrr.mrr - expected).abs() <= 0.02 && mrr.n_queries >= 1000;
    outcome(
        auc_ok && mrr_ok,
        format!(
            "random AUC {:.4} over {} triplets; random MRR@10 {:.4} over {} queries (expected {expected:.4} ± 0.02)",
            auc.auc, auc.n_triplets, mrr.mrr, mrr.n_queries
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (catalog, rules) = gradient_instance(&mut rng, 4);
    let t = Triplet::new(0, 0, 1);
    let ids: Vec<usize> = constraint_vector(&rules, &catalog, t).iter().map(|c| c.rule_id).collect();
    let base = AttentionParams::init(10, 4, 5, 1).unwrap();
    let mut worst_conf: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    let mut bounded = true;
    let cases = 10_000;
    for n in 0..cases {
        // every fourth case uses extreme magnitudes
        let scale = if n % 4 == 0 { 700.0 } else { rng.random_range(0.01..20.0) };
        let mut phi = base.clone();
        randomize(&mut phi, &mut rng, scale);
        let fw = attention_forward(&phi, &catalog, t, &ids).unwrap();
        let sum: f64 = fw.confidences.iter().sum();
        worst_conf = worst_conf.max((sum - 1.0).abs());
        bounded &= fw.confidences.iter().all(|c| (0.0..=1.0).contains(c));

        let logit = |rng: &mut ChaCha8Rng| if n % 4 == 0 { rng.random_range(-700.0..700.0) } else { rng.random_range(-10.0..10.0) };
        let (a, b) = softmax2(logit(&mut rng), logit(&mut rng));
        let p = ScoreDistribution::new(a, b).unwrap();
        let constraints: Vec<RuleConstraint> = ids
            .iter()
            .map(|&l| {
                let polarity = if rng.random_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                RuleConstraint::from_activation(l, polarity, rng.random_bool(0.5), rng.random_bool(0.5))
            })
            .collect();
        let c = if n % 4 == 0 { rng.random_range(1.0..700.0) } else { rng.random_range(0.1..10.0) };
        let q = build_teacher(p, &constraints, &fw.confidence_map(), c).q;
        worst_q = worst_q.max((q.ij + q.ik - 1.0).abs());
        bounded &= (0.0..=1.0).contains(&q.ij) && (0.0..=1.0).contains(&q.ik);
    }
    outcome(
        worst_conf <= 1e-12 && worst_q <= 1e-12 && bounded,
        format!("{cases} fuzz cases: max |Σλ − 1| {worst_conf:.1e}, max |Σq − 1| {worst_q:.1e}, all in [0,1]: {bounded}"),
    )
}

fn criterion_7() -> Outcome {
    let ds = synthetic_dataset(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        seed: 11,
        selection: Selection::Last,
        ..TrainConfig::default()
    };
    let a = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg).unwrap();
    let b = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &cfg).unwrap();
    let (pa, pb) = (dir.path().join("a.json"), dir.path().join("b.json"));
    save_checkpoint(&a, &pa).unwrap();
    save_checkpoint(&b, &pb).unwrap();
    let bytes_equal = std::fs::read(&pa).unwrap() == std::fs::read(&pb).unwrap();

    let short = train(&ds.catalog, &ds.train, &ds.valid, &ds.rules, &TrainConfig { epochs: 3, ..cfg.clone() }).unwrap();
    let ps = dir.path().join("short.json");
    save_checkpoint(&short, &ps).unwrap();
    let loaded = outfit_compat::trainer::load_checkpoint(&ps).unwrap();
    let round_trip = loaded == short;
    let resumed = resume(&ds.catalog, &ds.train, &ds.valid, &ds.rules, loaded, 1, &mut |_, _, _| {})
        .unwrap()
        .last;
    let resume_equal = resumed.student == a.student
        && resumed.attention == a.attention
        && resumed.history == a.history
        && resumed.student_velocity == a.student_velocity;
    outcome(
        bytes_equal && round_trip && resume_equal,
        format!("byte-identical checkpoints {bytes_equal}, exact round trip {round_trip}, 3 epochs + save/load/resume 1 == 4 epochs {resume_equal}"),
    )
}

fn criterion_8() -> Outcome {
    use Polarity::{Negative, Positive};
    // (polarity, fires on (i,j), fires on (i,k)) -> (f_ij, f_ik)
    let table = [
        (Positive, true, false, (true, false)),
        (Positive, false, true, (false, true)),
        (Positive, true, true, (false, false)),
        (Positive, false, false, (false, false)),
        (Negative, true, false, (false, true)),
        (Negative, false, true, (true, false)),
        (Negative, true, true, (false, false)),
        (Negative, false, false, (false, false)),
    ];
    let mut failures = Vec::new();
    for &(polarity, a_ij, a_ik, expected) in &table {
        if reward_indicators(polarity, a_ij, a_ik) != expected {
            failures.push(format!("indicator {polarity:?} {a_ij} {a_ik}"));
        }
        // Same case through token activation on real items.
        let tok = |on: bool| if on { vec!["navy"] } else { vec!["khaki"] };
        let catalog = Catalog::from_items([
            Item::new("t", Side::Top, vec![0.0], vec![0.0], ["navy"]),
            Item::new("j", Side::Bottom, vec![0.0], vec![0.0], tok(a_ij)),
            Item::new("k", Side::Bottom, vec![0.0], vec![0.0], tok(a_ik)),
        ])
        .unwrap();
        let rules = RuleSet::new(vec![Rule::new(Attribute::Color, "navy", "navy", polarity)]);
        let cv = constraint_vector(&rules, &catalog, Triplet::new(0, 0, 1));
        let got = cv.first().map_or((false, false), |c| (c.f_ij, c.f_ik));
        let activated = !cv.is_empty();
        if got != expected || activated != (a_ij || a_ik) {
            failures.push(format!("catalog {polarity:?} {a_ij} {a_ik}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!("{} cases x 2 paths, mismatches: {failures:?}", table.len()),
    )
}

fn criterion_9(runs: &[LiftRun]) -> Outcome {
    let r = &runs[0];
    outcome(
        r.akd_loss_ratio <= 0.6,
        format!(
            "default AKD run (seed 0): loss(40)/loss(1) = {:.3} (bound 0.6); ranking-only run on the same data: {:.3}",
            r.akd_loss_ratio, r.dbpr_loss_ratio
        ),
    )
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, o: Outcome| {
        println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    let runs: Vec<LiftRun> = (0..5).map(lift_run).collect();
    report(4, criterion_4(&runs));
    report(5, criterion_5());
    report(6, criterion_6());
    report(7, criterion_7());
    report(8, criterion_8());
    report(9, criterion_9(&runs));
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
