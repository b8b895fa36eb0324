//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::{gradient_check, jittered_params, random_matrix, random_targets, tiny_config, VARIANTS};
use intermpl::ctc::{brute_force_ctc_loss, ctc_loss, CtcError, Posteriorgram};
use intermpl::data::AugmentPolicy;
use intermpl::experiment::{prepare, run_mpl, run_oracle, run_seed, test_wer, ExperimentConfig, Prepared};
use intermpl::metrics::{median, wer_recovery_rate};
use intermpl::model::{intermediate_loss, Model, ModelVariant};
use intermpl::mpl::{online_step, MplState, MplVariant, Recognizer};
use intermpl::nn::{AdamConfig, ParamSet, ParamTensor};
use intermpl::rng::substream;
use rand::Rng;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn record(&mut self, id: u32, name: &str, pass: bool, detail: impl AsRef<str>) {
        println!(
            "criterion {id:>2} {} {name}: {}",
            if pass { "PASS" } else { "FAIL" },
            detail.as_ref()
        );
        if !pass {
            self.failures += 1;
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn random_posteriorgram<R: Rng>(rng: &mut R, frames: usize, width: usize) -> Posteriorgram {
    Posteriorgram::from_logits(&random_matrix(rng, frames, width, 3.0), 0)
}

fn ctc_oracle(out: &mut Outcome) {
    let start = Instant::now();
    let mut rng = substream(2024, "acceptance/ctc");
    let (mut checked, mut infeasible, mut worst) = (0usize, 0usize, 0.0f64);
    let mut mismatches = Vec::new();
    while checked < 400 {
        let frames = rng.random_range(1..=5);
        let vocab = rng.random_range(1..=3);
        let len = rng.random_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=vocab)).collect();
        let post = random_posteriorgram(&mut rng, frames, vocab + 1);
        match (ctc_loss(&post, &target), brute_force_ctc_loss(&post, &target)) {
            (Ok(fast), Ok(slow)) => {
                let err = (fast.loss - slow).abs();
                worst = worst.max(err);
                if err > 1e-9 {
                    mismatches.push(format!("T={frames} target={target:?}: {} vs {slow}", fast.loss));
                }
            }
            (Err(CtcError::Infeasible { .. }), Err(CtcError::Infeasible { .. })) => infeasible += 1,
            (a, b) => mismatches.push(format!("T={frames} target={target:?}: {a:?} vs {b:?}")),
        }
        checked += 1;
    }
    let elapsed = start.elapsed();
    out.record(
        1,
        "CTC matches exhaustive enumeration",
        mismatches.is_empty() && infeasible > 0 && elapsed < Duration::from_secs(10),
        format!(
            "{checked} instances ({infeasible} infeasible), max |diff| {worst:.2e}, {} mismatches, {}",
            mismatches.len(),
            secs(elapsed)
        ),
    );
}

fn gradients(out: &mut Outcome) {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut runs = 0;
    for variant in VARIANTS {
        for seed in 0..20 {
            worst = worst.max(gradient_check(variant, seed));
            runs += 1;
        }
    }
    let elapsed = start.elapsed();
    out.record(
        2,
        "full-model gradients match central differences",
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!("{runs} checks over 4 variants, max relative error {worst:.2e}, {}", secs(elapsed)),
    );
}

fn single_head_degeneracy(out: &mut Outcome) {
    let model = Model::new(tiny_config(ModelVariant::Ctc)).unwrap();
    let mut identical = true;
    for seed in 0..50 {
        let mut rng = substream(seed, "acceptance/degenerate");
        let params = jittered_params(&model, &mut rng);
        let x = random_matrix(&mut rng, 6, 3, 1.0);
        let targets = random_targets(model.config(), &mut rng);
        let outputs = model.forward(&params, &x).unwrap();
        let combined = intermediate_loss(&outputs, &targets).unwrap();
        let direct = ctc_loss(outputs.last(), &targets[0]).unwrap();
        identical &= combined.loss.to_bits() == direct.loss.to_bits();
        identical &= combined.logit_grads.len() == 1 && combined.logit_grads[0].1 == direct.logit_grads;
    }
    out.record(
        3,
        "intermediate loss with only the final head equals the CTC loss",
        identical,
        "50 random models, loss and logit gradient compared bit for bit",
    );
}

fn names(params: &ParamSet) -> Vec<String> {
    params.iter().map(|(n, _)| n.to_string()).collect()
}

fn conditioning_reduction(out: &mut Outcome) {
    let sc = Model::new(tiny_config(ModelVariant::ScCtc)).unwrap();
    let inter = Model::new(tiny_config(ModelVariant::InterCtc)).unwrap();
    let mut identical = true;
    for seed in 0..50 {
        let mut rng = substream(seed, "acceptance/conditioning");
        let mut sc_params = jittered_params(&sc, &mut rng);
        for name in names(&sc_params) {
            if name.starts_with("cond") {
                sc_params.by_name_mut(&name).unwrap().values_mut().fill(0.0);
            }
        }
        let mut inter_params = inter.init_params(&mut rng);
        for name in names(&inter_params) {
            let source = sc_params.by_name(&name).unwrap().values();
            inter_params.by_name_mut(&name).unwrap().values_mut().copy_from_slice(source);
        }
        let x = random_matrix(&mut rng, 6, 3, 1.0);
        let a = sc.forward(&sc_params, &x).unwrap();
        let b = inter.forward(&inter_params, &x).unwrap();
        for (p, q) in a.posteriorgrams().iter().zip(b.posteriorgrams()) {
            identical &= p.log_probs().as_slice().iter().zip(q.log_probs().as_slice()).all(|(u, v)| u.to_bits() == v.to_bits());
        }
    }
    out.record(
        4,
        "zeroed conditioning reduces self-conditioning to intermediate CTC",
        identical,
        "50 random models, every head posterior compared bit for bit",
    );
}

fn scalar(v: f64) -> ParamSet {
    let mut p = ParamSet::new();
    p.push("x", ParamTensor::from_values(&[1], vec![v]).unwrap());
    p
}

fn ema(out: &mut Outcome) {
    let mut rng = substream(5, "acceptance/ema");
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let alpha: f64 = rng.random_range(0.01..0.9999);
        let n: i32 = rng.random_range(1..300);
        let (phi0, xi): (f64, f64) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let mut phi = scalar(phi0);
        let online = scalar(xi);
        for _ in 0..n {
            phi.ema_update(&online, alpha).unwrap();
        }
        let closed = alpha.powi(n) * phi0 + (1.0 - alpha.powi(n)) * xi;
        worst = worst.max((phi.tensors()[0].values()[0] - closed).abs());
    }

    let mut cfg = ExperimentConfig::default();
    cfg.splits.labeled = 8;
    cfg.splits.unlabeled = 16;
    cfg.splits.dev = 4;
    cfg.splits.test = 4;
    cfg.model.layers = 2;
    cfg.model.hidden = 8;
    cfg.model.ff_hidden = 8;
    cfg.model.head_layers = vec![1, 2];
    cfg.seed_training.epochs = 1;
    let prep = prepare(&cfg).unwrap();
    let (model, seed) = run_seed(&cfg, &prep, ModelVariant::ScCtc).unwrap();
    let rec = Recognizer::new(&model, &prep.vocab).unwrap();
    let alpha = 0.7;
    let mut state = MplState::new(&seed.params, MplVariant::InterMpl, alpha, 0.5, AdamConfig::default()).unwrap();
    let unl: Vec<_> = prep.corpus.unlabeled.utterances.iter().collect();
    let lab: Vec<_> = prep.corpus.labeled.utterances.iter().collect();
    let mut rng = substream(5, "acceptance/ema/steps");
    let mut provenance = true;
    for chunk in unl.chunks(4) {
        let before = state.offline().snapshot();
        online_step(&mut state, &rec, chunk, &lab[..2], &AugmentPolicy::default(), 1e-2, 5.0, &mut rng).unwrap();
        let mut expected = before;
        expected.ema_update(state.online(), alpha).unwrap();
        provenance &= expected
            .tensors()
            .iter()
            .zip(state.offline().tensors())
            .all(|(a, b)| a.values() == b.values() && b.grad().iter().all(|g| *g == 0.0));
    }
    out.record(
        5,
        "momentum update closed form and offline provenance",
        worst <= 1e-12 && provenance,
        format!("500 closed-form cases, max error {worst:.2e}; offline model equals the EMA of the online model after every step: {provenance}"),
    );
}

fn wrr_spot_check(out: &mut Outcome) {
    let v = wer_recovery_rate(7.5, 5.7, 3.9).unwrap();
    out.record(10, "WER recovery rate spot check", (v - 50.0).abs() <= 0.05, format!("wrr(7.5, 5.7, 3.9) = {v:.4}"));
}

fn determinism(out: &mut Outcome) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.toml");
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 17;
    cfg.splits.labeled = 12;
    cfg.splits.unlabeled = 24;
    cfg.splits.dev = 6;
    cfg.splits.test = 6;
    cfg.model.layers = 3;
    cfg.model.hidden = 12;
    cfg.model.ff_hidden = 16;
    cfg.model.head_layers = vec![1, 2, 3];
    cfg.seed_training.epochs = 2;
    cfg.mpl.epochs = 2;
    std::fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let bin = env!("CARGO_BIN_EXE_intermpl");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let p = |path: &Path| path.to_str().unwrap().to_string();
    let seed_dir = tmp.path().join("seed");
    run(&["train-seed", "--config", &p(&cfg_path), "--out", &p(&seed_dir)]);
    let summaries: Vec<String> = ["a", "b"]
        .iter()
        .map(|name| {
            let dir = tmp.path().join(name);
            run(&[
                "train-mpl",
                "--config",
                &p(&cfg_path),
                "--out",
                &p(&dir),
                "--init",
                &p(&seed_dir.join("model.ckpt")),
            ]);
            let report = std::fs::read_to_string(dir.join("report.jsonl")).unwrap();
            report.lines().last().unwrap().to_string()
        })
        .collect();
    out.record(
        11,
        "train-mpl is deterministic",
        summaries[0] == summaries[1] && summaries[0].contains("\"record\":\"summary\""),
        "two runs with identical configuration produced identical summary records",
    );
}

/// Test WERs of one experiment seed.
#[derive(Default)]
struct SeedResults {
    seed_ctc: f64,
    seed_sc: f64,
    seed_hc: f64,
    oracle_ctc: f64,
    mpl_ctc: f64,
    last_sc: f64,
    inter_hc: f64,
    inter_sc: f64,
    no_inter_sc: f64,
    shifted_seed_sc: f64,
    shifted_oracle_sc: f64,
    shifted_last_sc: f64,
}

fn mpl_test_wer(cfg: &ExperimentConfig, prep: &Prepared, m: &Model, p: &ParamSet, method: MplVariant) -> f64 {
    let (_, _, report) = run_mpl(cfg, prep, m, p, method, false).unwrap();
    report.summary.test_wer.unwrap()
}

fn trends(out: &mut Outcome) {
    let mut results = Vec::new();
    let (mut t_seed, mut t_semi, mut t_ablation, mut t_shift) =
        (Duration::ZERO, Duration::ZERO, Duration::ZERO, Duration::ZERO);
    for seed in SEEDS {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let prep = prepare(&cfg).unwrap();
        let mut r = SeedResults::default();

        let t = Instant::now();
        let (ctc, ctc_run) = run_seed(&cfg, &prep, ModelVariant::Ctc).unwrap();
        let (sc, sc_run) = run_seed(&cfg, &prep, ModelVariant::ScCtc).unwrap();
        let (hc, hc_run) = run_seed(&cfg, &prep, ModelVariant::HcCtc).unwrap();
        r.seed_ctc = test_wer(&cfg, &prep, &ctc, &ctc_run.params).unwrap();
        r.seed_sc = test_wer(&cfg, &prep, &sc, &sc_run.params).unwrap();
        r.seed_hc = test_wer(&cfg, &prep, &hc, &hc_run.params).unwrap();
        t_seed += t.elapsed();

        let t = Instant::now();
        let (om, orun) = run_oracle(&cfg, &prep, ModelVariant::Ctc).unwrap();
        r.oracle_ctc = test_wer(&cfg, &prep, &om, &orun.params).unwrap();
        r.mpl_ctc = mpl_test_wer(&cfg, &prep, &ctc, &ctc_run.params, MplVariant::Mpl);
        r.last_sc = mpl_test_wer(&cfg, &prep, &sc, &sc_run.params, MplVariant::InterMplLast);
        r.inter_hc = mpl_test_wer(&cfg, &prep, &hc, &hc_run.params, MplVariant::InterMpl);
        t_semi += t.elapsed();

        let t = Instant::now();
        r.inter_sc = mpl_test_wer(&cfg, &prep, &sc, &sc_run.params, MplVariant::InterMpl);
        r.no_inter_sc = mpl_test_wer(&cfg, &prep, &sc, &sc_run.params, MplVariant::Mpl);
        t_ablation += t.elapsed();

        let t = Instant::now();
        let mut shifted_cfg = cfg.clone();
        shifted_cfg.corpus.shift.enabled = true;
        let shifted = prepare(&shifted_cfg).unwrap();
        assert_eq!(shifted.vocab, prep.vocab, "the labeled split does not depend on the shift");
        r.shifted_seed_sc = test_wer(&shifted_cfg, &shifted, &sc, &sc_run.params).unwrap();
        let (om, orun) = run_oracle(&shifted_cfg, &shifted, ModelVariant::ScCtc).unwrap();
        r.shifted_oracle_sc = test_wer(&shifted_cfg, &shifted, &om, &orun.params).unwrap();
        r.shifted_last_sc = mpl_test_wer(&shifted_cfg, &shifted, &sc, &sc_run.params, MplVariant::InterMplLast);
        t_shift += t.elapsed();

        eprintln!(
            "seed {seed}: seeds ctc {:.4} sc {:.4} hc {:.4} | oracle {:.4} mpl {:.4} last(sc) {:.4} inter(hc) {:.4} | inter(sc) {:.4} no-inter(sc) {:.4} | shifted seed {:.4} oracle {:.4} last {:.4}",
            r.seed_ctc, r.seed_sc, r.seed_hc, r.oracle_ctc, r.mpl_ctc, r.last_sc, r.inter_hc, r.inter_sc, r.no_inter_sc,
            r.shifted_seed_sc, r.shifted_oracle_sc, r.shifted_last_sc
        );
        results.push(r);
    }
    let med = |f: fn(&SeedResults) -> f64| median(&results.iter().map(f).collect::<Vec<_>>());

    let (ctc, sc, hc) = (med(|r| r.seed_ctc), med(|r| r.seed_sc), med(|r| r.seed_hc));
    out.record(
        6,
        "seed quality ordering",
        sc <= ctc && hc <= ctc && t_seed < Duration::from_secs(600),
        format!("median test WER ctc {ctc:.4}, sc-ctc {sc:.4}, hc-ctc {hc:.4}; {}", secs(t_seed)),
    );

    let wrr = wer_recovery_rate(ctc, med(|r| r.mpl_ctc), med(|r| r.oracle_ctc));
    let (mpl, last, inter_hc) = (med(|r| r.mpl_ctc), med(|r| r.last_sc), med(|r| r.inter_hc));
    out.record(
        7,
        "semi-supervised ordering",
        matches!(wrr, Ok(w) if w > 0.0) && last <= mpl && inter_hc <= mpl && t_semi < Duration::from_secs(1800),
        format!(
            "MPL WRR {}; median test WER MPL {mpl:.4}, InterMPL-Last {last:.4}, InterMPL(hc-ctc) {inter_hc:.4}; {}",
            wrr.map_or_else(|e| e.to_string(), |w| format!("{w:.1}%")),
            secs(t_semi)
        ),
    );

    let (full, ablated) = (med(|r| r.inter_sc), med(|r| r.no_inter_sc));
    out.record(
        8,
        "removing the intermediate loss does not help",
        ablated >= full,
        format!("median test WER InterMPL {full:.4}, without intermediate loss {ablated:.4}; {}", secs(t_ablation)),
    );

    let wrr = wer_recovery_rate(
        med(|r| r.shifted_seed_sc),
        med(|r| r.shifted_last_sc),
        med(|r| r.shifted_oracle_sc),
    );
    out.record(
        9,
        "out-of-domain InterMPL-Last recovers WER",
        matches!(wrr, Ok(w) if w > 0.0),
        format!(
            "shifted test WER seed {:.4}, InterMPL-Last {:.4}, oracle {:.4}, WRR {}; {}",
            med(|r| r.shifted_seed_sc),
            med(|r| r.shifted_last_sc),
            med(|r| r.shifted_oracle_sc),
            wrr.map_or_else(|e| e.to_string(), |w| format!("{w:.1}%")),
            secs(t_shift)
        ),
    );
}

fn main() {
    let mut out = Outcome { failures: 0 };
    ctc_oracle(&mut out);
    gradients(&mut out);
    single_head_degeneracy(&mut out);
    conditioning_reduction(&mut out);
    ema(&mut out);
    wrr_spot_check(&mut out);
    determinism(&mut out);
    trends(&mut out);
    if out.failures > 0 {
        println!("acceptance: {} criteria failed", out.failures);
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
