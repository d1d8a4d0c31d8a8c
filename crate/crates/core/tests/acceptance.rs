//! Acceptance checks, one line per criterion. Run with
//! `cargo test --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hetlm::cluster::adjusted_rand_index;
use hetlm::config::RunConfig;
use hetlm::corpus::{split_train_test, PopulationSpec, SessionDataset, SplitTag, Vocabulary};
use hetlm::encoder::EncoderConfig;
use hetlm::eval::{
    composite, evaluate, kl_diagnostic, metric_row, page_gen_metrics, random_assignment, Confusion, EvalOptions,
    MetricsReport, WinRule,
};
use hetlm::predictor::{Predictor, PredictorConfig};
use hetlm::tensor::SeededRng;
use hetlm::train::{
    finetune, kmeans_baseline, loss_l2, loss_l3, pretrain_shared, train_hetlm, ClusterModel, FinetuneConfig,
    HetlmRun, TrainData,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// The three-group synthetic population, pretrained single model, and the
/// HeTLM run on top of it. Shared by several criteria.
struct Synthetic {
    labels: Vec<usize>,
    train: SessionDataset,
    test: SessionDataset,
    vocab: Vocabulary,
    config: RunConfig,
    single: ClusterModel,
    run: HetlmRun,
    seed: u64,
}

fn synthetic() -> Synthetic {
    let seed = 7;
    let spec = PopulationSpec::disjoint(3, 20, 1100, 1);
    let out = spec.synthesize(2).unwrap();
    let (train, test) = split_train_test(&out.dataset, 300.0 / 3300.0, 3).unwrap();
    let labels = out.labels_for(&train);
    let vocab = Vocabulary::build(&train).unwrap();
    let mut config = RunConfig::desk_scale();
    // Pretrain on all 3000 training users.
    config.pretrain.validation_fraction = 0.0;
    config.train.k_init = 6;
    config.train.alpha = 5.0;
    config.train.beta = 9.0;
    config.train.epochs = 10;
    let data = TrainData {
        vocab: &vocab,
        encoder: config.encoder,
        train: &train,
        validation: None,
    };
    let pre = pretrain_shared(&data, config.predictor, &config.pretrain, seed).unwrap();
    let run = train_hetlm(&pre.predictor, &data, &config.train, seed, 1, None).unwrap();
    let single = ClusterModel::single("single", config.encoder, vocab.clone(), pre.predictor);
    Synthetic {
        labels,
        train,
        test,
        vocab,
        config,
        single,
        run,
        seed,
    }
}

fn loss_analytics(syn: &Synthetic) -> Outcome {
    let l2_uniform = loss_l2(&[0.25; 4]);
    let l2_onehot = loss_l2(&[0.0, 1.0, 0.0, 0.0]);
    let l3_single = loss_l3(&[vec![0.3, -1.2]]);
    let l3_pair = loss_l3(&[vec![0.0, 0.0], vec![1.0, 1.0]]);
    let sigma_m2 = 1.0 / (1.0 + 2f64.exp());
    let mut pass = (l2_uniform - 4f64.ln()).abs() <= 1e-6
        && l2_onehot == 0.0
        && l3_single == 0.5
        && (l3_pair - sigma_m2).abs() <= 1e-6;

    let (alpha, beta) = (syn.config.train.alpha, syn.config.train.beta);
    let mut worst: f64 = 0.0;
    for s in &syn.run.steps {
        let l = &s.losses;
        worst = worst.max((l.l_overall - (l.l1 + alpha * l.l2 + beta * l.l3)).abs());
    }
    pass &= worst <= 1e-9 && !syn.run.steps.is_empty();
    outcome(
        pass,
        format!(
            "L2(uniform4)={l2_uniform:.9} L2(onehot)={l2_onehot} L3(K=1)={l3_single} L3(pair)={l3_pair:.9} \
             decomposition max err {worst:.1e} over {} steps",
            syn.run.steps.len()
        ),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let status = Command::new(env!("CARGO"))
        .args(["test", "-q", "-p", "hetlm", "--test", "gradcheck"])
        .output();
    let elapsed = start.elapsed();
    match status {
        Ok(o) => {
            let text = String::from_utf8_lossy(&o.stdout);
            let summary = text.lines().find(|l| l.starts_with("test result")).unwrap_or("no summary").trim().to_string();
            outcome(
                o.status.success() && elapsed < Duration::from_secs(120),
                format!("{summary} ({:.1}s including build)", elapsed.as_secs_f64()),
            )
        }
        Err(e) => outcome(false, format!("could not run gradcheck: {e}")),
    }
}

fn metric_oracle() -> Outcome {
    let mut rng = SeededRng::new(99);
    let mut mismatches = 0;
    for _ in 0..200 {
        let mut pick = |n: usize, p: f64| -> Vec<String> {
            (0..n).filter(|_| rng.uniform() < p).map(|i| format!("p{i}")).collect()
        };
        let actual: std::collections::BTreeSet<String> = pick(10, 0.4).into_iter().collect();
        let input: std::collections::BTreeSet<String> = pick(10, 0.4).into_iter().collect();
        let mut generated = pick(10, 0.5);
        generated.push("junk".into());
        generated.extend(pick(10, 0.2));
        let m = page_gen_metrics(&generated, |t| t.starts_with('p'), &actual, &input);
        let valid: Vec<&String> = generated.iter().filter(|t| t.starts_with('p')).collect();
        let mut g: Vec<&String> = valid.clone();
        g.sort();
        g.dedup();
        let inter = g.iter().filter(|x| actual.contains(**x)).count();
        let union = g.len() + actual.iter().filter(|a| !g.contains(a)).count();
        let new = g.iter().filter(|x| !input.contains(**x)).count();
        let q = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let expect = [
            if inter > 0 { 1.0 } else { 0.0 },
            q(inter, actual.len()),
            q(inter, g.len()),
            q(inter, union),
            q(valid.len(), generated.len()),
            q(new, g.len()),
        ];
        if [m.hr, m.ioa, m.iop, m.iou, m.val_p, m.new_p] != expect {
            mismatches += 1;
        }
    }
    let flags: Vec<(bool, bool)> = (0..200).map(|_| (rng.uniform() < 0.4, rng.uniform() < 0.3)).collect();
    let c = Confusion::from_flags(flags.iter().copied());
    let tp = flags.iter().filter(|f| f.0 && f.1).count() as f64;
    let tn = flags.iter().filter(|f| !f.0 && !f.1).count() as f64;
    let pp = flags.iter().filter(|f| f.0).count() as f64;
    let ap = flags.iter().filter(|f| f.1).count() as f64;
    let (p, r) = (tp / pp, tp / ap);
    let outcome_ok = c.accuracy() == (tp + tn) / 200.0
        && c.precision() == p
        && c.recall() == r
        && c.f1() == 2.0 * p * r / (p + r);
    outcome(
        mismatches == 0 && outcome_ok,
        format!("{mismatches}/200 page-gen mismatches, confusion recount match {outcome_ok}"),
    )
}

const OPT_27B: [f64; 20] = [
    0.813, 0.424, 0.417, 0.31, 0.183, 0.035, 0.74, 0.869, 0.917, 0.55, 0.402, 0.551, 0.532, 0.255, 0.533, 0.542,
    0.152, 0.121, 0.119, 0.109,
];
const OPT_HETLM_59: [f64; 20] = [
    0.816, 0.385, 0.407, 0.284, 0.197, 0.044, 0.741, 0.869, 0.918, 0.51, 0.371, 0.508, 0.537, 0.245, 0.537, 0.522,
    0.15, 0.103, 0.107, 0.092,
];
const OPT_HETLM_21: [f64; 20] = [
    0.796, 0.367, 0.397, 0.265, 0.156, 0.036, 0.74, 0.849, 0.906, 0.501, 0.397, 0.50, 0.535, 0.216, 0.536, 0.518,
    0.162, 0.101, 0.103, 0.082,
];
const OPT_KMEANS_6: [f64; 20] = [
    0.761, 0.304, 0.275, 0.18, 0.186, 0.038, 0.665, 0.799, 0.861, 0.467, 0.4, 0.466, 0.41, 0.159, 0.411, 0.437,
    0.182, 0.077, 0.074, 0.048,
];
const QWEN_7B: [f64; 20] = [
    0.699, 0.253, 0.265, 0.156, 0.136, 0.044, 0.674, 0.877, 0.916, 0.394, 0.147, 0.394, 0.411, 0.153, 0.411, 0.403,
    0.211, 0.064, 0.067, 0.036,
];
const QWEN_HETLM: [f64; 20] = [
    0.803, 0.434, 0.417, 0.314, 0.189, 0.036, 0.74, 0.881, 0.923, 0.58, 0.446, 0.579, 0.531, 0.296, 0.531, 0.554,
    0.158, 0.129, 0.117, 0.111,
];

fn composite_reproduction() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let score = |c: &[f64; 20], b: &[f64; 20], rule| composite(&metric_row(c), &metric_row(b), rule).unwrap();
    let opt = score(&OPT_HETLM_59, &OPT_27B, WinRule::TiesCount);
    let qwen = score(&QWEN_HETLM, &QWEN_7B, WinRule::TiesCount);
    let strict = score(&OPT_HETLM_59, &OPT_27B, WinRule::Strict);
    let pass = close(opt.pagegen_var_composite, 1.0)
        && close(opt.outcome_composite, 0.5)
        && close(opt.pagegen_mean_composite, 0.5)
        && close(opt.overall_composite, 0.6)
        && close(qwen.overall_composite, 0.8);
    let mut detail = format!(
        "ties count: OPT-350M HeTLM(5,9) var {:.3} outcome {:.3} pagegen {:.3} overall {:.3}; QWEN overall {:.3}; \
         strict wins give OPT outcome {:.3} overall {:.3}",
        opt.pagegen_var_composite,
        opt.outcome_composite,
        opt.pagegen_mean_composite,
        opt.overall_composite,
        qwen.overall_composite,
        strict.outcome_composite,
        strict.overall_composite
    );
    for (name, row) in [("HeTLM(2,1)", &OPT_HETLM_21), ("Kmeans K=6", &OPT_KMEANS_6)] {
        let s = score(row, &OPT_27B, WinRule::TiesCount);
        detail.push_str(&format!(
            "; {name} outcome {:.3} pagegen {:.3} var {:.3} overall {:.3}",
            s.outcome_composite, s.pagegen_mean_composite, s.pagegen_var_composite, s.overall_composite
        ));
    }
    outcome(pass, detail)
}

fn report(model: &ClusterModel, test: &SessionDataset) -> MetricsReport {
    evaluate(model, test, &EvalOptions::default()).unwrap().combined
}

fn synthetic_run(syn: &Synthetic) -> Outcome {
    let run = &syn.run;
    let k = run.state.effective_k();
    let assignment = run.assignments(&syn.train).unwrap();
    let ari = adjusted_rand_index(&syn.labels, &assignment);
    let nll_single = syn.single.combined_nll(&syn.test, 1).unwrap();
    let nll_hetlm = run.model.combined_nll(&syn.test, 1).unwrap();
    let ratio = nll_hetlm / nll_single;
    let var_single = report(&syn.single, &syn.test).variance.unwrap();
    let var_hetlm = report(&run.model, &syn.test).variance.unwrap();
    let examples = run.model.examples(&syn.test).unwrap();
    let routes = run.model.route(&syn.test).unwrap();
    let kl_learned = kl_diagnostic(&run.model, &examples, &routes, 1).unwrap();
    let kl_random = kl_diagnostic(&run.model, &examples, &random_assignment(&routes, syn.seed), 1).unwrap();

    let checks = [
        k <= 4,
        ari >= 0.8,
        ratio <= 0.95,
        var_hetlm.ioa <= var_single.ioa && var_hetlm.iou <= var_single.iou,
        kl_learned < kl_random,
    ];
    let marks: Vec<&str> = checks.iter().map(|&c| if c { "ok" } else { "FAIL" }).collect();
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "vocab {} train {} test {}; (a) effective K {k} [{}] (b) ARI {ari:.3} [{}] (c) NLL {nll_hetlm:.4} vs single \
             {nll_single:.4} ratio {ratio:.3} [{}] (d) Var-IoA {:.4} vs {:.4}, Var-IoU {:.4} vs {:.4} [{}] (e) KL {kl_learned:.4} \
             vs random {kl_random:.4} [{}]",
            syn.vocab.size(),
            syn.train.len(),
            syn.test.len(),
            marks[0],
            marks[1],
            marks[2],
            var_hetlm.ioa,
            var_single.ioa,
            var_hetlm.iou,
            var_single.iou,
            marks[3],
            marks[4]
        ),
    )
}

fn degenerate_k() -> Outcome {
    let start = Instant::now();
    let seed = 21;
    let out = PopulationSpec::disjoint(3, 20, 40, 4).synthesize(4).unwrap();
    let train = SessionDataset::new(out.dataset.records, SplitTag::Train);
    let vocab = Vocabulary::build(&train).unwrap();
    let pcfg = PredictorConfig {
        max_seq_len: 128,
        ..Default::default()
    };
    let data = TrainData {
        vocab: &vocab,
        encoder: EncoderConfig::default(),
        train: &train,
        validation: None,
    };
    let init = Predictor::new(pcfg, vocab.size(), &SeededRng::new(seed)).unwrap();
    let mut cfg = RunConfig::desk_scale().train;
    cfg.k_init = 1;
    cfg.epochs = 2;
    let run = train_hetlm(&init, &data, &cfg, seed, 1, None).unwrap();
    let ft_cfg = FinetuneConfig {
        lr: cfg.predictor_lr,
        weight_decay: cfg.predictor_weight_decay,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
    };
    let examples = run.model.examples(&train).unwrap();
    let plain = finetune(&init, &examples, &ft_cfg, seed).unwrap();

    let same_len = run.steps.len() == plain.step_losses.len();
    let trace_err = run
        .steps
        .iter()
        .zip(&plain.step_losses)
        .map(|(s, &p)| (s.critic_loss - p).abs())
        .fold(0.0, f64::max);
    let mut param_err: f64 = 0.0;
    for (name, t) in plain.predictor.params.iter() {
        let other = run.model.predictors[0].params.get(name).unwrap();
        for (a, b) in t.data().iter().zip(other.data()) {
            param_err = param_err.max((a - b).abs() as f64);
        }
    }
    let l2_zero = run.steps.iter().all(|s| s.losses.l2 == 0.0);
    let l3_half = run.steps.iter().all(|s| s.losses.l3 == 0.5);
    let elapsed = start.elapsed();
    outcome(
        same_len && trace_err <= 1e-5 && param_err <= 1e-5 && l2_zero && l3_half && elapsed < Duration::from_secs(300),
        format!(
            "{} steps (plain {}), max loss diff {trace_err:.1e}, max param diff {param_err:.1e}, L2 all 0: {l2_zero}, \
             L3 all 0.5: {l3_half}, {:.1}s",
            run.steps.len(),
            plain.step_losses.len(),
            elapsed.as_secs_f64()
        ),
    )
}

const TINY: &str = r#"
schema_version = 1
seed = 5
[synth]
users_per_group = 25
[corpus]
test_fraction = 0.2
[pretrain]
lr = 3e-3
epochs = 1
grad_accum = 1
[train]
epochs = 1
selector_lr = 1e-2
predictor_lr = 1e-4
[finetune]
lr = 1e-4
epochs = 1
"#;

fn files(dir: &Path, prefix: &Path, into: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            files(&path, prefix, into);
        } else {
            let key = path.strip_prefix(prefix).unwrap().to_string_lossy().into_owned();
            into.insert(key, std::fs::read(&path).unwrap());
        }
    }
}

fn pipeline(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    let mut log = String::from("user_id,session_id,timestamp,page\n");
    for u in 0..12 {
        for s in 0..3 {
            for p in 0..4 {
                log.push_str(&format!("u{u},s{u}_{s},{},page{}\n", s * 100 + p, (u * 7 + s * 3 + p) % 9));
            }
        }
    }
    std::fs::write(dir.join("log.csv"), log).unwrap();
    let steps: &[&[&str]] = &[
        &["ingest", "--log", "log.csv", "--out", "out/ingest"],
        &["synth", "--out", "out/data"],
        &["pretrain", "--data", "out/data", "--out", "out/pre"],
        &["kmeans-train", "--data", "out/data", "--pretrained", "out/pre", "--k", "3", "--out", "out/km"],
        &["hetlm-train", "--data", "out/data", "--pretrained", "out/pre", "--k-init", "3", "--out", "out/het"],
        &["generate", "--model", "out/het/model", "--data", "out/data", "--out", "out/gen"],
        &["evaluate", "--model", "out/het/model", "--data", "out/data", "--kl", "--out", "out/ev"],
        &["evaluate", "--model", "out/km/model", "--data", "out/data", "--format", "csv", "--out", "out/evcsv"],
        &["evaluate", "--model", "out/pre/model", "--data", "out/data", "--format", "svg", "--out", "out/evsvg"],
        &["evaluate", "--model", "out/pre/model", "--data", "out/data", "--out", "out/evpre"],
        &["compare", "--candidate", "out/ev/report.json", "--baseline", "out/evpre/report.json", "--out", "out/cmp"],
        &["report", "--input", "out/ev/report.json", "--format", "csv", "--out", "out/rep"],
    ];
    for args in steps {
        let o = Command::new(env!("CARGO_BIN_EXE_hetlm"))
            .current_dir(dir)
            .args(*args)
            .args(["--config", "tiny.toml"])
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&o.stderr)));
        }
    }
    let mut all = BTreeMap::new();
    files(&dir.join("out"), &dir.join("out"), &mut all);
    Ok(all)
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (pipeline(a.path()), pipeline(b.path())) {
        (Ok(x), Ok(y)) => {
            let differing: Vec<&String> = x.keys().filter(|k| x.get(*k) != y.get(*k)).collect();
            let same_set = x.keys().eq(y.keys());
            outcome(
                differing.is_empty() && same_set,
                format!("{} output files compared, differing: {differing:?}", x.len()),
            )
        }
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn kmeans_check(syn: &Synthetic) -> Outcome {
    let data = TrainData {
        vocab: &syn.vocab,
        encoder: syn.config.encoder,
        train: &syn.train,
        validation: None,
    };
    let base = kmeans_baseline(&syn.single.predictors[0], &data, 3, &syn.config.finetune, syn.seed, 1).unwrap();
    let ari = adjusted_rand_index(&syn.labels, &base.kmeans.labels);
    let nll = base.model.combined_nll(&syn.test, 1).unwrap();
    let single = syn.single.combined_nll(&syn.test, 1).unwrap();
    outcome(
        ari >= 0.9 && nll <= single,
        format!("K=3 ARI {ari:.3}, per-cluster NLL {nll:.4} vs single {single:.4}"),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; none apply.
    let start = Instant::now();
    let syn = synthetic();
    eprintln!("synthetic setup done in {:.1}s", start.elapsed().as_secs_f64());
    let results: Vec<(&str, Outcome)> = vec![
        ("loss analytics", loss_analytics(&syn)),
        ("finite-difference gradients", gradient_checks()),
        ("metric oracle", metric_oracle()),
        ("composite reproduction", composite_reproduction()),
        ("synthetic run", synthetic_run(&syn)),
        ("degenerate K", degenerate_k()),
        ("determinism", determinism()),
        ("k-means baseline", kmeans_check(&syn)),
    ];
    let mut failed = 0;
    for (i, (name, o)) in results.iter().enumerate() {
        println!("criterion {} {name}: {} ({})", i + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("{}/{} criteria passed in {:.1}s", results.len() - failed, results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
