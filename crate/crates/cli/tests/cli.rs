use std::fs;
use std::path::Path;
use std::process::Command;

use g2a_cli::config::RunConfig;
use g2a_cli::run::{self, MetricsLine};
use g2a_cli::export;

const TINY_TJ: &str = r#"
name = "tiny-tj"
algorithm = "ga-comm"
seeds = [3, 4]
[env]
kind = "traffic-junction"
difficulty = "easy"
dim = 7
n_max = 4
p_arrive = 0.3
max_steps = 10
[budget]
env_steps = 400
[eval]
interval = 8
episodes = 6
seed = 1
[reinforce]
batch_episodes = 4
[comm]
encoder_hidden = 6
lstm_hidden = 6
head_hidden = 6
[comm.attention]
hard_hidden = 4
key_dim = 4
[[curriculum]]
epoch = 0
n_max = 2
p_arrive = 0.2
[[curriculum]]
epoch = 3
n_max = 4
p_arrive = 0.3
"#;

const TINY_PP: &str = r#"
name = "tiny-pp"
algorithm = "ga-ac"
seeds = [5]
[env]
kind = "predator-prey"
max_steps = 10
[budget]
episodes = 7
[eval]
interval = 3
episodes = 2
seed = 2
[ac]
actor_hidden = 6
critic_hidden = 6
batch_size = 8
update_every = 2
[ac.attention]
hard_hidden = 4
key_dim = 4
"#;

fn lines(path: &Path) -> Vec<MetricsLine> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), cfg.name);
        n += 1;
    }
    assert!(n >= 8);
}

#[test]
fn identical_runs_write_identical_metrics() {
    for text in [TINY_TJ, TINY_PP] {
        let cfg = RunConfig::from_toml(text).unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        run::train(&cfg, a.path()).unwrap();
        run::train(&cfg, b.path()).unwrap();
        let m = |d: &Path| fs::read(run::run_dir(d, &cfg).join("metrics.jsonl")).unwrap();
        assert!(!m(a.path()).is_empty());
        assert_eq!(m(a.path()), m(b.path()), "{}", cfg.name);
        let r = |d: &Path| fs::read(run::run_dir(d, &cfg).join("final_report.json")).unwrap();
        assert_eq!(r(a.path()), r(b.path()));
    }
}

#[test]
fn budget_and_eval_schedule() {
    let cfg = RunConfig::from_toml(TINY_TJ).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run::train(&cfg, dir.path()).unwrap();
    for s in &report.seeds {
        // 4 episodes x 10 steps per update; 400 steps allow 10 updates.
        assert_eq!((s.updates, s.episodes, s.env_steps), (10, 40, 400));
    }
    let ls = lines(&run::run_dir(dir.path(), &cfg).join("metrics.jsonl"));
    let eps: Vec<u64> = ls.iter().filter(|l| l.seed == 3).map(|l| l.episodes).collect();
    assert_eq!(eps, vec![8, 16, 24, 32, 40]);
    assert!(ls.iter().all(|l| l.eval.success_rate.is_some()));
}

#[test]
fn checkpoint_roundtrip_reproduces_final_eval() {
    for text in [TINY_TJ, TINY_PP] {
        let cfg = RunConfig::from_toml(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run::train(&cfg, dir.path()).unwrap();
        for s in &report.seeds {
            let path = run::checkpoint_path(dir.path(), &cfg, s.seed);
            let line = run::eval_checkpoint(&cfg, &path, dir.path()).unwrap();
            assert_eq!(line.seed, s.seed);
            assert_eq!(line.eval, s.final_eval, "{}", cfg.name);
        }
        let last = lines(&run::run_dir(dir.path(), &cfg).join("metrics.jsonl")).pop().unwrap();
        assert_eq!(last.eval, report.seeds.last().unwrap().final_eval);
    }
}

#[test]
fn eval_rejects_other_config() {
    let cfg = RunConfig::from_toml(TINY_PP).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run::train(&cfg, dir.path()).unwrap();
    let other = RunConfig::from_toml(&TINY_PP.replace("seed = 2", "seed = 9")).unwrap();
    let path = run::checkpoint_path(dir.path(), &cfg, 5);
    assert!(run::eval_checkpoint(&other, &path, dir.path()).is_err());
}

#[test]
fn export_attention_writes_graphs() {
    for text in [TINY_TJ, TINY_PP] {
        let cfg = RunConfig::from_toml(text).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run::train(&cfg, dir.path()).unwrap();
        let ck = run::checkpoint_path(dir.path(), &cfg, report.seeds[0].seed);
        let out = dir.path().join("att");
        let summary = export::export_attention(&cfg, &ck, &out, 2, 0).unwrap();
        let graphs: Vec<export::GraphLine> = fs::read_to_string(out.join("graphs.jsonl"))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert!(!graphs.is_empty());
        for g in &graphs {
            g.graph.validate().unwrap();
            assert!(g.positions.len() >= g.graph.n);
        }
        match summary {
            Some(s) => assert_eq!(s.within_pairs + s.cross_pairs, graphs.len() * 20),
            None => assert!(cfg.name.contains("tj")),
        }
    }
}

#[test]
fn binary_trains_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny-pp.toml");
    fs::write(&config, TINY_PP).unwrap();
    let bin = env!("CARGO_BIN_EXE_g2a");
    let root = dir.path().join("runs");
    let status = Command::new(bin).args(["--root", root.to_str().unwrap(), "train", config.to_str().unwrap()]).output().unwrap().status;
    assert!(status.success());
    let ck = root.join("tiny-pp/checkpoints/seed-5.json");
    let out = Command::new(bin)
        .args(["--root", root.to_str().unwrap(), "eval", ck.to_str().unwrap(), config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("tiny-pp/eval/metrics.jsonl").exists());
    let bad = Command::new(bin).args(["train", "/nonexistent.toml"]).output().unwrap().status;
    assert!(!bad.success());
}

#[test]
fn zero_budget_reports_untrained_eval() {
    let cfg = RunConfig::from_toml(&TINY_PP.replace("episodes = 7", "episodes = 0")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run::train(&cfg, dir.path()).unwrap();
    let ls = lines(&run::run_dir(dir.path(), &cfg).join("metrics.jsonl"));
    assert_eq!(ls.len(), 1);
    assert_eq!((ls[0].episodes, ls[0].updates), (0, 0));
    assert_eq!(report.seeds[0].final_eval, ls[0].eval);
}

#[test]
fn report_matches_metrics_rows() {
    let cfg = RunConfig::from_toml(TINY_TJ).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let report = run::train(&cfg, dir.path()).unwrap();
    let ls = lines(&run::run_dir(dir.path(), &cfg).join("metrics.jsonl"));
    let finals: Vec<f64> = cfg
        .seeds
        .iter()
        .map(|&s| ls.iter().rfind(|l| l.seed == s).unwrap().eval.success_rate.unwrap())
        .collect();
    let stat = run::Stat::of(&finals);
    assert_eq!(report.eval_success_rate.clone().unwrap(), stat);
    let on_disk: run::FinalReport =
        serde_json::from_str(&fs::read_to_string(run::run_dir(dir.path(), &cfg).join("final_report.json")).unwrap()).unwrap();
    assert_eq!(on_disk, report);
    for seed in &cfg.seeds {
        let steps: Vec<u64> = ls.iter().filter(|l| l.seed == *seed).map(|l| l.env_steps).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let cfg = RunConfig::from_toml(TINY_PP).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run::train(&cfg, dir.path()).unwrap();
    let path = run::checkpoint_path(dir.path(), &cfg, 5);
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    let params = v["params"].as_object_mut().unwrap().values_mut().next().unwrap();
    let x = params["values"][0].as_f64().unwrap();
    params["values"][0] = serde_json::json!(x + 1e-3);
    fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    let err = run::eval_checkpoint(&cfg, &path, dir.path()).unwrap_err();
    assert!(format!("{err:#}").contains("checksum"), "{err:#}");
}
