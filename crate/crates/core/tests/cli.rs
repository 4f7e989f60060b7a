use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
[synth]
grid_dims = [10, 10]
seed = 3

[fit]
max_iters = 20
eval_every = 5
batch_size = 100
inducing_count = 16
flow_depth = 2
eval_mc_samples = 16
predict_mc_samples = 32
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Sandbox { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_geocausal"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(self.path("run.toml"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stderr).into_owned()
    }
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let (h, rows) = read_csv(path);
    let c = h.iter().position(|x| x == name).unwrap();
    rows.into_iter().map(|r| r[c].clone()).collect()
}

#[test]
fn synth_is_deterministic() {
    let a = Sandbox::new(CONFIG);
    let b = Sandbox::new(CONFIG);
    a.ok(&["synth"]);
    b.ok(&["synth"]);
    for f in ["grid.csv", "truth.csv"] {
        assert_eq!(fs::read(a.path(f)).unwrap(), fs::read(b.path(f)).unwrap(), "{f}");
    }
    let c = Sandbox::new(CONFIG);
    c.ok(&["--seed", "4", "synth"]);
    assert_ne!(fs::read(a.path("grid.csv")).unwrap(), fs::read(c.path("grid.csv")).unwrap());
}

#[test]
fn pipeline_writes_every_artifact() {
    let s = Sandbox::new(CONFIG);
    s.ok(&["synth"]);
    let grid_before = fs::read(s.path("grid.csv")).unwrap();
    s.ok(&["fit"]);
    s.ok(&["predict"]);
    s.ok(&["eval"]);
    assert_eq!(fs::read(s.path("grid.csv")).unwrap(), grid_before);

    let (h, rows) = read_csv(&s.path("fit_log.csv"));
    assert_eq!(h, ["iter", "elbo", "obs", "latent", "entropy", "kl", "clamp_count", "seconds"]);
    assert!(!rows.is_empty());

    let (h, rows) = read_csv(&s.path("posterior.csv"));
    assert_eq!(&h[..6], ["id", "lon", "lat", "q_ls", "q_lf", "q_bd"]);
    assert_eq!(h.len(), 13);
    assert_eq!(rows.len(), 100);
    for r in &rows {
        for v in &r[3..6] {
            let q: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&q));
        }
    }

    let (h, rows) = read_csv(&s.path("metrics.csv"));
    assert_eq!(h, ["hazard", "auc", "f1", "threshold", "n_pos", "n_neg"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["ls", "lf", "bd"]);
    assert!(s.path("metrics_roc_bd.csv").exists());
    assert!(!s.dir.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().contains(".tmp")));
}

#[test]
fn predict_is_deterministic() {
    let s = Sandbox::new(CONFIG);
    s.ok(&["synth"]);
    s.ok(&["fit"]);
    s.ok(&["predict", "--out", "a.csv"]);
    s.ok(&["predict", "--out", "b.csv", "--threads", "1"]);
    assert_eq!(fs::read(s.path("a.csv")).unwrap(), fs::read(s.path("b.csv")).unwrap());
}

#[test]
fn zero_iterations_predict_the_priors() {
    let s = Sandbox::new(&CONFIG.replace("max_iters = 20", "max_iters = 0"));
    s.ok(&["synth"]);
    s.ok(&["fit"]);
    s.ok(&["predict"]);
    let post = s.path("posterior.csv");
    let grid = s.path("grid.csv");
    assert_eq!(column(&post, "q_ls"), column(&grid, "prior_ls"));
    assert_eq!(column(&post, "q_lf"), column(&grid, "prior_lf"));
    for (q, b) in column(&post, "q_bd").iter().zip(column(&grid, "has_building")) {
        assert_eq!(q, if b == "1" { "0.5" } else { "0" });
    }
}

#[test]
fn missing_output_directory_is_an_io_error() {
    let s = Sandbox::new(CONFIG);
    let out = s.run(&["synth", "--grid-out", "no/such/dir/grid.csv"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no/such/dir"));
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let s = Sandbox::new("[fit]\nmax_itres = 3\n");
    assert_eq!(s.run(&["synth"]).status.code(), Some(2));
}

fn write(path: PathBuf, text: &str) {
    fs::write(path, text).unwrap();
}

const TRUTH: &str = "id,x_ls,x_lf,x_bd\n0,1,0,1\n1,0,0,0\n2,1,0,1\n3,0,0,0\n";

#[test]
fn eval_joins_by_id_regardless_of_row_order() {
    let s = Sandbox::new("");
    write(s.path("truth.csv"), TRUTH);
    write(s.path("a.csv"), "id,q_ls,q_lf,q_bd\n0,0.9,0.1,0.8\n1,0.2,0.3,0.1\n2,0.7,0.2,0.4\n3,0.1,0.5,0.6\n");
    write(s.path("b.csv"), "id,q_ls,q_lf,q_bd\n3,0.1,0.5,0.6\n1,0.2,0.3,0.1\n0,0.9,0.1,0.8\n2,0.7,0.2,0.4\n");
    let err = s.ok(&["eval", "--posterior", "a.csv", "--out", "ma.csv"]);
    s.ok(&["eval", "--posterior", "b.csv", "--out", "mb.csv"]);
    assert_eq!(fs::read(s.path("ma.csv")).unwrap(), fs::read(s.path("mb.csv")).unwrap());

    // no liquefaction positives: AUC is reported as undefined, not an error
    assert!(err.contains("`lf`"));
    let (_, rows) = read_csv(&s.path("ma.csv"));
    assert_eq!(rows[1][1], "");
    assert_eq!(rows[0][1], "1");
    assert!(!s.path("ma_roc_lf.csv").exists());
}

#[test]
fn eval_rejects_unmatched_ids() {
    let s = Sandbox::new("");
    write(s.path("truth.csv"), TRUTH);
    write(s.path("p.csv"), "id,q_ls,q_lf,q_bd\n0,0.9,0.1,0.8\n1,0.2,0.3,0.1\n2,0.7,0.2,0.4\n9,0.1,0.5,0.6\n");
    let out = s.run(&["eval", "--posterior", "p.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!s.path("metrics.csv").exists());
}

#[test]
fn ablation_drops_duplicate_depths_and_accepts_zero() {
    let cfg = CONFIG.replace("grid_dims = [10, 10]", "grid_dims = [8, 8]").replace("max_iters = 20", "max_iters = 5");
    let s = Sandbox::new(&cfg);
    s.ok(&["ablate-k", "--k", "0,1,0"]);
    let (h, rows) = read_csv(&s.path("ablation.csv"));
    assert_eq!(h, ["k", "auc_ls", "auc_lf", "auc_bd", "final_elbo"]);
    assert_eq!(rows.iter().map(|r| r[0].as_str()).collect::<Vec<_>>(), ["0", "1"]);
    assert!(rows.iter().all(|r| r[4].parse::<f64>().unwrap().is_finite()));
}
