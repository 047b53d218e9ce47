//! Runs the `trajid` binary twice per command into separate directories and
//! compares every output byte for byte. `timing.json` holds wall-clock
//! seconds and is the only file left out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

/// A small but complete configuration: short logs and few epochs.
pub const SMALL_CONFIG: &str = r#"
seed = 5

[dataset]
train_duration = 2.0
test_duration = 1.0

[optimizer]
max_epochs = 15

[segmentation]
minibatch_size = 200

[es]
max_generations = 4

[oracle]
max_epochs = 15

[bench.supervised]
epochs = 5

[stand]
duty_levels = 6
load_levels = 3
"#;

pub fn trajid(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_trajid")).args(args).current_dir(cwd).output().expect("trajid runs")
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if path.is_file() && name != "timing.json" {
            out.insert(name, std::fs::read(&path).unwrap());
        }
    }
    out
}

/// One command line per subcommand; `{data}` is the generated dataset.
pub fn commands() -> Vec<Vec<&'static str>> {
    vec![
        vec!["identify", "--data", "{data}", "--model", "trajid-param"],
        vec!["identify", "--data", "{data}", "--model", "trajid-nn"],
        vec!["evaluate", "--data", "{data}", "--fit", "all", "--hidden"],
        vec!["ablate", "w-sweep", "--data", "{data}", "--models", "trajid-param,torque-oracle", "--alphas", "0,1"],
        vec!["ablate", "horizon", "--data", "{data}", "--models", "trajid-param", "--horizons", "1,3"],
        vec!["ablate", "stability", "--data", "{data}", "--models", "trajid-param", "--runs", "3", "--epochs", "10"],
    ]
}

/// Runs every command twice and returns a description of each difference,
/// or of each failed run.
pub fn determinism_failures(root: &Path) -> (usize, Vec<String>) {
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL_CONFIG).unwrap();
    let cfg = config.to_str().unwrap();
    let mut problems = Vec::new();
    let mut compared = 0;

    let run_twice = |label: &str, args: &[&str], problems: &mut Vec<String>| -> Option<(PathBuf, usize)> {
        let mut outputs = Vec::new();
        for k in 0..2 {
            // Same output path both times: the resolved config records it.
            let out = root.join(label);
            let mut full: Vec<&str> = args.to_vec();
            let out_str = out.to_str().unwrap().to_string();
            full.extend(["--config", cfg, "--workers", "1", "--out"]);
            let full: Vec<String> = full.iter().map(|s| s.to_string()).chain([out_str]).collect();
            let refs: Vec<&str> = full.iter().map(String::as_str).collect();
            let res = trajid(&refs, root);
            if !res.status.success() {
                problems.push(format!("{label} run {k} failed: {}", String::from_utf8_lossy(&res.stderr)));
                return None;
            }
            outputs.push(files(&out));
            std::fs::rename(&out, root.join(format!("{label}-{k}"))).unwrap();
        }
        let (a, b) = (&outputs[0], &outputs[1]);
        if a.keys().ne(b.keys()) {
            problems.push(format!("{label}: different file sets {:?} vs {:?}", a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>()));
        }
        for (name, bytes) in a {
            if b.get(name) != Some(bytes) {
                problems.push(format!("{label}: {name} differs between runs"));
            }
        }
        Some((root.join(format!("{label}-0")), a.len()))
    };

    let Some((data, n)) = run_twice("generate", &["generate"], &mut problems) else {
        return (0, problems);
    };
    compared += n;
    let data = data.to_str().unwrap().to_string();
    for (k, cmd) in commands().into_iter().enumerate() {
        let args: Vec<&str> = cmd.iter().map(|a| if *a == "{data}" { data.as_str() } else { a }).collect();
        let label = format!("{}-{k}", cmd[0]);
        if let Some((_, n)) = run_twice(&label, &args, &mut problems) {
            compared += n;
        }
    }
    (compared, problems)
}
