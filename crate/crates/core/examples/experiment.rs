//! A complete experiment from a TOML config: artifacts, report, figures and a comparison table.

use pgk::harness::config::ExperimentConfig;
use pgk::harness::run::{compare_runs, plot_run, run_experiment, FigureKind};

const CONFIG: &str = r#"
method = "FGSM-PGK"
epochs = 6
batch_size = 50
epsilon = "8/255"
lr_schedule = { kind = "cyclic", max_lr = 0.2 }
nu = 1.0
kappa = 0.95

dataset = { name = "two-moons", train_samples = 400, eval_samples = 200 }
model = { kind = "mlp", hidden = 32 }

[eval]
attacks = ["pgd10"]
final_attacks = ["fgsm", "pgd10", "pgd20"]
sweep_attack = "pgd20"
landscape_samples = 8
landscape_resolution = 7
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = tempfile::tempdir()?;
    let mut dirs = Vec::new();
    for method in ["FGSM-PGK", "FGSM-RS"] {
        let text = CONFIG.replace("FGSM-PGK", method);
        let mut config = ExperimentConfig::from_toml_str(&text)?;
        config.output_dir = root.path().join(method);
        let summary = run_experiment(&config)?;
        let report = summary.report.expect("finished run");
        println!("{method}: collapse {:?} files:", report.collapse_epoch);
        let mut names: Vec<_> = std::fs::read_dir(&summary.dir)?.filter_map(|e| e.ok()).map(|e| e.file_name()).collect();
        names.sort();
        println!("  {}", names.iter().map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>().join(" "));
        dirs.push(summary.dir);
    }
    println!("re-rendered {}", plot_run(&dirs[0], FigureKind::Sweep)?.display());
    let (_, table) = compare_runs(&dirs)?;
    print!("{table}");
    Ok(())
}
