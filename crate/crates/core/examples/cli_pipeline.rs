//! Drives the command-line front end in-process: generate a dataset, train
//! briefly, evaluate, tabulate the losses and run the gradient checks.
//! Every step leaves a `manifest.json` in its output directory.
//!
//! cargo run --example cli_pipeline [-- <work dir>]

use std::path::PathBuf;

use coorlandmark::cli::run_from;

fn main() {
    let work = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("coorlandmark-pipeline"));
    let dir = |name: &str| work.join(name).display().to_string();
    let (data, run, eval) = (dir("data"), dir("run"), dir("eval"));
    let (losses, gradcheck) = (dir("losses"), dir("gradcheck"));
    let checkpoint = format!("{run}/checkpoint.ckpt");
    let steps: [Vec<&str>; 5] = [
        vec!["generate", "--num-images", "12", "--out", &data],
        vec!["train", "--data", &data, "--epochs", "2", "--deterministic", "--out", &run],
        vec!["eval", "--checkpoint", &checkpoint, "--data", &data, "--sdr", "2,2.5,3,4", "--out", &eval],
        vec!["compare-losses", "--out", &losses],
        vec!["gradcheck", "--scope", "losses", "--out", &gradcheck],
    ];
    for step in steps {
        println!("$ coorlandmark {}", step.join(" "));
        let code = run_from(std::iter::once("coorlandmark").chain(step.iter().copied()));
        println!("exit code {code}\n");
        if code != 0 {
            std::process::exit(code);
        }
    }
    let manifest = std::fs::read_to_string(work.join("eval").join("manifest.json")).unwrap_or_default();
    println!("eval manifest:\n{manifest}");
}
