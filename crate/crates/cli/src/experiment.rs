//! Batch runs: one subcommand per line of a plain-text file.

use std::path::Path;

use clap::Parser;

use crate::args::{Cli, Command};
use crate::commands::dispatch;
use crate::manifest::RunManifest;
use crate::CliError;

/// Non-empty, non-comment lines, split on whitespace.
pub fn parse_steps(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect()
}

/// Runs every step into `<out-dir>/NN-<name>/`, recording all outputs in `manifest`.
/// Global flags of the outer invocation apply unless a step overrides them.
pub fn run_experiment(outer: &Cli, config: &Path, manifest: &mut RunManifest) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config).map_err(|e| CliError::io(config, e))?;
    let steps = parse_steps(&text);
    let mut parsed = Vec::with_capacity(steps.len());
    for (idx, words) in steps.iter().enumerate() {
        let mut argv = vec![
            "rpe-lab".to_string(),
            format!("--seed={}", outer.seed),
            format!("--threads={}", outer.threads),
            format!("--format={:?}", outer.format).to_lowercase(),
        ];
        argv.extend(words.iter().cloned());
        let mut cli = Cli::try_parse_from(&argv)
            .map_err(|e| CliError::Usage(format!("step {} `{}`: {}", idx + 1, words.join(" "), e.kind())))?;
        if matches!(cli.command, Command::Experiment { .. }) {
            return Err(CliError::Usage(format!("step {}: experiments cannot be nested", idx + 1)));
        }
        cli.out_dir = outer.out_dir.join(format!("{:02}-{}", idx + 1, cli.command.name()));
        parsed.push(cli);
    }
    for cli in &parsed {
        manifest.add_kernels(cli.command.kernels());
        manifest.add_seed(cli.seed);
        eprintln!("== {}", cli.out_dir.display());
        dispatch(cli, &outer.out_dir, manifest)?;
    }
    Ok(())
}
