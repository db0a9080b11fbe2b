//! `bbvpe` drives the visual-prompt pipeline stage by stage. Every command
//! reads one TOML run config; command-line flags override individual fields.
//! Exit codes: 0 success, 2 config error, 3 stale upstream artifacts,
//! 4 provider failure, 5 internal error.

use std::path::PathBuf;
use std::process::ExitCode;

use bbvpe_core::metrics::comparison_table;
use bbvpe_core::pipeline::{
    cmd_build_dataset, cmd_collect, cmd_eval, cmd_render, cmd_report, cmd_route, cmd_train,
    ConfigOverrides, EvalFlags, PipelineError, RunConfig,
};
use bbvpe_core::pope::PopeSetup;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bbvpe", version, about = "Select visual prompts that reduce object hallucination")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,

    #[command(flatten)]
    overrides: OverrideArgs,

    #[command(subcommand)]
    command: Command,
}

/// Each flag overrides the matching config field for this invocation. The
/// effective config (after overrides) is what the run manifest digest covers.
#[derive(Args)]
struct OverrideArgs {
    /// Override the run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the annotation file path.
    #[arg(long, value_name = "FILE")]
    annotations: Option<PathBuf>,
    /// Override the image directory.
    #[arg(long, value_name = "DIR")]
    image_dir: Option<PathBuf>,
    /// Override the response cache path.
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,
    /// Override the artifact output directory.
    #[arg(long, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Override the model reference.
    #[arg(long = "model", value_name = "REF")]
    model_ref: Option<String>,
    /// Override the negative-question sampling setup.
    #[arg(long, value_enum)]
    setup: Option<SetupArg>,
    /// Override the number of positive questions per image.
    #[arg(long)]
    n_pos: Option<usize>,
    /// Override the number of negative questions per image.
    #[arg(long)]
    n_neg: Option<usize>,
    /// Override the provider concurrency limit.
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Override the number of training epochs.
    #[arg(long)]
    epochs: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SetupArg {
    Random,
    Popular,
    Adversarial,
}

impl From<SetupArg> for PopeSetup {
    fn from(s: SetupArg) -> Self {
        match s {
            SetupArg::Random => PopeSetup::Random,
            SetupArg::Popular => PopeSetup::Popular,
            SetupArg::Adversarial => PopeSetup::Adversarial,
        }
    }
}

impl OverrideArgs {
    fn to_overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            seed: self.seed,
            annotations: self.annotations.clone(),
            image_dir: self.image_dir.clone(),
            cache: self.cache.clone(),
            output_dir: self.output_dir.clone(),
            model_ref: self.model_ref.clone(),
            setup: self.setup.map(Into::into),
            n_pos: self.n_pos,
            n_neg: self.n_neg,
            max_in_flight: self.max_in_flight,
            epochs: self.epochs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render every visual prompt onto every image.
    Render,
    /// Ask the presence questions for every (image, prompt) pair.
    Collect,
    /// Reduce the collected scores to (image, optimal prompt) pairs.
    BuildDataset,
    /// Train the prompt router on the dataset.
    Train,
    /// Pick a prompt per image with the trained router.
    Route,
    /// Compare selection strategies on the collected scores.
    Eval {
        /// Also compute hallucination rates over generated descriptions.
        #[arg(long)]
        chair: bool,
        /// Also run the eight-description judge protocol per image.
        #[arg(long)]
        judge: bool,
    },
    /// Verify the artifact chain and write a run summary.
    Report,
}

fn print_failures(failures: &[(String, String)]) {
    for (id, reason) in failures {
        eprintln!("warning: image {id}: {reason}");
    }
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = RunConfig::load(&cli.config, &cli.overrides.to_overrides())?;
    match &cli.command {
        Command::Render => {
            let s = cmd_render(&cfg)?;
            print_failures(&s.failures);
            println!("rendered {} file(s), skipped {} unchanged, repaired {}", s.written, s.skipped, s.repaired);
        }
        Command::Collect => {
            let s = cmd_collect(&cfg)?;
            print_failures(&s.failures);
            println!(
                "evaluated {} image(s) ({} complete); {} provider call(s), {} cache hit(s)",
                s.images, s.complete, s.provider_calls, s.cached_hits
            );
        }
        Command::BuildDataset => {
            let m = cmd_build_dataset(&cfg)?;
            let kept: usize = m.label_histogram.values().sum();
            println!(
                "kept {kept} of {} image(s) (ties {}, degenerate {}, incomplete {})",
                m.total_images, m.excluded_tie, m.excluded_degenerate, m.excluded_incomplete
            );
            for (label, count) in &m.label_histogram {
                println!("  {label}: {count}");
            }
        }
        Command::Train => {
            let s = cmd_train(&cfg)?;
            println!(
                "trained on {} example(s) ({} held out) for {} epoch(s); final loss {:.4}{}",
                s.examples,
                s.held_out,
                s.epochs_run,
                s.final_train_loss,
                s.final_val_accuracy
                    .map(|a| format!(", validation accuracy {a:.3}"))
                    .unwrap_or_default()
            );
        }
        Command::Route => {
            let s = cmd_route(&cfg)?;
            println!("routed {} image(s):", s.images);
            for (prompt, count) in &s.histogram {
                println!("  {prompt}: {count}");
            }
        }
        Command::Eval { chair, judge } => {
            let s = cmd_eval(&cfg, &EvalFlags { chair: *chair, judge: *judge })?;
            print!("{}", comparison_table(&s.comparison));
            if let Some(reports) = &s.chair {
                println!("\nhallucination rates (sentence / instance):");
                for (strategy, r) in reports {
                    println!("  {strategy}: {:.4} / {:.4}", r.ch_s, r.ch_i);
                }
            }
            if *judge {
                println!("\njudged {} image(s)", s.judged_images);
            }
            for notice in &s.notices {
                eprintln!("note: {notice}");
            }
        }
        Command::Report => {
            let text = cmd_report(&cfg)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
