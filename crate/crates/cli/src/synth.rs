//! `synth`: generate a power stream with planted regimes and tail shapes.

use evtgan::checkpoint::save_json;
use evtgan::data::{GroundTruth, SynthConfig, generate_synthetic, write_csv};
use evtgan::series::SampleSeries;

use crate::SynthArgs;
use crate::config::{self, SynthRun};
use crate::errors::{CliResult, with_path};

pub fn run(args: SynthArgs) -> CliResult<()> {
    let mut run: SynthRun = config::parse_file(args.config.as_deref())?;
    config::claim_command(&mut run.command, "synth")?;
    let out = config::merge_out(run.out.take(), args.out);

    let mut synth: SynthConfig = run.synth.take().unwrap_or_else(config::default_synth);
    if let Some(seed) = args.seed {
        synth.seed = seed;
    }

    let resolved = SynthRun {
        command: run.command,
        out: Some(out.clone()),
        synth: Some(synth.clone()),
    };
    config::write_snapshot(&out, &resolved)?;

    let (series, truth) = if synth.segments.is_empty() {
        // A zero-sample request is still a valid run: emit the header-only
        // dataset and an empty ground truth so downstream tooling sees the
        // usual schema.
        let mut series = SampleSeries::new(Vec::new(), synth.sample_period_s)?;
        series.set_regimes(Vec::new())?;
        let truth = GroundTruth {
            regimes: synth.regimes.clone(),
            segments: Vec::new(),
            rho: synth.rho,
            seed: synth.seed,
        };
        (series, truth)
    } else {
        generate_synthetic(&synth)?
    };

    let data_path = out.join("dataset.csv");
    with_path(write_csv(&data_path, &series), &data_path)?;
    let truth_path = out.join("ground_truth.json");
    with_path(save_json(&truth_path, &truth), &truth_path)?;

    log::info!(
        "wrote {} samples across {} segments to {}",
        series.len(),
        truth.segments.len(),
        data_path.display()
    );
    Ok(())
}
