use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};

use metasv::eval::{self, DcfParams};
use metasv::experiment::{heldout_trials, run_experiment, score_model};
use metasv::gradcheck::{run_gradcheck, GradcheckConfig};
use metasv::io::write_atomic;
use metasv::synth::generate_corpus;
use metasv::train::{train_stage2, train_system, System, TrainSetup};
use metasv::{Checkpoint, Corpus, RunConfig};

fn dcf_from(config: Option<&Path>) -> Result<DcfParams> {
    Ok(match config {
        Some(p) => RunConfig::load(p)?.eval.dcf,
        None => DcfParams::default(),
    })
}

pub fn gen_corpus(
    config: &Path,
    out: &Path,
    trials: Option<&Path>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = generate_corpus(&cfg.corpus, cfg.seed)?.corpus;
    corpus.write(out)?;
    if let Some(path) = trials {
        let ts = heldout_trials(&corpus, &cfg)?;
        write_atomic(path, eval::trials_to_string(&ts).as_bytes())?;
    }
    println!(
        "wrote {} ({} utterances, {} training + {} held-out speakers)",
        out.display(),
        corpus.utterances.len(),
        corpus.train_speakers,
        corpus.heldout_speakers
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    system: &str,
    config: &Path,
    corpus: &Path,
    out: &Path,
    seed: Option<u64>,
    stage2_only: bool,
    init: Option<&Path>,
) -> Result<ExitCode> {
    let system: System = system.parse()?;
    let cfg = RunConfig::load(config)?;
    let seed = seed.unwrap_or(cfg.experiment.seeds[0]);
    let corpus = Corpus::read(corpus)?;
    let setup = TrainSetup {
        corpus: &corpus,
        network: &cfg.network,
        episode: &cfg.episode,
        train: &cfg.train,
        seed,
    };

    let trained = if stage2_only {
        if system.stage2().is_none() {
            bail!("--stage2-only: system {system} has no second stage");
        }
        let Some(init) = init else {
            bail!("--stage2-only requires --init <stage-1 checkpoint> for system {system}");
        };
        let stage1 = Checkpoint::read(init)
            .with_context(|| format!("reading stage-1 checkpoint {}", init.display()))?;
        if stage1.coeffs.is_some() {
            bail!(
                "{} already carries transformation coefficients",
                init.display()
            );
        }
        train_stage2(&setup, system, &stage1.params)?
    } else {
        if init.is_some() {
            bail!("--init is only used together with --stage2-only");
        }
        train_system(&setup, system)?
    };

    Checkpoint {
        params: trained.params,
        coeffs: trained.coeffs,
    }
    .write(&out.join("checkpoint.bin"))?;
    write_atomic(&out.join("metrics.csv"), trained.report.to_csv().as_bytes())?;
    let last = trained.report.records.last();
    println!(
        "{system} seed {seed}: {} steps, final loss {}",
        trained.report.records.len(),
        last.map_or("n/a".to_string(), |r| format!("{:.6}", r.total))
    );
    Ok(ExitCode::SUCCESS)
}

pub fn eval(
    checkpoint: &Path,
    corpus: &Path,
    trials: &Path,
    out: &Path,
    system: Option<&str>,
    config: Option<&Path>,
) -> Result<ExitCode> {
    let dcf = dcf_from(config)?;
    let ck = Checkpoint::read(checkpoint)?;
    let corpus = Corpus::read(corpus)?;
    let ts = eval::read_trials(trials)?;
    let label = match system {
        Some(s) => s.to_string(),
        None => checkpoint.parent().and_then(|p| p.file_name()).map_or_else(
            || "system".to_string(),
            |n| n.to_string_lossy().into_owned(),
        ),
    };
    let scored = score_model(&corpus, &ts, &ck.params, ck.coeffs.as_ref())?;
    let m = eval::metrics(&label, &scored, &dcf)?;
    write_atomic(
        &out.join("scores.txt"),
        eval::scores_to_string(&scored)?.as_bytes(),
    )?;
    write_atomic(&out.join("metrics.json"), m.to_json().as_bytes())?;
    println!(
        "{label}: EER {:.4}%  minDCF {:.4}",
        100.0 * m.eer,
        m.min_dcf
    );
    Ok(ExitCode::SUCCESS)
}

pub fn fuse(
    scores_a: &Path,
    scores_b: &Path,
    trials: &Path,
    out: &Path,
    config: Option<&Path>,
) -> Result<ExitCode> {
    let dcf = dcf_from(config)?;
    let ts = eval::read_trials(trials)?;
    let a = eval::read_scores(scores_a, &ts)?;
    let b = eval::read_scores(scores_b, &ts)?;
    let fused = eval::fuse_scores(&a, &b)?;
    let m = eval::metrics("fusion", &fused, &dcf)?;
    write_atomic(
        &out.join("scores.txt"),
        eval::scores_to_string(&fused)?.as_bytes(),
    )?;
    write_atomic(&out.join("metrics.json"), m.to_json().as_bytes())?;
    println!("fusion: EER {:.4}%  minDCF {:.4}", 100.0 * m.eer, m.min_dcf);
    Ok(ExitCode::SUCCESS)
}

pub fn experiment(config: &Path, out_dir: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    let out = out_dir.map_or_else(|| cfg.output_dir.clone(), Path::to_path_buf);
    let report = run_experiment(&cfg, &out)?;
    print!("{}", report.report_csv());
    println!();
    print!("{}", report.trends_csv());
    println!("outputs in {}", out.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(seeds: u64) -> Result<ExitCode> {
    let cfg = GradcheckConfig {
        seeds,
        ..GradcheckConfig::default()
    };
    let report = run_gradcheck(&cfg)?;
    println!("{:<20} {:>14}  result", "case", "max rel error");
    for (name, err, ok) in report.by_case() {
        println!(
            "{name:<20} {err:>14.3e}  {}",
            if ok { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{} checks over {seeds} seeds, worst {:.3e} (tolerance {:e})",
        report.cases.len(),
        report.max_rel_error(),
        cfg.tolerance
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}
