//! Command-line front end for the tied multi-depth Transformer experiments.

pub mod settings;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tiedmulti::checkpoint::{load_model, load_selector, save_model, save_selector};
use tiedmulti::data::{generate_toy_corpus, read_corpus, write_corpus, Pair};
use tiedmulti::decode::{decode_corpus_timed, read_decode_log, total_seconds, write_decode_log, DecodeMode, LoggedDecode};
use tiedmulti::harness::{
    cost_benefit_from_logs, distribution_csv, distribution_text, oracle_from_grids, oracle_from_logs,
    report_model_sizes, run_cost_benefit, run_distillation_pipeline, select_and_decode, sizes_csv, sizes_text, ChildKind,
    OracleRun,
};
use tiedmulti::metrics::{corpus_bleu, read_grid_file, sentence_chrf, write_grid_file, CHRF_BETA, CHRF_ORDER};
use tiedmulti::model::{average_checkpoints, ModelConfig, Parameters};
use tiedmulti::selector::{
    build_selector_dataset, read_selector_dataset, train_selector, train_selector_grid, write_selector_dataset,
    SelectorParams,
};
use tiedmulti::train::{train, ModelKind};
use tiedmulti::vocab::Vocab;
use tiedmulti::LayerCombination;

pub use settings::Settings;

#[derive(Debug, Parser)]
#[command(name = "tiedmulti", version, about = "Train and evaluate tied multi-depth Transformer models on toy tasks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Settings file of `key=value` lines.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed for data, initialisation and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long = "enc-layers", global = true)]
    pub enc_layers: Option<usize>,
    #[arg(long = "dec-layers", global = true)]
    pub dec_layers: Option<usize>,
    /// Layer combination `n,m` to decode with.
    #[arg(long, global = true)]
    pub combo: Option<LayerCombination>,
    /// Beam width.
    #[arg(long, global = true)]
    pub beam: Option<usize>,
    /// Length-penalty exponent.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true, value_parser = ["greedy", "beam"])]
    pub mode: Option<String>,
    /// Share one layer across each stack.
    #[arg(long, global = true)]
    pub rs: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ChildArg {
    Tied,
    TiedRs,
    Both,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a toy corpus as train.tsv and test.tsv.
    GenData,
    /// Train a model on a tab-separated corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode the sources of a corpus at one layer combination.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode at one layer combination and score against the references.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Decode at every layer combination and tabulate BLEU and time.
    CostBenefit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-sentence chrF grids and oracle combinations from a decode log.
    Oracle {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Label each sentence with its best layer combinations.
    BuildSelectorData {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the layer-combination selector.
    TrainSelector {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Decode each sentence at the combination the selector picks.
    SelectDecode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        selector: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train children on the original corpus and on the parent's translations.
    Distill {
        /// Parent checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Training corpus.
        #[arg(long)]
        data: PathBuf,
        /// Test corpus.
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        child: ChildArg,
        /// Only train on the original corpus.
        #[arg(long)]
        no_distill: bool,
    },
    /// Parameter counts of the configured model and its per-combination sums.
    Sizes {
        /// Use the transformer-base configuration with a 32k vocabulary.
        #[arg(long)]
        paper: bool,
    },
    /// Timing-free reports rebuilt from a decode log.
    Report {
        #[arg(long)]
        logs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Grid file from `oracle`; recomputed from the log when absent.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

/// Settings after applying the file and then the flags.
pub fn resolve_settings(g: &GlobalArgs) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &g.config {
        s.apply_file(path)?;
    }
    if let Some(seed) = g.seed {
        s.set_seed(seed);
    }
    if let Some(n) = g.enc_layers {
        s.model.enc_layers = n;
    }
    if let Some(m) = g.dec_layers {
        s.model.dec_layers = m;
    }
    if let Some(b) = g.beam {
        s.beam.beam = b;
    }
    if let Some(a) = g.alpha {
        s.beam.alpha = a;
    }
    if let Some(mode) = &g.mode {
        s.mode = mode.parse()?;
    }
    if g.rs {
        s.model.recurrent_stacking = true;
    }
    s.validate()?;
    Ok(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn load_corpus(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    read_corpus(open(path)?, vocab).with_context(|| format!("reading {}", path.display()))
}

/// Reference column of a corpus file, whitespace-normalised.
pub fn read_references(path: &Path) -> Result<Vec<String>> {
    let mut refs = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (_, tgt) = line.split_once('\t').with_context(|| format!("{}: line {} has no tab", path.display(), i + 1))?;
        refs.push(tgt.split_whitespace().collect::<Vec<_>>().join(" "));
    }
    Ok(refs)
}

fn load_logs(path: &Path) -> Result<Vec<LoggedDecode>> {
    read_decode_log(open(path)?).with_context(|| format!("reading {}", path.display()))
}

/// Grid extent covered by a decode log.
fn log_extent(logs: &[LoggedDecode]) -> Result<(usize, usize)> {
    let n = logs.iter().map(|l| l.combination.n).max();
    let m = logs.iter().map(|l| l.combination.m).max();
    match (n, m) {
        (Some(n), Some(m)) => Ok((n, m)),
        _ => bail!("decode log is empty"),
    }
}

fn log_mode(logs: &[LoggedDecode]) -> DecodeMode {
    logs.first().map_or(DecodeMode::Greedy, |l| l.mode)
}

fn model_vocab(params: &Parameters) -> Result<Vocab> {
    Ok(Vocab::toy(params.config().vocab)?)
}

fn file_label(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn kind_name(kind: ModelKind, cfg: &ModelConfig) -> String {
    let base = match kind {
        ModelKind::Vanilla => "vanilla",
        ModelKind::TiedMulti => "tied-multi",
    };
    if cfg.recurrent_stacking {
        format!("{base}-rs")
    } else {
        base.to_string()
    }
}

pub fn oracle_text(run: &OracleRun) -> String {
    let mut s = distribution_text(&run.histogram(), run.enc_layers, run.dec_layers);
    if !run.skipped.is_empty() {
        s.push_str(&format!("skipped {} sentences with failed decodes\n", run.skipped.len()));
    }
    s
}

/// Exit status for usage errors: bad flags, settings or combinations.
pub const EXIT_USAGE: i32 = 1;
/// Exit status for failures while a command runs.
pub const EXIT_RUNTIME: i32 = 2;

/// Runs one parsed invocation and returns its exit status, reporting errors
/// on `stderr`.
pub fn execute(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let settings = match resolve_settings(&cli.global) {
        Ok(s) => s,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            return EXIT_USAGE;
        }
    };
    match run(cli, &settings, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn run(cli: &Cli, s: &Settings, stdout: &mut dyn Write) -> Result<()> {
    let out = &cli.global.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let combo_or = |cfg: &ModelConfig| cli.global.combo.unwrap_or(cfg.deepest());
    match &cli.command {
        Command::GenData => {
            let corpus = generate_toy_corpus(&s.task)?;
            let vocab = s.task.vocabulary()?;
            for (name, pairs) in [("train.tsv", &corpus.train), ("test.tsv", &corpus.test)] {
                let mut w = create(&out.join(name))?;
                write_corpus(pairs, &vocab, &mut w)?;
                w.flush()?;
            }
            writeln!(stdout, "task={} train={} test={}", s.task.task, corpus.train.len(), corpus.test.len())?;
        }
        Command::Train { data } => {
            let vocab = Vocab::toy(s.model.vocab)?;
            let corpus = load_corpus(data, &vocab)?;
            let mut log = create(&out.join("train.log"))?;
            let start = Instant::now();
            let result = train(s.kind, &corpus, &s.training, &s.model, &mut log);
            log.flush()?;
            let result = result?;
            let ckpt_dir = out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            for c in &result.checkpoints {
                save_model(&c.params, ckpt_dir.join(format!("step-{:06}.ckpt", c.step)))?;
            }
            let chosen = if s.average {
                let kept: Vec<Parameters> = result.checkpoints.iter().map(|c| c.params.clone()).collect();
                average_checkpoints(&kept)?
            } else {
                result.final_params
            };
            save_model(&chosen, out.join("model.ckpt"))?;
            writeln!(
                stdout,
                "steps={} final_loss={:.6} averaged={} seconds={:.1}",
                s.training.steps,
                result.final_loss,
                if s.average { result.checkpoints.len() } else { 0 },
                start.elapsed().as_secs_f64()
            )?;
        }
        Command::Decode { model, data } => {
            let params = load_model(model)?;
            let vocab = model_vocab(&params)?;
            let corpus = load_corpus(data, &vocab)?;
            let combo = combo_or(params.config());
            let sources: Vec<Vec<usize>> = corpus.into_iter().map(|(src, _)| src).collect();
            let records = decode_corpus_timed(&params, combo, &sources, s.mode, &s.beam);
            let mut log = create(&out.join("decode.log"))?;
            write_decode_log(&records, &vocab, &mut log)?;
            log.flush()?;
            let mut hyp = create(&out.join("hyp.txt"))?;
            for r in &records {
                writeln!(hyp, "{}", vocab.decode(&r.tokens))?;
            }
            hyp.flush()?;
            let failures = records.iter().filter(|r| r.error.is_some()).count();
            writeln!(stdout, "combo={combo} sentences={} failures={failures} seconds={:.3}", records.len(), total_seconds(&records))?;
        }
        Command::Evaluate { model, data } => {
            let params = load_model(model)?;
            let vocab = model_vocab(&params)?;
            let corpus = load_corpus(data, &vocab)?;
            let combo = combo_or(params.config());
            let sources: Vec<Vec<usize>> = corpus.iter().map(|(src, _)| src.clone()).collect();
            let records = decode_corpus_timed(&params, combo, &sources, s.mode, &s.beam);
            let hyps: Vec<String> = records.iter().map(|r| vocab.decode(&r.tokens)).collect();
            let refs: Vec<String> = corpus.iter().map(|(_, t)| vocab.decode(t)).collect();
            let bleu = corpus_bleu(&hyps, &refs)?;
            let chrf = hyps.iter().zip(&refs).map(|(h, r)| sentence_chrf(h, r, CHRF_ORDER, CHRF_BETA)).sum::<f64>()
                / refs.len().max(1) as f64;
            writeln!(stdout, "combo={combo} mode={} bleu={bleu:.2} chrf={chrf:.4}", s.mode)?;
        }
        Command::CostBenefit { model, data } => {
            let params = load_model(model)?;
            let vocab = model_vocab(&params)?;
            let test = load_corpus(data, &vocab)?;
            let kind = kind_name(ModelKind::TiedMulti, params.config());
            let (report, records) = run_cost_benefit(&params, &test, &vocab, s.mode, &s.beam, &kind, &file_label(model))?;
            let mut log = create(&out.join(format!("decode-{}.log", s.mode)))?;
            write_decode_log(&records, &vocab, &mut log)?;
            log.flush()?;
            write_text(&out.join("cost_benefit.txt"), &report.to_text(true))?;
            write_text(&out.join("cost_benefit.csv"), &report.to_csv(true))?;
            write_text(&out.join("cost_benefit.json"), &report.to_json(true, &s.to_map()))?;
            write!(stdout, "{}", report.to_text(true))?;
        }
        Command::Oracle { logs, data } => {
            let logs = load_logs(logs)?;
            let refs = read_references(data)?;
            let (n, m) = log_extent(&logs)?;
            let run = oracle_from_logs(&logs, &refs, n, m)?;
            let mut w = create(&out.join("grid.tsv"))?;
            write_grid_file(&run.grids, n, m, &mut w)?;
            w.flush()?;
            write_text(&out.join("oracle.txt"), &oracle_text(&run))?;
            write_text(&out.join("oracle.csv"), &distribution_csv(&run.histogram(), m))?;
            write!(stdout, "{}", oracle_text(&run))?;
        }
        Command::BuildSelectorData { model, data } => {
            let params = load_model(model)?;
            let vocab = model_vocab(&params)?;
            let corpus = load_corpus(data, &vocab)?;
            let ds = build_selector_dataset(&params, &corpus, &vocab, s.mode, &s.beam);
            let mut w = create(&out.join("selector_data.tsv"))?;
            write_selector_dataset(&ds, &vocab, &mut w)?;
            w.flush()?;
            let mut g = create(&out.join("selector_grid.tsv"))?;
            write_grid_file(&ds.grids, ds.enc_layers, ds.dec_layers, &mut g)?;
            g.flush()?;
            writeln!(stdout, "examples={} failures={}", ds.examples.len(), ds.failures)?;
        }
        Command::TrainSelector { model, dataset } => {
            let params = load_model(model)?;
            let vocab = model_vocab(&params)?;
            let ds = read_selector_dataset(open(dataset)?, &vocab)?;
            let cfg = params.config();
            if (ds.enc_layers, ds.dec_layers) != (cfg.enc_layers, cfg.dec_layers) {
                bail!("dataset is for a {}x{} grid, model has {}x{}", ds.enc_layers, ds.dec_layers, cfg.enc_layers, cfg.dec_layers);
            }
            let init = SelectorParams::from_model(&params, &s.selector)?;
            let mut log = create(&out.join("selector.log"))?;
            let result = if s.selector_grid {
                train_selector_grid(&init, &ds.examples, &s.selector, &mut log).map(|(_, t)| t)
            } else {
                train_selector(init, &ds.examples, &s.selector, &mut log)
            };
            log.flush()?;
            let trained = result?;
            save_selector(&trained.params, out.join("selector.ckpt"))?;
            if let Some(last) = trained.epochs.last() {
                writeln!(stdout, "{}", last.log_line())?;
            }
        }
        Command::SelectDecode { model, selector, data } => {
            let params = load_model(model)?;
            let sel = load_selector(selector)?;
            let vocab = model_vocab(&params)?;
            let corpus = load_corpus(data, &vocab)?;
            let sources: Vec<Vec<usize>> = corpus.iter().map(|(src, _)| src.clone()).collect();
            let picked = select_and_decode(&params, &sel, &sources, s.selector.threshold, s.mode, &s.beam);
            let records: Vec<_> = picked.iter().map(|p| p.record.clone()).collect();
            let mut log = create(&out.join("select.log"))?;
            write_decode_log(&records, &vocab, &mut log)?;
            log.flush()?;
            let hyps: Vec<String> = records.iter().map(|r| vocab.decode(&r.tokens)).collect();
            let refs: Vec<String> = corpus.iter().map(|(_, t)| vocab.decode(t)).collect();
            let select_seconds: f64 = picked.iter().map(|p| p.select_seconds).sum();
            writeln!(
                stdout,
                "bleu={:.2} seconds={:.3} selector_seconds={select_seconds:.3}",
                corpus_bleu(&hyps, &refs)?,
                total_seconds(&records)
            )?;
        }
        Command::Distill { model, data, test, child, no_distill } => {
            let parent = load_model(model)?;
            let vocab = model_vocab(&parent)?;
            let train_corpus = load_corpus(data, &vocab)?;
            let test_corpus = load_corpus(test, &vocab)?;
            let kinds = match child {
                ChildArg::Tied => vec![ChildKind::Tied],
                ChildArg::TiedRs => vec![ChildKind::TiedRs],
                ChildArg::Both => vec![ChildKind::Tied, ChildKind::TiedRs],
            };
            let report = run_distillation_pipeline(&parent, &train_corpus, &test_corpus, &vocab, &kinds, !no_distill, &s.training, &s.beam)?;
            if let Some(p) = &report.pseudo {
                let mut w = create(&out.join("pseudo.tsv"))?;
                write_corpus(&p.pairs, &vocab, &mut w)?;
                w.flush()?;
            }
            for c in &report.children {
                let tag = if c.distilled { "distilled" } else { "plain" };
                save_model(&c.params, out.join(format!("child-{}-{tag}.ckpt", c.kind)))?;
            }
            write_text(&out.join("distill.txt"), &report.to_text())?;
            write!(stdout, "{}", report.to_text())?;
        }
        Command::Sizes { paper } => {
            let cfg = if *paper { ModelConfig::paper_base() } else { s.model.clone() };
            let rows = report_model_sizes(&cfg);
            write_text(&out.join("sizes.txt"), &sizes_text(&rows))?;
            write_text(&out.join("sizes.csv"), &sizes_csv(&rows))?;
            write!(stdout, "{}", sizes_text(&rows))?;
        }
        Command::Report { logs: log_path, data, grid } => {
            let logs = load_logs(log_path)?;
            let refs = read_references(data)?;
            let (n, m) = log_extent(&logs)?;
            let label = file_label(log_path);
            let cb = cost_benefit_from_logs(&logs, &refs, n, m, log_mode(&logs), "from-log", &label)?;
            let oracle = match grid {
                Some(path) => {
                    let (gn, gm, grids) = read_grid_file(open(path)?)?;
                    if (gn, gm) != (n, m) {
                        bail!("grid file is {gn}x{gm} but the log covers {n}x{m}");
                    }
                    oracle_from_grids(n, m, grids)
                }
                None => oracle_from_logs(&logs, &refs, n, m)?,
            };
            let text = format!("{}\n{}", cb.to_text(false), oracle_text(&oracle));
            write_text(&out.join("report.txt"), &text)?;
            write_text(&out.join("report.csv"), &format!("{}\n{}", cb.to_csv(false), distribution_csv(&oracle.histogram(), m)))?;
            write_text(&out.join("report.json"), &cb.to_json(false, &s.to_map()))?;
            write!(stdout, "{text}")?;
        }
    }
    Ok(())
}
