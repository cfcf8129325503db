//! `ecgfuse` command-line entry point.
//!
//! Complex runs are described by a TOML run config; flags only carry paths
//! and command selection. Exit status is 0 on success, 1 when a module
//! fails at runtime and 2 for usage, configuration or malformed-input
//! errors.

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::embedding_store::{align, read_csv, read_ebf, to_ebf_bytes, EmbeddingSet};
use crate::error::{Error, Result};
use crate::fusion::{fuse, normalize_with_train_rows};
use crate::gbdt::{GbdtConfig, GbdtModel};
use crate::metrics;
use crate::resampling::{
    run_benchmark_with_artifacts, stratified_split, BenchmarkReport, FusePair, ReshuffleSpec,
};
use crate::synthgen::{self, SynthConfig};
use crate::tsne::{self, Embedding2D, TsneConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ecgfuse",
    version,
    about = "Late-fusion evaluation of ECG embedding sets"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a CSV fixture (id,label,f0,...) to EBF.
    Convert { input: PathBuf, output: PathBuf },
    /// Write a synthetic pair of EBF files described by the run config.
    Synth(ConfigArg),
    /// Align two EBF files, min-max normalize each, and concatenate.
    Fuse {
        a: PathBuf,
        b: PathBuf,
        output: PathBuf,
        /// Also write the fitted scalers as JSON.
        #[arg(long)]
        scalers: Option<PathBuf>,
    },
    /// Train one classifier on a whole EBF file and save the model JSON.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run config whose [gbdt] table sets the classifier; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score an EBF file with a saved model, or with an `id,score` CSV, and print metrics as JSON.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        model: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run the repeated stratified benchmark over every configured arm.
    Benchmark(ConfigArg),
    /// Project one arm with t-SNE and write an SVG scatter plus coordinates CSV.
    Tsne {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        arm: String,
    },
}

#[derive(Debug, Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FuseSpec {
    #[serde(default)]
    pub name: Option<String>,
    pub a: String,
    pub b: String,
}

impl FuseSpec {
    pub fn arm_name(&self) -> String {
        self.name
            .clone()
            .unwrap_or_else(|| format!("{}+{}", self.a, self.b))
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_per_class() -> usize {
    250
}

fn default_synth_a() -> String {
    "synth_a.ebf".into()
}

fn default_synth_b() -> String {
    "synth_b.ebf".into()
}

/// File-based run configuration. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Persist every benchmark model with the test rows it was scored on.
    #[serde(default)]
    pub save_models: bool,
    #[serde(default = "default_per_class")]
    pub tsne_per_class: usize,
    #[serde(default = "default_synth_a")]
    pub synth_a: String,
    #[serde(default = "default_synth_b")]
    pub synth_b: String,
    #[serde(default)]
    pub gbdt: GbdtConfig,
    #[serde(default)]
    pub reshuffle: ReshuffleSpec,
    #[serde(default)]
    pub tsne: TsneConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub fuse: Vec<FuseSpec>,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.gbdt.validate()?;
        cfg.reshuffle.validate()?;
        let mut names = HashSet::new();
        for arm in &cfg.arms {
            if !names.insert(arm.name.clone()) {
                return Err(Error::Config(format!("duplicate arm name {:?}", arm.name)));
            }
        }
        for f in &cfg.fuse {
            for part in [&f.a, &f.b] {
                if !cfg.arms.iter().any(|a| &a.name == part) {
                    return Err(Error::Config(format!(
                        "fuse entry references unknown arm {part:?}"
                    )));
                }
            }
            if !names.insert(f.arm_name()) {
                return Err(Error::Config(format!(
                    "duplicate arm name {:?}",
                    f.arm_name()
                )));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    /// Every arm path must exist before a run starts.
    pub fn check_arm_paths(&self) -> Result<()> {
        for arm in &self.arms {
            let p = self.resolve(&arm.path);
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "arm {:?}: {} does not exist",
                    arm.name,
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn fuse_pairs(&self) -> Vec<FusePair> {
        self.fuse
            .iter()
            .map(|f| FusePair {
                name: f.arm_name(),
                a: f.a.clone(),
                b: f.b.clone(),
            })
            .collect()
    }
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn load_ebf(path: &Path) -> Result<EmbeddingSet> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    read_ebf(std::io::BufReader::new(file))
}

/// Restricts every set to the ids shared by all of them, in sorted id order.
pub fn align_all(sets: Vec<EmbeddingSet>) -> Result<Vec<EmbeddingSet>> {
    let Some(first) = sets.first() else {
        return Ok(sets);
    };
    if sets.iter().all(|s| s.is_aligned_with(first)) {
        return Ok(sets);
    }
    let mut common = first.clone();
    for s in &sets[1..] {
        common = align(&common, s)?.0;
    }
    sets.iter()
        .map(|s| align(&common, s).map(|(_, b)| b))
        .collect()
}

fn load_arms(cfg: &RunConfig) -> Result<Vec<(String, EmbeddingSet)>> {
    cfg.check_arm_paths()?;
    let sets = cfg
        .arms
        .iter()
        .map(|a| load_ebf(&cfg.resolve(&a.path)))
        .collect::<Result<Vec<_>>>()?;
    let sets = align_all(sets)?;
    Ok(cfg.arms.iter().map(|a| a.name.clone()).zip(sets).collect())
}

fn cmd_convert(input: &Path, output: &Path) -> Result<String> {
    let text = fs::read(input)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", input.display())))?;
    let set = read_csv(text.as_slice())?;
    write_atomic(output, &to_ebf_bytes(&set))?;
    Ok(format!(
        "wrote {} rows x {} features to {}\n",
        set.len(),
        set.dim(),
        output.display()
    ))
}

fn cmd_synth(cfg: &RunConfig) -> Result<String> {
    let (a, b) = synthgen::generate(&cfg.synth)?;
    let dir = cfg.output_dir();
    let (pa, pb) = (dir.join(&cfg.synth_a), dir.join(&cfg.synth_b));
    write_atomic(&pa, &to_ebf_bytes(&a))?;
    write_atomic(&pb, &to_ebf_bytes(&b))?;
    let (ba, bb, bf) = cfg.synth.bayes_targets();
    Ok(format!(
        "wrote {} and {} ({} records, {} positive)\nBayes AUROC: a={ba:.4} b={bb:.4} fused={bf:.4}\n",
        pa.display(),
        pb.display(),
        a.len(),
        cfg.synth.n_pos
    ))
}

fn cmd_fuse(a: &Path, b: &Path, output: &Path, scalers: Option<&Path>) -> Result<String> {
    let (a, b) = align(&load_ebf(a)?, &load_ebf(b)?)?;
    let all: Vec<usize> = (0..a.len()).collect();
    let (na, sa) = normalize_with_train_rows::<f64>(&a, &all)?;
    let (nb, sb) = normalize_with_train_rows::<f64>(&b, &all)?;
    let fused = fuse(&na, &nb)?;
    write_atomic(output, &to_ebf_bytes(&fused))?;
    if let Some(p) = scalers {
        let doc = serde_json::json!({ "a": sa, "b": sb });
        write_atomic(
            p,
            format!("{}\n", serde_json::to_string_pretty(&doc)?).as_bytes(),
        )?;
    }
    Ok(format!(
        "wrote {} rows x {} features to {}\n",
        fused.len(),
        fused.dim(),
        output.display()
    ))
}

fn cmd_train(data: &Path, out: &Path, config: Option<&Path>) -> Result<String> {
    let gbdt = match config {
        Some(p) => RunConfig::load(p)?.gbdt,
        None => GbdtConfig::default(),
    };
    let set = load_ebf(data)?;
    let model = crate::gbdt::train(&set.features().cast::<f64>(), set.labels(), &gbdt)?;
    write_atomic(out, format!("{}\n", model.to_json()?).as_bytes())?;
    Ok(format!(
        "trained {} trees on {} rows; model written to {}\n",
        model.trees.len(),
        set.len(),
        out.display()
    ))
}

fn read_scores_csv(path: &Path, set: &EmbeddingSet) -> Result<(Vec<f64>, Vec<u8>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let index: std::collections::HashMap<&str, usize> = set
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == "id,score" => {}
        _ => {
            return Err(Error::Line {
                line: 1,
                message: "header must be id,score".into(),
            })
        }
    }
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let n = i + 1;
        let (id, score) = line.split_once(',').ok_or(Error::Line {
            line: n,
            message: "expected id,score".into(),
        })?;
        let row = *index.get(id).ok_or_else(|| Error::Line {
            line: n,
            message: format!("unknown id {id:?}"),
        })?;
        if !seen.insert(id) {
            return Err(Error::Line {
                line: n,
                message: format!("duplicate id {id:?}"),
            });
        }
        let s: f64 = score.trim().parse().map_err(|_| Error::Line {
            line: n,
            message: format!("cannot parse score {score:?}"),
        })?;
        scores.push(s);
        labels.push(set.labels()[row]);
    }
    Ok((scores, labels))
}

fn cmd_eval(data: &Path, model: Option<&Path>, scores: Option<&Path>) -> Result<String> {
    let set = load_ebf(data)?;
    let result = match (model, scores) {
        (Some(m), _) => {
            let text = fs::read_to_string(m)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", m.display())))?;
            let model = GbdtModel::<f64>::from_json(&text)?;
            let p = model.predict_proba(&set.features().cast::<f64>())?;
            metrics::evaluate(&p, set.labels())?
        }
        (None, Some(s)) => {
            let (scores, labels) = read_scores_csv(s, &set)?;
            metrics::evaluate(&scores, &labels)?
        }
        (None, None) => {
            return Err(Error::Config(
                "either --model or --scores is required".into(),
            ))
        }
    };
    Ok(format!("{}\n", serde_json::to_string(&result)?))
}

/// Markdown table with one column per arm and rows AUROC / AUCPR, cells `mean±std`.
pub fn render_report_md(report: &BenchmarkReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Mean ± sample STD over {} stratified reshuffles (test fraction {}).\n",
        report.reshuffle.n_repeats, report.reshuffle.test_fraction
    );
    let names: Vec<&str> = report.arms.iter().map(|a| a.name.as_str()).collect();
    let _ = writeln!(s, "| Metric | {} |", names.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(names.len()));
    let row =
        |label: &str, pick: &dyn Fn(&crate::resampling::ArmReport) -> metrics::SummaryStats| {
            let cells: Vec<String> = report
                .arms
                .iter()
                .map(|a| {
                    let st = pick(a);
                    format!("{:.3}±{:.3}", st.mean, st.std)
                })
                .collect();
            format!("| {label} | {} |\n", cells.join(" | "))
        };
    s.push_str(&row("AUROC", &|a| a.auroc));
    s.push_str(&row("AUCPR", &|a| a.aucpr));
    s
}

fn cmd_benchmark(cfg: &RunConfig) -> Result<String> {
    let arms = load_arms(cfg)?;
    let (report, artifacts) = run_benchmark_with_artifacts(
        &arms,
        &cfg.reshuffle,
        &cfg.gbdt,
        &cfg.fuse_pairs(),
        cfg.save_models,
    )?;
    let dir = cfg.output_dir();
    write_atomic(
        &dir.join("report.json"),
        format!("{}\n", serde_json::to_string_pretty(&report)?).as_bytes(),
    )?;
    let md = render_report_md(&report);
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    for art in &artifacts {
        let stem = format!("{}_r{}", sanitize(&art.arm), art.repeat);
        let models = dir.join("models");
        write_atomic(
            &models.join(format!("{stem}.json")),
            format!("{}\n", art.model.to_json()?).as_bytes(),
        )?;
        write_atomic(
            &models.join(format!("{stem}_test.ebf")),
            &to_ebf_bytes(&art.test_set),
        )?;
    }
    Ok(md)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn cmd_tsne(cfg: &RunConfig, arm: &str) -> Result<String> {
    let spec = cfg
        .arms
        .iter()
        .find(|a| a.name == arm)
        .ok_or_else(|| Error::Config(format!("no single arm named {arm:?}")))?;
    let path = cfg.resolve(&spec.path);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "arm {arm:?}: {} does not exist",
            path.display()
        )));
    }
    let set = load_ebf(&path)?;
    // Points are drawn from the training rows of the first reshuffle.
    let plan = stratified_split(
        set.labels(),
        cfg.reshuffle.test_fraction,
        cfg.reshuffle.seed_for(0),
    )?;
    let train = set.select(&plan.train_indices)?;
    let picked = tsne::subsample_balanced(&train, cfg.tsne_per_class, cfg.tsne.seed)?;
    let coords = tsne::tsne_embed(&picked.features().cast::<f64>(), &cfg.tsne)?;
    let emb = Embedding2D::new(coords, picked.labels().to_vec(), picked.ids().to_vec())?;

    let dir = cfg.output_dir();
    let stem = format!("tsne_{}", sanitize(arm));
    let svg = tsne::render_scatter_svg(&emb, &format!("t-SNE: {arm}"));
    write_atomic(&dir.join(format!("{stem}.svg")), svg.as_bytes())?;
    let mut csv = Vec::new();
    tsne::write_coords_csv(&emb, &mut csv)?;
    write_atomic(&dir.join(format!("{stem}.csv")), &csv)?;
    Ok(format!(
        "embedded {} points; wrote {stem}.svg and {stem}.csv to {}\n",
        emb.ids.len(),
        dir.display()
    ))
}

fn dispatch(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Convert { input, output } => cmd_convert(&input, &output),
        Command::Synth(c) => cmd_synth(&RunConfig::load(&c.config)?),
        Command::Fuse {
            a,
            b,
            output,
            scalers,
        } => cmd_fuse(&a, &b, &output, scalers.as_deref()),
        Command::Train { data, out, config } => cmd_train(&data, &out, config.as_deref()),
        Command::Eval {
            data,
            model,
            scores,
        } => cmd_eval(&data, model.as_deref(), scores.as_deref()),
        Command::Benchmark(c) => cmd_benchmark(&RunConfig::load(&c.config)?),
        Command::Tsne { config, arm } => cmd_tsne(&RunConfig::load(&config.config)?, &arm),
    }
}

/// Runs one command and returns its exit status.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(stderr, "{e}");
                return 2;
            }
            let _ = write!(stdout, "{e}");
            return 0;
        }
    };
    match dispatch(cli) {
        Ok(msg) => {
            let _ = stdout.write_all(msg.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_input_error() {
                2
            } else {
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_fuse_names() {
        let cfg = RunConfig::parse(
            r#"
            [[arms]]
            name = "A"
            path = "a.ebf"
            [[arms]]
            name = "B"
            path = "b.ebf"
            [[fuse]]
            a = "A"
            b = "B"
            "#,
            Path::new("/tmp/x"),
        )
        .unwrap();
        assert_eq!(cfg.gbdt, GbdtConfig::default());
        assert_eq!(cfg.reshuffle.n_repeats, 10);
        assert_eq!(cfg.tsne_per_class, 250);
        assert_eq!(cfg.fuse_pairs()[0].name, "A+B");
        assert_eq!(cfg.resolve(Path::new("a.ebf")), Path::new("/tmp/x/a.ebf"));
    }

    #[test]
    fn config_errors() {
        let dup = "[[arms]]\nname='A'\npath='a'\n[[arms]]\nname='A'\npath='b'\n";
        assert!(matches!(
            RunConfig::parse(dup, Path::new(".")),
            Err(Error::Config(_))
        ));
        let bad_ref = "[[arms]]\nname='A'\npath='a'\n[[fuse]]\na='A'\nb='Z'\n";
        assert!(matches!(
            RunConfig::parse(bad_ref, Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("bogus = 1", Path::new(".")),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::parse("[gbdt]\nsubsample = 2.0", Path::new(".")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn usage_error_exits_two() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        assert_eq!(run(["ecgfuse", "nonsense"], &mut out, &mut err), 2);
        assert_eq!(
            run(["ecgfuse", "eval", "--data", "x.ebf"], &mut out, &mut err),
            2
        );
    }
}
