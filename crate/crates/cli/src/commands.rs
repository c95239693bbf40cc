//! Subcommand definitions and their implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use lace_core::checkpoint::{load_checkpoint, save_checkpoint};
use lace_core::data::{read_labeled_csv, write_labeled_csv};
use lace_core::gradcheck::{gradcheck, GradcheckConfig, Group};
use lace_core::loss::{lace_param_count, Ablation, Head};
use lace_core::metrics::{calinski_harabasz, davies_bouldin, silhouette, Distance};
use lace_core::numerics::Matrix;
use lace_core::trainer::{evaluate, Model};

use crate::config::{apply_overrides, loss_kind, DatasetKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::pipeline::{embedding_views, prepare, train_model, Prepared};

pub const VERSION: &str = concat!("lace-cli ", env!("CARGO_PKG_VERSION"));

#[derive(Parser, Debug)]
#[command(name = "lace", version, about = "Train and inspect LACE classification heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write manifest, epoch log, summary and checkpoint.
    Train(RunArgs),
    /// Score a trained run on one of its splits.
    Evaluate(RunDirArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write embeddings and signatures of a trained run as CSV.
    ExportEmbeddings(ExportArgs),
    /// Silhouette, Davies-Bouldin and Calinski-Harabasz scores of a CSV.
    EvalClusters(ClusterArgs),
    /// Train every mean/covariance toggle combination of the LACE head.
    Ablate(RunArgs),
    /// Write the synthetic blob train and test sets as CSV.
    Blobs(RunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = ["lace", "softmax", "cosface"])]
    pub loss: Option<String>,
    /// Freeze the background mean at zero.
    #[arg(long)]
    pub no_mean: bool,
    /// Freeze the inverse covariance at the identity.
    #[arg(long)]
    pub no_cov: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    pub out: PathBuf,
    #[arg(long, value_parser = ["blobs", "idx", "cifar10"])]
    pub dataset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Any config key, as key=value; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct RunDirArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Checkpoint to use instead of the run's own.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
    pub split: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Space {
    PreWhitened,
    Whitened,
    Both,
}

#[derive(Args, Debug, Clone)]
pub struct ExportArgs {
    #[command(flatten)]
    pub run: RunDirArgs,
    #[arg(long, value_enum, default_value = "both")]
    pub space: Space,
    /// Directory for the CSV files; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DistanceArg {
    Euclidean,
    Cosine,
}

#[derive(Args, Debug, Clone)]
pub struct ClusterArgs {
    /// CSV with a `label` column and `f0..` feature columns.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Distance used by the Silhouette score.
    #[arg(long, value_enum, default_value = "euclidean")]
    pub distance: DistanceArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupArg {
    S,
    Mean,
    M,
    Embeddings,
    Backbone,
}

impl From<GroupArg> for Group {
    fn from(g: GroupArg) -> Group {
        match g {
            GroupArg::S => Group::Signatures,
            GroupArg::Mean => Group::Mean,
            GroupArg::M => Group::Factor,
            GroupArg::Embeddings => Group::Embeddings,
            GroupArg::Backbone => Group::Backbone,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 5)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_mean: bool,
    #[arg(long)]
    pub no_cov: bool,
    /// Negate one analytic gradient group (fault injection).
    #[arg(long, value_enum, hide = true)]
    pub flip_sign: Option<GroupArg>,
}

/// Config file (or defaults) with flag overrides applied, validated.
pub fn resolve(args: &RunArgs) -> CliResult<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(l) = &args.loss {
        cfg.train.loss = loss_kind(l)?;
    }
    if args.no_mean {
        cfg.train.ablation.use_mean = false;
    }
    if args.no_cov {
        cfg.train.ablation.use_cov = false;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.parse::<DatasetKind>().map_err(CliError::Config)?;
    }
    if let Some(e) = args.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.train.lr = lr;
    }
    if let Some(p) = args.patience {
        cfg.train.patience = p;
    }
    apply_overrides(&mut cfg, &args.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::output(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::output(path, e))
}

pub fn manifest_text(cfg: &RunConfig, data: &Prepared) -> String {
    format!(
        "# lace run manifest; replay with `lace train --config manifest.txt`\n\
         manifest.version = {VERSION}\n\
         manifest.train_digest = {}\n\
         manifest.test_digest = {}\n\
         manifest.sizes = train {} val {} test {}\n\
         manifest.outputs = manifest.txt epochs.csv summary.txt checkpoint.bin\n\
         {}",
        data.train_digest,
        data.test_digest,
        data.train.len(),
        data.val.len(),
        data.test.len(),
        cfg.to_text()
    )
}

fn summary_text(cfg: &RunConfig, model: &Model, report: &lace_core::trainer::TrainReport) -> String {
    let mut out = format!(
        "loss = {}\nseed = {}\nuse_mean = {}\nuse_cov = {}\nparameters = {}\n",
        cfg.train.loss,
        cfg.train.seed,
        cfg.train.ablation.use_mean,
        cfg.train.ablation.use_cov,
        model.tensors().iter().map(|t| t.len()).sum::<usize>()
    );
    if let Head::Lace(p) = &model.head {
        if let Ok(count) = lace_param_count(p.dim(), p.classes()) {
            out.push_str(&format!("head_extra_parameters = {}\n", count.extra_vs_softmax));
        }
    }
    out.push_str(&report.summary());
    out
}

/// Trains one configuration into `out`; returns the summary text.
pub fn train_into(cfg: &RunConfig, out: &Path) -> CliResult<String> {
    create_dir(out)?;
    let data = prepare(cfg)?;
    write(&out.join("manifest.txt"), &manifest_text(cfg, &data))?;
    let run = train_model(cfg, &data)?;
    write(&out.join("epochs.csv"), &run.report.epochs_csv())?;
    let summary = summary_text(cfg, &run.model, &run.report);
    write(&out.join("summary.txt"), &summary)?;
    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&ckpt, &run.model).map_err(|e| CliError::output(&ckpt, e))?;
    Ok(summary)
}

fn cmd_train(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = resolve(args)?;
    let summary = train_into(&cfg, &args.out)?;
    let _ = write!(stdout, "{summary}");
    let _ = writeln!(stdout, "artifacts in {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    cfg.train.loss = lace_core::trainer::LossKind::Lace;
    let _ = writeln!(stdout, "use_mean,use_cov,test_accuracy,test_loss,stop_epoch");
    for (use_mean, use_cov) in [(false, false), (true, false), (false, true), (true, true)] {
        cfg.train.ablation = Ablation { use_mean, use_cov };
        let dir = args.out.join(format!("mean{}_cov{}", use_mean as u8, use_cov as u8));
        train_into(&cfg, &dir)?;
        let summary = std::fs::read_to_string(dir.join("summary.txt")).map_err(|e| CliError::output(&dir, e))?;
        let get = |key: &str| {
            summary
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
                .unwrap_or("")
                .to_string()
        };
        let _ = writeln!(
            stdout,
            "{use_mean},{use_cov},{},{},{}",
            get("test_accuracy"),
            get("test_loss"),
            get("stop_epoch")
        );
    }
    Ok(())
}

fn cmd_blobs(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    cfg.dataset = DatasetKind::Blobs;
    create_dir(&args.out)?;
    let (train, test) = crate::pipeline::load(&cfg)?;
    for (name, ds) in [("blobs_train.csv", &train), ("blobs_test.csv", &test)] {
        let path = args.out.join(name);
        write_labeled_csv(&path, &ds.labels, &ds.features, &[]).map_err(|e| CliError::output(&path, e))?;
        let _ = writeln!(stdout, "wrote {} ({} rows)", path.display(), ds.len());
    }
    Ok(())
}

/// Run config, prepared data and model of a trained run directory.
pub fn open_run(args: &RunDirArgs) -> CliResult<(RunConfig, Prepared, Model)> {
    let manifest = args.run.join("manifest.txt");
    let cfg = RunConfig::from_file(&manifest)?;
    let data = prepare(&cfg)?;
    let text =
        std::fs::read_to_string(&manifest).map_err(|e| CliError::Config(format!("{}: {e}", manifest.display())))?;
    for (key, actual) in [
        ("manifest.train_digest", &data.train_digest),
        ("manifest.test_digest", &data.test_digest),
    ] {
        let recorded = text.lines().find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
        });
        if let Some(r) = recorded {
            if &r != actual {
                return Err(CliError::Data(format!(
                    "{key} is {r} but the data now hashes to {actual}"
                )));
            }
        }
    }
    let ckpt = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| args.run.join("checkpoint.bin"));
    let model = load_checkpoint(&ckpt).map_err(CliError::run)?;
    let expected = cfg.backbone(&data.train)?;
    if model.backbone.spec != expected || model.head.num_classes() != data.train.classes {
        return Err(CliError::Config(format!(
            "checkpoint {} holds {} with {} classes, run config needs {} with {} classes",
            ckpt.display(),
            model.backbone.spec.descriptor(),
            model.head.num_classes(),
            expected.descriptor(),
            data.train.classes
        )));
    }
    Ok((cfg, data, model))
}

fn cmd_evaluate(args: &RunDirArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let (cfg, data, model) = open_run(args)?;
    let split = data.split(&args.split)?;
    let e = evaluate(&model, split, cfg.train.norm_eps).map_err(CliError::run)?;
    let _ = writeln!(stdout, "split = {}\nsamples = {}", args.split, split.len());
    let _ = writeln!(stdout, "accuracy = {}\nmean_loss = {}", e.accuracy, e.mean_loss);
    for (c, acc) in e.per_class_accuracy.iter().enumerate() {
        if let Some(a) = acc {
            let _ = writeln!(stdout, "accuracy_class_{c} = {a}");
        }
    }
    Ok(())
}

fn cmd_export(args: &ExportArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let (cfg, data, model) = open_run(&args.run)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.run.clone());
    create_dir(&out)?;
    let split = data.split(&args.run.split)?;
    let views = embedding_views(&model, split)?;
    let save = |name: &str, labels: &[usize], m: &Matrix, extra: &[(&str, &[f64])]| -> CliResult<()> {
        let path = out.join(name);
        write_labeled_csv(&path, labels, m, extra).map_err(|e| CliError::output(&path, e))
    };
    if args.space != Space::Whitened {
        save("embeddings_pre.csv", &views.labels, &views.pre, &[])?;
        let _ = writeln!(stdout, "wrote embeddings_pre.csv ({} rows)", views.labels.len());
    }
    if args.space != Space::PreWhitened {
        match &views.post {
            Some((w, norms)) => {
                let norms = norms.to_vec();
                save("embeddings_post.csv", &views.labels, w, &[("pre_norm", &norms)])?;
                let _ = writeln!(stdout, "wrote embeddings_post.csv ({} rows)", views.labels.len());
            }
            None if args.space == Space::Whitened => {
                return Err(CliError::Config(format!(
                    "{} head has no whitened space",
                    cfg.train.loss
                )));
            }
            None => {
                let _ = writeln!(
                    stdout,
                    "{} head has no whitened space; skipped embeddings_post.csv",
                    cfg.train.loss
                );
            }
        }
    }
    let classes: Vec<usize> = (0..model.head.num_classes()).collect();
    match &model.head {
        Head::Lace(p) => {
            let op = p.whitener().map_err(CliError::run)?;
            let w = lace_core::ace::whiten_signatures(&op, &p.signatures, cfg.train.norm_eps).map_err(CliError::run)?;
            let wt = w.t().to_owned();
            let cols: Vec<(String, Vec<f64>)> = (0..wt.ncols())
                .map(|k| (format!("w{k}"), wt.column(k).to_vec()))
                .collect();
            let extra: Vec<(&str, &[f64])> = cols.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
            save("signatures.csv", &classes, &p.signatures.t().to_owned(), &extra)?;
        }
        Head::Baseline(h) => save("signatures.csv", &classes, &h.weights.t().to_owned(), &[])?,
    }
    let _ = writeln!(stdout, "wrote signatures.csv ({} rows)", classes.len());
    Ok(())
}

fn cmd_eval_clusters(args: &ClusterArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let (labels, points) = read_labeled_csv(&args.embeddings).map_err(CliError::data)?;
    let distance = match args.distance {
        DistanceArg::Euclidean => Distance::Euclidean,
        DistanceArg::Cosine => Distance::Cosine,
    };
    let config = |e: lace_core::LaceError| CliError::Config(format!("{}: {e}", args.embeddings.display()));
    let s = silhouette(&points, &labels, distance).map_err(config)?;
    let dbi = davies_bouldin(&points, &labels).map_err(config)?;
    let ch = calinski_harabasz(&points, &labels).map_err(config)?;
    let _ = writeln!(
        stdout,
        "points = {}\nsilhouette = {s}\ndavies_bouldin = {dbi}\ncalinski_harabasz = {ch}",
        labels.len()
    );
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = GradcheckConfig {
        dim: args.dim,
        classes: args.classes,
        batch: args.batch,
        seed: args.seed,
        ablation: Ablation {
            use_mean: !args.no_mean,
            use_cov: !args.no_cov,
        },
        flip_sign: args.flip_sign.map(Group::from),
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&cfg).map_err(CliError::run)?;
    let _ = writeln!(stdout, "group,checked,max_rel_err,max_abs_err,max_abs_analytic");
    for g in &report.groups {
        let _ = writeln!(
            stdout,
            "{},{},{:e},{:e},{:e}",
            g.group, g.checked, g.max_rel_err, g.max_abs_err, g.max_abs_analytic
        );
    }
    match report.mismatch() {
        None => Ok(()),
        Some(c) => Err(CliError::GradientMismatch(format!(
            "{} tensor {} element {}: analytic {:e}, numeric {:e} (relative error {:e})",
            c.group,
            c.tensor,
            c.element,
            c.analytic,
            c.numeric,
            c.rel_err()
        ))),
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Gradcheck(a) => cmd_gradcheck(a, stdout),
        Command::ExportEmbeddings(a) => cmd_export(a, stdout),
        Command::EvalClusters(a) => cmd_eval_clusters(a, stdout),
        Command::Ablate(a) => cmd_ablate(a, stdout),
        Command::Blobs(a) => cmd_blobs(a, stdout),
    }
}
