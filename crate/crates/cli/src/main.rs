use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fwls::cf::{run_benchmark, BenchmarkConfig};
use fwls::csv_io::{
    coefficients_to_csv, parse_standardizer, predictions_to_csv, read_coefficients, standardizer_to_csv, StackedTable,
};
use fwls::cv::{
    cumulative_report, forward_select, make_folds, merged_baseline_rmse, select_lambda, BlendDesign, CvReport,
};
use fwls::design::CONSTANT_NAME;
use fwls::{parallel_accumulate, solve, store, FwlsError, StackedDataset, Standardizer};

#[derive(Parser)]
#[command(name = "fwls", version, about = "Feature-weighted linear stacking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit blend coefficients on a stacked CSV
    Fit(FitArgs),
    /// Cross-validated RMSE and meta-feature selection
    Cv(CvArgs),
    /// Add a model or meta-feature to a saved state
    Extend(ExtendArgs),
    /// Run the synthetic collaborative-filtering benchmark
    Bench(BenchArgs),
    /// Apply a coefficients file to a stacked CSV
    Predict(PredictArgs),
}

#[derive(Args)]
struct ColumnFlags {
    /// Do not prepend the constant meta-feature
    #[arg(long)]
    no_f0: bool,
    /// Prepend a constant model column
    #[arg(long)]
    g0: bool,
}

impl ColumnFlags {
    fn load(&self, path: &Path) -> Result<StackedDataset> {
        let table = StackedTable::read(path)?;
        if table.targets.is_none() {
            bail!("{}: a `y` column is required", path.display());
        }
        Ok(table.into_dataset(!self.no_f0, self.g0)?)
    }
}

#[derive(Args)]
struct FitArgs {
    /// Stacked CSV (`id,y,g:...,f:...`)
    #[arg(long, required_unless_present = "state_in")]
    input: Option<PathBuf>,
    /// Solve a saved state instead of reading a CSV
    #[arg(long, conflicts_with_all = ["input", "standardize", "state_out"])]
    state_in: Option<PathBuf>,
    #[arg(long, default_value_t = fwls::solver::DEFAULT_LAMBDA)]
    lambda: f64,
    /// Coefficients CSV (`model,feature,v_ij`)
    #[arg(long)]
    coeffs_out: PathBuf,
    /// Also save the accumulated state
    #[arg(long)]
    state_out: Option<PathBuf>,
    /// Accumulation workers (default: available cores)
    #[arg(long)]
    threads: Option<usize>,
    /// Standardize non-constant meta-features before fitting
    #[arg(long, requires = "scaling_out")]
    standardize: bool,
    /// Where to write the standardization (`feature,mean,scale`)
    #[arg(long)]
    scaling_out: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnFlags,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Merged,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, conflicts_with = "lambda_grid")]
    lambda: Option<f64>,
    /// Comma-separated grid; the best value by CV RMSE is used
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `forward`, `all`, or a comma-separated list of meta-feature names
    #[arg(long, default_value = "forward")]
    features: String,
    /// Also report a baseline on the same meta-feature subset
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Report path; writes `<path>.csv` and `<path>.txt`
    #[arg(long)]
    report_out: Option<PathBuf>,
    #[command(flatten)]
    columns: ColumnFlags,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    state_in: PathBuf,
    /// The stacked CSV the state was accumulated from
    #[arg(long)]
    dataset: PathBuf,
    /// CSV with `id,g:<name>`
    #[arg(long, required_unless_present = "new_feature", conflicts_with = "new_feature")]
    new_model: Option<PathBuf>,
    /// CSV with `id,f:<name>`
    #[arg(long)]
    new_feature: Option<PathBuf>,
    #[arg(long)]
    state_out: PathBuf,
    #[command(flatten)]
    columns: ColumnFlags,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML file of benchmark settings (all keys optional)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "bench-out")]
    out_dir: PathBuf,
    /// Master seed for generation, training and folds
    #[arg(long)]
    seed: Option<u64>,
    /// Small profile for smoke runs
    #[arg(long, conflicts_with = "config")]
    quick: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    coeffs: PathBuf,
    /// Stacked CSV; `y` is optional
    #[arg(long)]
    input: PathBuf,
    /// Standardization written by `fit --standardize`
    #[arg(long)]
    scaling: Option<PathBuf>,
    /// Output CSV (default: stdout)
    #[arg(long)]
    output: Option<PathBuf>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let (state, model_names, feature_names, scaler) = match (&args.input, &args.state_in) {
        (_, Some(path)) => {
            let file = store::load(path)?;
            let map = file.state.mapping();
            let models = (1..=map.n_models()).map(|i| format!("g{i}")).collect();
            let feats = (1..=map.n_features()).map(|j| format!("f{j}")).collect();
            (file.state, models, feats, None)
        }
        (Some(path), None) => {
            let mut ds = args.columns.load(path)?;
            let scaler = if args.standardize {
                let s = Standardizer::fit(&ds);
                ds = s.apply(&ds)?;
                Some(s)
            } else {
                None
            };
            let threads = args.threads.unwrap_or_else(default_threads);
            let state = parallel_accumulate(&ds, threads)?;
            (state, ds.model_names().to_vec(), ds.feature_names().to_vec(), scaler)
        }
        (None, None) => unreachable!("clap requires one source"),
    };
    let solved = solve(&state, args.lambda)?;
    write_file(
        &args.coeffs_out,
        &coefficients_to_csv(&solved.coeffs, &model_names, &feature_names),
    )?;
    if let (Some(s), Some(path)) = (&scaler, &args.scaling_out) {
        write_file(path, &standardizer_to_csv(s, &feature_names))?;
    }
    if let Some(path) = &args.state_out {
        store::save(&state, args.lambda, path)?;
    }
    let map = state.mapping();
    println!("rows: {}", state.n_rows());
    println!(
        "models: {}  meta-features: {}  columns: {}",
        map.n_models(),
        map.n_features(),
        map.dim()
    );
    match solved.jitter {
        Some(j) => println!("lambda: {} (jitter {j:e})", args.lambda),
        None => println!("lambda: {}", args.lambda),
    }
    println!("train_rmse: {}", solved.train_rmse);
    Ok(())
}

fn feature_indices(ds: &StackedDataset, list: &str) -> Result<Vec<usize>> {
    let names = ds.feature_names();
    let mut out = Vec::new();
    if names.first().map(String::as_str) == Some(CONSTANT_NAME) {
        out.push(0);
    }
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let j = names
            .iter()
            .position(|n| n == name)
            .with_context(|| format!("unknown meta-feature `{name}` (have: {})", names.join(", ")))?;
        if !out.contains(&j) {
            out.push(j);
        }
    }
    if out.is_empty() {
        bail!("no meta-features selected");
    }
    Ok(out)
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let ds = args.columns.load(&args.input)?;
    let plan = make_folds(ds.n_rows(), args.k, args.seed)?;
    let all: Vec<usize> = (0..ds.n_features()).collect();
    let lambda = match (&args.lambda, &args.lambda_grid) {
        (Some(l), _) => *l,
        (None, Some(grid)) => select_lambda(&ds, BlendDesign::Fwls(&all), grid, &plan)?.0,
        (None, None) => fwls::solver::DEFAULT_LAMBDA,
    };
    let report: CvReport = match args.features.as_str() {
        "forward" => {
            if ds.feature_names().first().map(String::as_str) != Some(CONSTANT_NAME) {
                bail!("forward selection starts from the constant meta-feature; drop --no-f0");
            }
            forward_select(&ds, &all[1..], lambda, &plan)?
        }
        "all" => cumulative_report(&ds, &all, lambda, &plan)?,
        list => cumulative_report(&ds, &feature_indices(&ds, list)?, lambda, &plan)?,
    };
    let mut table = report.to_table();
    if !report.rejected.is_empty() {
        table.push_str("rejected:");
        for (name, rmse) in &report.rejected {
            table.push_str(&format!(" {name} ({rmse:.6})"));
        }
        table.push('\n');
    }
    let mut csv = report.to_csv();
    if let Some(Baseline::Merged) = args.baseline {
        let merged = merged_baseline_rmse(&ds, &report.selected, lambda, &plan)?;
        table.push_str(&format!("merged-inputs baseline on the same set: {merged:.6}\n"));
        csv.push_str(&format!("merged,baseline,{merged}\n"));
    }
    print!("{table}");
    if let Some(stem) = &args.report_out {
        write_file(&stem.with_extension("csv"), &csv)?;
        write_file(&stem.with_extension("txt"), &table)?;
    }
    Ok(())
}

fn cmd_extend(args: ExtendArgs) -> Result<()> {
    let file = store::load(&args.state_in)?;
    let ds = args.columns.load(&args.dataset)?;
    let col_path = args.new_model.as_ref().or(args.new_feature.as_ref()).expect("clap requires one");
    let (col, is_model) = StackedTable::read(col_path)?.into_new_column()?;
    if is_model != args.new_model.is_some() {
        bail!(
            "{} holds a {} column but was passed as --new-{}",
            col_path.display(),
            if is_model { "g:" } else { "f:" },
            if args.new_model.is_some() { "model" } else { "feature" }
        );
    }
    let extended = if is_model {
        store::extend_with_model(&file.state, &col, &ds)
    } else {
        store::extend_with_feature(&file.state, &col, &ds)
    };
    let extended = match extended {
        Err(e @ FwlsError::FingerprintMismatch { .. }) => {
            return Err(anyhow::Error::new(e).context(
                "row ids differ from the ones the state was built on; extending would pair values from different examples",
            ))
        }
        other => other?,
    };
    store::save(&extended, file.lambda_hint, &args.state_out)?;
    let map = extended.mapping();
    println!(
        "extended {} -> {}: models {} meta-features {} columns {}",
        args.state_in.display(),
        args.state_out.display(),
        map.n_models(),
        map.n_features(),
        map.dim()
    );
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let mut cfg = match (&args.config, args.quick) {
        (Some(path), _) => BenchmarkConfig::from_file(path)?,
        (None, true) => BenchmarkConfig::quick(),
        (None, false) => BenchmarkConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    let report = run_benchmark(&cfg)?;
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    write_file(&args.out_dir.join("strategies.csv"), &report.to_csv())?;
    write_file(&args.out_dir.join("strategies.txt"), &report.to_table())?;
    write_file(&args.out_dir.join("selection.csv"), &report.selection.to_csv())?;
    write_file(&args.out_dir.join("selection.txt"), &report.selection.to_table())?;
    print!("{}\n{}", report.to_table(), report.selection.to_table());
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let named = read_coefficients(&args.coeffs)?;
    let table = StackedTable::read(&args.input)?;
    let has_const = |names: &[String]| names.first().map(String::as_str) == Some(CONSTANT_NAME);
    let add_f0 = has_const(&named.feature_names) && !table.feature_names.iter().any(|n| n == CONSTANT_NAME);
    let add_g0 = has_const(&named.model_names) && !table.model_names.iter().any(|n| n == CONSTANT_NAME);
    let ds = table.into_dataset(add_f0, add_g0)?;
    if ds.model_names() != named.model_names.as_slice() || ds.feature_names() != named.feature_names.as_slice() {
        bail!(
            "columns of {} (models: {}; features: {}) do not match the coefficients (models: {}; features: {})",
            args.input.display(),
            ds.model_names().join(","),
            ds.feature_names().join(","),
            named.model_names.join(","),
            named.feature_names.join(",")
        );
    }
    let mut coeffs = named.coeffs;
    if let Some(path) = &args.scaling {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let (names, s) = parse_standardizer(&text, &path.display().to_string())?;
        if names != named.feature_names {
            bail!("{} does not describe the coefficient meta-features", path.display());
        }
        coeffs = coeffs.with_standardizer(s)?;
    }
    let preds = coeffs.predict_dataset(&ds)?;
    let ids = ds.row_ids().map(<[String]>::to_vec).unwrap_or_default();
    let out = predictions_to_csv(&ids, &preds);
    match &args.output {
        Some(path) => write_file(path, &out)?,
        None => std::io::stdout().write_all(out.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Extend(a) => cmd_extend(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Predict(a) => cmd_predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
