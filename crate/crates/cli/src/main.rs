use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use stgrid::bench::{
    gen_synthetic, run_grid, write_metadata_csv, write_readings_csv, DataSource, GridSpec, SyntheticSpec,
};
use stgrid::graph::{build_graph, export_heatmap_csv, pearson_abs};
use stgrid::spatial::{agglomerative_cluster, select_subset, LatLon};
use stgrid::timeseries::{resample, split_by_days, CsvSchema};

#[derive(Parser)]
#[command(name = "bench", version, about = "Spatio-temporal forecasting benchmark grid")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid and write reports.
    Run {
        /// Grid config (TOML). Defaults cover the full published grid.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Long-format readings CSV, or `synthetic`.
        #[arg(long)]
        data: String,
        /// Sensor coordinates CSV (`sensor_id,lat,lon`). Defaults to
        /// `<data stem>_metadata.csv` when that file exists.
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; falls back to STGRID_WORKERS, then all cores.
        #[arg(long)]
        workers: Option<usize>,
        /// Global seed mixed into every cell seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build one correlation graph and print it as JSON.
    Graph {
        /// Redundancy level in percent.
        #[arg(long)]
        p: f64,
        /// Node count.
        #[arg(long)]
        k: usize,
        #[arg(long, default_value = "synthetic")]
        data: String,
        #[arg(long)]
        metadata: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Sampling rate in minutes.
        #[arg(long, default_value_t = 5)]
        rate: u32,
        /// Also write the weighted adjacency as a heatmap CSV.
        #[arg(long)]
        heatmap: Option<PathBuf>,
    },
    /// Generate a synthetic sensor network as long-format CSV.
    Synth {
        /// Synthetic spec (TOML); defaults when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Coordinates file; defaults to `<out stem>_metadata.csv`.
        #[arg(long)]
        metadata: Option<PathBuf>,
    },
    /// Print the default grid config.
    Config,
}

fn metadata_sibling(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}_metadata.csv"))
}

fn load_grid(config: Option<&Path>) -> Result<GridSpec> {
    match config {
        Some(p) => GridSpec::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(GridSpec::default()),
    }
}

fn data_source(data: &str, metadata: Option<PathBuf>, grid: &GridSpec) -> DataSource {
    if data == "synthetic" {
        return DataSource::Synthetic(grid.synthetic.clone());
    }
    let readings = PathBuf::from(data);
    let metadata = metadata.or_else(|| Some(metadata_sibling(&readings)).filter(|p| p.exists()));
    DataSource::Csv { readings, metadata, schema: CsvSchema::default() }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { config, data, metadata, out, workers, seed } => {
            let mut grid = load_grid(config.as_deref())?;
            if workers.is_some() {
                grid.workers = workers;
            }
            if let Some(s) = seed {
                grid.global_seed = s;
            }
            let source = data_source(&data, metadata, &grid);
            let output = run_grid(&grid, &source, &out)?;
            let failed = output.failures();
            println!("{} cells, {} failed; reports in {}", output.records.len(), failed, out.display());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Graph { p, k, data, metadata, config, rate, heatmap } => {
            let grid = load_grid(config.as_deref())?;
            let series = data_source(&data, metadata, &grid).resolve()?;
            if k > series.len() {
                bail!("asked for {k} nodes but the data has {}", series.len());
            }
            let coords: Vec<LatLon> = series.iter().map(|s| LatLon::new(s.latitude, s.longitude)).collect();
            let ids: Vec<String> = series.iter().map(|s| s.sensor_id.clone()).collect();
            let clusters = agglomerative_cluster(&coords, grid.clusters.min(series.len()))?;
            let plan = select_subset(&clusters, &coords, &ids, k, !grid.allow_any_k)?;
            let panel = resample(&series, rate, None)?.select_nodes(&plan.indices);
            let train = split_by_days(&panel, grid.split)?.train;
            let graph = build_graph(&pearson_abs(train.values.view())?, p)?;
            if let Some(path) = heatmap {
                export_heatmap_csv(graph.adjacency.view(), &plan.sensors, path)?;
            }
            println!("{}", graph.to_json()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { spec, out, metadata } => {
            let spec = match spec {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str::<SyntheticSpec>(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => SyntheticSpec::default(),
            };
            let series = gen_synthetic(&spec)?;
            write_readings_csv(&series, &out)?;
            let meta = metadata.unwrap_or_else(|| metadata_sibling(&out));
            write_metadata_csv(&series, &meta)?;
            println!("{} sensors written to {} ({})", series.len(), out.display(), meta.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Config => {
            print!("{}", GridSpec::default().to_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
