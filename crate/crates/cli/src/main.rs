use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drag::config::RunConfig;
use drag::correlation::AblationMode;
use drag::data::{generate_dataset, load_dataset, Dataset};
use drag::model::{forward_from_features, grad_check_config, pipeline_grad_check, DragParams};
use drag::region::{export_region_maps, kmeans_cluster, SignatureBuilder};
use drag::train::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
use drag::train::metrics::TABLE_HEADER;
use drag::train::schedule::{compute_features, evaluate, gather, run_ablation, run_schedule, write_log};
use drag::{Error, Graph};

#[derive(Parser, Debug)]
#[command(name = "drag", version, about = "Region-aware GCN privacy classifier on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic dataset directory.
    GenData(Common),
    /// Run the staged training schedule.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Eval(Common),
    /// Finite-difference check of the full pipeline gradient.
    GradCheck(Common),
    /// Dump channel signatures and the K-means grouping.
    Cluster(Common),
    /// Write region maps of test images as graymaps.
    ExportRegions(Common),
    /// Train every ablation mode and compare.
    Ablate(Common),
    /// Train the full model for N in {4, 6, 8, 10, 12}.
    SweepN(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of regions N.
    #[arg(long)]
    regions: Option<usize>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AblationMode>,
    /// Images to export with `export-regions`.
    #[arg(long, default_value_t = 4)]
    count: usize,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

type Outcome = Result<(), Error>;

impl Common {
    fn run_config(&self) -> Result<RunConfig, Error> {
        let mut c = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            c.apply_text(&text)?;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.regions {
            c.model.regions = n;
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if self.out.is_some() {
            c.out.clone_from(&self.out);
        }
        if self.data.is_some() {
            c.data.clone_from(&self.data);
        }
        if self.checkpoint.is_some() {
            c.checkpoint.clone_from(&self.checkpoint);
        }
        c.validate()?;
        Ok(c)
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Error> {
    p.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn load_data(c: &RunConfig) -> Result<Dataset, Error> {
    let data = load_dataset(required(&c.data, "data")?)?;
    if data.config.image_side != c.model.backbone.input_size {
        return Err(Error::Config(format!(
            "dataset images are {}px, model expects {}px",
            data.config.image_side, c.model.backbone.input_size
        )));
    }
    Ok(data)
}

/// Parameters and run config stored in a checkpoint; flags override the mode.
fn load_trained(common: &Common, c: &RunConfig) -> Result<(DragParams, RunConfig), Error> {
    let path = required(&c.checkpoint, "checkpoint")?;
    let (_, meta) = read_checkpoint(path)?;
    let mut stored = RunConfig::from_metadata(&meta)?;
    if let Some(m) = common.mode {
        stored.mode = m;
    }
    let template = DragParams::init(&stored.model, 0)?;
    let (params, _) = load_checkpoint(path, &template)?;
    Ok((params, stored))
}

fn gen_data(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let mut dc = c.dataset.clone();
    if let Some(s) = common.seed {
        dc.seed = s;
    }
    let out = required(&c.out, "out")?;
    let data = generate_dataset(&dc, out)?;
    println!(
        "wrote {} images to {} (train {} / val {} / test {}, private {} / {} / {})",
        data.train.len() + data.val.len() + data.test.len(),
        out.display(),
        data.train.len(),
        data.val.len(),
        data.test.len(),
        data.train.private_count(),
        data.val.private_count(),
        data.test.private_count(),
    );
    Ok(())
}

fn train(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let out = required(&c.out, "out")?;
    fs::create_dir_all(out)?;
    let outcome = run_schedule(&c.schedule()?, &c.model, c.mode, &data, c.seed)?;
    let ckpt = c.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
    save_checkpoint(&outcome.params, &c.metadata(outcome.stage_reached), &ckpt)?;
    write_log(&outcome.log, fs::File::create(out.join("log.csv"))?)?;
    fs::write(out.join("config.txt"), c.to_text())?;
    let val = evaluate(&outcome.params, &c.model, c.mode, &data.val)?;
    let test = evaluate(&outcome.params, &c.model, c.mode, &data.test)?;
    let table = format!(
        "{TABLE_HEADER}\n{}\n{}\n",
        val.table_row(&format!("{}/val", c.mode)),
        test.table_row(&format!("{}/test", c.mode))
    );
    fs::write(out.join("metrics.txt"), &table)?;
    if let Some((stage, epoch, acc)) = outcome.selected {
        println!("selected {stage} epoch {epoch} (val accuracy {acc:.4})");
    }
    print!("{table}");
    println!("checkpoint {}", ckpt.display());
    Ok(())
}

fn eval(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let (params, stored) = load_trained(common, &c)?;
    let report = evaluate(&params, &stored.model, stored.mode, &data.test)?;
    println!("{TABLE_HEADER}\n{}", report.table_row(stored.mode.name()));
    Ok(())
}

/// Returns whether the check passed.
fn grad_check(common: &Common) -> Result<bool, Error> {
    let c = common.run_config()?;
    let mut cfg = grad_check_config();
    if let Some(n) = common.regions {
        cfg.regions = n;
    }
    let seed = common.seed.unwrap_or(c.grad_seed);
    let started = std::time::Instant::now();
    let report = pipeline_grad_check(&cfg, seed, c.grad_batch, c.grad_eps)?;
    let pass = report.max_rel_error < 1e-4;
    println!(
        "B={} N={} C={} H=W={} eps={:e}: max relative error {:.3e} over {} entries ({:.2}s) {}",
        c.grad_batch,
        cfg.regions,
        cfg.channels(),
        cfg.side(),
        c.grad_eps,
        report.max_rel_error,
        report.entries_checked,
        started.elapsed().as_secs_f64(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

fn cluster(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let (params, stored) = load_trained(common, &c)?;
    let regions = common.regions.unwrap_or(stored.model.regions);
    let mut sig = SignatureBuilder::new();
    sig.push(&compute_features(&params, &stored.model, &data.train)?)?;
    let sig = sig.finish()?;
    let (assignment, result) = kmeans_cluster(&sig, regions, stored.seed)?;
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("signatures.txt"), sig.to_text())?;
        fs::write(out.join("assignment.txt"), assignment.to_text())?;
    }
    println!("channels {} regions {regions} wcss {:.6}", sig.channels(), result.wcss);
    for i in 0..regions {
        let members: Vec<String> = assignment
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == i)
            .map(|(ch, _)| ch.to_string())
            .collect();
        println!("region {i}: {}", members.join(" "));
    }
    Ok(())
}

fn export_regions(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let (params, stored) = load_trained(common, &c)?;
    let out = required(&c.out, "out")?;
    let count = common.count.min(data.test.len());
    let idx: Vec<usize> = (0..count).collect();
    let fb = gather(&compute_features(&params, &stored.model, &data.test)?, &idx);
    let mut g = Graph::new();
    let vars = params.bind(&mut g, &[]);
    let x = g.constant(fb);
    let f = forward_from_features(&mut g, x, &vars, &stored.model, stored.mode)?;
    let maps = g.tensor(f.fw);
    let mut written = 0;
    for i in 0..count {
        written += export_region_maps(out, i, &maps.slice_outer(i)?)?.len();
    }
    println!("wrote {written} region maps to {}", out.display());
    Ok(())
}

fn ablate(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let runs = run_ablation(&c.schedule()?, &c.model, &AblationMode::ALL, &data, c.seed)?;
    let mut table = format!("{TABLE_HEADER}\n");
    for (mode, outcome) in &runs {
        let r = evaluate(&outcome.params, &c.model, *mode, &data.test)?;
        table.push_str(&r.table_row(mode.name()));
        table.push('\n');
    }
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("ablation.txt"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn sweep_n(common: &Common) -> Outcome {
    let c = common.run_config()?;
    let data = load_data(&c)?;
    let schedule = c.schedule()?;
    let mut table = format!("{TABLE_HEADER}\n");
    let mut stdout = std::io::stdout();
    writeln!(stdout, "{TABLE_HEADER}")?;
    for n in [4, 6, 8, 10, 12] {
        let mut model = c.model.clone();
        model.regions = n;
        let outcome = run_schedule(&schedule, &model, AblationMode::Full, &data, c.seed)?;
        let row = evaluate(&outcome.params, &model, AblationMode::Full, &data.test)?.table_row(&format!("N={n}"));
        writeln!(stdout, "{row}")?;
        table.push_str(&row);
        table.push('\n');
    }
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("sweep_n.txt"), &table)?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Format { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => match grad_check(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Cluster(a) => cluster(a),
        Command::ExportRegions(a) => export_regions(a),
        Command::Ablate(a) => ablate(a),
        Command::SweepN(a) => sweep_n(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
