//! Command-line front end: query the guidance model, run single episodes,
//! run ablation batches, dump fused maps, and self-verify core numerics.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ippon::config::RunConfig;
use ippon::esdf::{compute_esdf_masks, ESDF_MAX_DISTANCE};
use ippon::grid::GridSpec;
use ippon::guidance::{
    build_prompt, load_table, parse_proximity_response, save_table, PromptTemplate, ProximityTable,
};
use ippon::llm::{query_with_cache, LlmConfig};
use ippon::metrics::{run_batch, BatchReport};
use ippon::sim::{load_scene, run_episode, run_episode_with_map, AblationSet, Scene};
use ippon::voxel_map::{bayes_update, FusionConfig};

#[derive(Parser)]
#[command(name = "ippon", about = "Informative path planning for object-goal navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a proximity prompt for a scene, query the language model
    /// (or its cache), and save the parsed table.
    QueryLlm(QueryLlmArgs),
    /// Run a single episode in one scene.
    Run(RunArgs),
    /// Run the full (scene x seed x ablation) matrix from a config file.
    Batch(BatchArgs),
    /// Run one episode and dump the fused voxel map to a file.
    DumpMap(DumpMapArgs),
    /// Self-check core numerics; exits nonzero on any failure.
    Verify,
}

#[derive(Args)]
struct QueryLlmArgs {
    /// Scene file supplying the scenario and common-object list.
    #[arg(long)]
    scene: PathBuf,
    /// Object of interest; defaults to the scene's goal category.
    #[arg(long)]
    ooi: Option<String>,
    /// Extra context sentence substituted into the prompt.
    #[arg(long)]
    context: Option<String>,
    /// Output table file.
    #[arg(long)]
    out: PathBuf,
    /// Raw-response cache file (created on first online query).
    #[arg(long, default_value = "llm_cache.json")]
    cache: PathBuf,
    /// Never touch the network; fail if the cache has no entry.
    #[arg(long)]
    offline: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Override the goal: boxes of this category become the goal.
    #[arg(long)]
    ooi: Option<String>,
    /// Override the scene's context sentence.
    #[arg(long)]
    context: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Ablation label (full, no_bayes, no_guidance, no_local_sbp,
    /// clearance_hard, no_initial_yaw, no_travel_pitch).
    #[arg(long, default_value = "full")]
    ablate: String,
    /// Proximity table for semantic guidance.
    #[arg(long)]
    table: Option<PathBuf>,
    /// Write per-tick JSON records to this file.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Exit nonzero when the episode fails.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct BatchArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct DumpMapArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "full")]
    ablate: String,
    #[arg(long)]
    table: Option<PathBuf>,
    /// Output map dump file.
    #[arg(long)]
    out: PathBuf,
}

const EXIT_USAGE: u8 = 1;
const EXIT_EPISODE: u8 = 2;
const EXIT_VERIFY: u8 = 3;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap renders --help/--version through the error path too.
            use clap::error::ErrorKind::*;
            let _ = e.print();
            return match e.kind() {
                DisplayHelp | DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::QueryLlm(a) => cmd_query_llm(a),
        Command::Run(a) => cmd_run(a),
        Command::Batch(a) => cmd_batch(a),
        Command::DumpMap(a) => cmd_dump_map(a),
        Command::Verify => Ok(cmd_verify()),
    }
}

fn load_scene_with_overrides(
    path: &Path,
    ooi: Option<&str>,
    context: Option<&str>,
) -> anyhow::Result<Scene> {
    let mut scene = load_scene(path)?;
    if let Some(ooi) = ooi {
        let mut any = false;
        for b in &mut scene.boxes {
            b.goal = b.category == ooi;
            any |= b.goal;
        }
        anyhow::ensure!(any, "no box of category {ooi:?} in {}", path.display());
    }
    if let Some(ctx) = context {
        scene.context = Some(ctx.to_string());
    }
    scene.validate()?;
    Ok(scene)
}

fn cmd_query_llm(a: QueryLlmArgs) -> anyhow::Result<ExitCode> {
    let scene = load_scene(&a.scene)?;
    let ooi = match a.ooi {
        Some(o) => o,
        None => scene.goal_category().ok_or_else(|| anyhow::anyhow!("scene has no goal box"))?,
    };
    let common = scene.common_categories();
    let context = a.context.as_deref().or(scene.context.as_deref());
    let template = PromptTemplate::bundled();
    let (prompt, warnings) = build_prompt(&template, &ooi, &common, &scene.scenario, context);
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let cfg = LlmConfig { offline: a.offline, ..LlmConfig::default() };
    let response = query_with_cache(&cfg, &prompt, &a.cache)?;
    let parsed = parse_proximity_response(&response, &common, &ooi, context)?;
    for w in &parsed.warnings {
        eprintln!("warning: {w}");
    }
    save_table(&parsed.table, &a.out)?;
    println!("wrote {} entries to {}", parsed.table.entries.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn load_table_opt(path: Option<&Path>) -> anyhow::Result<Option<ProximityTable>> {
    Ok(match path {
        Some(p) => Some(load_table(p)?),
        None => None,
    })
}

fn cmd_run(a: RunArgs) -> anyhow::Result<ExitCode> {
    let scene = load_scene_with_overrides(&a.scene, a.ooi.as_deref(), a.context.as_deref())?;
    let abl = AblationSet::from_label(&a.ablate)
        .ok_or_else(|| anyhow::anyhow!("unknown ablation label {:?}", a.ablate))?;
    let table = load_table_opt(a.table.as_deref())?;
    let run_cfg = RunConfig::default();
    let mut ecfg = run_cfg.episode_config(a.seed);
    ecfg.noise.seed = a.seed;

    let mut log_file = match &a.log {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let result = run_episode(
        &scene,
        table.as_ref(),
        &abl,
        &ecfg,
        log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
    );
    println!("{}", serde_json::to_string_pretty(&result)?);
    if a.strict && !result.success {
        return Ok(ExitCode::from(EXIT_EPISODE));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_batch(a: BatchArgs) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(&a.config)?;
    anyhow::ensure!(!cfg.batch.scenes.is_empty(), "config lists no scenes");
    let mut scenes = Vec::new();
    for p in &cfg.batch.scenes {
        let full = cfg.resolve(&a.config, p);
        let scene = load_scene(&full)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        scenes.push((name, scene));
    }
    let table = load_table_opt(cfg.batch.table.as_ref().map(|p| cfg.resolve(&a.config, p)).as_deref())?;
    let ecfg = cfg.episode_config(0);

    let mut reports: Vec<BatchReport> = Vec::new();
    for label in &cfg.batch.ablations {
        let report = run_batch(label, &scenes, &cfg.batch.seeds, table.as_ref(), &ecfg)?;
        println!("{}", report.table());
        reports.push(report);
    }
    if let Some(out) = &cfg.batch.report {
        let full = cfg.resolve(&a.config, out);
        let body = serde_json::to_string_pretty(&reports)?;
        std::fs::write(&full, body)?;
        println!("wrote report to {}", full.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_dump_map(a: DumpMapArgs) -> anyhow::Result<ExitCode> {
    let scene = load_scene(&a.scene)?;
    let abl = AblationSet::from_label(&a.ablate)
        .ok_or_else(|| anyhow::anyhow!("unknown ablation label {:?}", a.ablate))?;
    let table = load_table_opt(a.table.as_deref())?;
    let run_cfg = RunConfig::default();
    let mut ecfg = run_cfg.episode_config(a.seed);
    ecfg.noise.seed = a.seed;
    let (result, map) = run_episode_with_map(&scene, table.as_ref(), &abl, &ecfg, None);
    let f = BufWriter::new(File::create(&a.out)?);
    map.dump(f)?;
    println!(
        "episode {} ({} steps); map dumped to {}",
        if result.success { "succeeded" } else { "failed" },
        result.steps,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Quick independent spot checks of the numerics the planner relies on:
/// Bayes fusion order-independence and ESDF accuracy against brute force.
fn cmd_verify() -> ExitCode {
    let mut failures = 0usize;

    // Bayesian fusion must commute over observation order. The posterior
    // clamp is saturating, so exact order-independence holds only while
    // the log-odds trajectory stays inside the clamp band; the sampled
    // ranges below guarantee that.
    let cfg = FusionConfig::desk_scale(8);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let mut obs: Vec<f64> = (0..5).map(|_| rng.gen_range(0.05..0.40)).collect();
        let fuse = |seq: &[f64]| {
            seq.iter().fold(0.0, |l, &q| {
                bayes_update(l, q, cfg.prior, cfg.clamp_eps).expect("valid observation")
            })
        };
        let forward = fuse(&obs);
        obs.reverse();
        let backward = fuse(&obs);
        if (forward - backward).abs() > 1e-9 {
            failures += 1;
        }
    }
    report("bayes fusion commutes over observation order", failures == 0);

    // ESDF distances must match brute force within one voxel diagonal.
    let mut esdf_bad = 0usize;
    for trial in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let grid = GridSpec::new(nalgebra::Point3::origin(), 0.1, [16, 16, 16]);
        let occ: Vec<bool> = (0..grid.voxel_count()).map(|_| rng.gen_bool(0.05)).collect();
        let obs = vec![true; grid.voxel_count()];
        let esdf = compute_esdf_masks(&grid, &occ, &obs);
        let occupied: Vec<[usize; 3]> = (0..grid.voxel_count())
            .filter(|&i| occ[i])
            .map(|i| grid.from_linear(i))
            .collect();
        let tol = grid.voxel_diagonal();
        for lin in (0..grid.voxel_count()).step_by(17) {
            if occ[lin] {
                continue;
            }
            let idx = grid.from_linear(lin);
            let got = esdf.at(idx).unwrap_or(ESDF_MAX_DISTANCE);
            let want = brute_force_distance(&grid, &occupied, idx);
            if (got - want).abs() > tol {
                esdf_bad += 1;
            }
        }
    }
    report("esdf matches brute-force distance", esdf_bad == 0);
    if failures > 0 || esdf_bad > 0 {
        return ExitCode::from(EXIT_VERIFY);
    }
    ExitCode::SUCCESS
}

fn brute_force_distance(
    grid: &ippon::grid::GridSpec,
    occupied: &[[usize; 3]],
    idx: [usize; 3],
) -> f64 {
    let c = grid.voxel_center(idx);
    occupied
        .iter()
        .map(|&o| (grid.voxel_center(o) - c).norm())
        .fold(ESDF_MAX_DISTANCE, f64::min)
}

fn report(name: &str, ok: bool) {
    println!("{}: {}", name, if ok { "ok" } else { "FAILED" });
}
