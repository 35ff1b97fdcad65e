//! Operator entry points: one binary with subcommands for scene generation,
//! knowledge-base construction, retrieval, navigation, paired evaluation,
//! SVG rendering, and embedder training.
//!
//! All tunables live in a single TOML [`RunConfig`]; individual flags
//! override individual values. Every command derives its randomness from the
//! configured root seed, so a fixed config plus fixed flags reproduces the
//! primary output byte for byte. Tables are tab-separated with a header row.
//! Evaluation fans episodes out across worker threads; every other command is
//! single-threaded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::embed::{embed_trajectory, EmbedError, ProjectionParams, TrainConfig};
use crate::geom::Point;
use crate::gridmap::{
    extract_frontiers, ChannelId, GridError, Mask, PolarSampler, SemanticMap,
};
use crate::nav::HeuristicPlanner;
use crate::sim::{
    build_kb_over_scenes, evaluate_paired_threaded, generate_scene, run_episode, sample_start,
    EpisodeConfig, Scene, SceneParams, SimError,
};
use crate::store::{parse_group, Group, GroupId, StoreConfig, StoreError, TrajRagStore};
use crate::textio::TextError;
use crate::topo::{
    detect_candidate_nodes, skeletonize, suppress_nodes, TopoConfig, TopoError,
    TopoPolarTrajectory,
};

// ============================================================================
// Errors and exit codes
// ============================================================================

/// Failures surfaced to the operator, sorted by exit code: 1 for unusable
/// invocations, 2 for unreadable or malformed inputs, 3 for violated
/// internal invariants.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> CliError {
        match e {
            StoreError::Invariant(_) => CliError::Internal(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> CliError {
        match e {
            SimError::Internal(_) => CliError::Internal(e.to_string()),
            SimError::InfeasibleParams(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<GridError> for CliError {
    fn from(e: GridError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<TopoError> for CliError {
    fn from(e: TopoError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<EmbedError> for CliError {
    fn from(e: EmbedError) -> CliError {
        CliError::Data(e.to_string())
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> CliError {
        CliError::Data(e.to_string())
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

// ============================================================================
// Run configuration
// ============================================================================

/// Every tunable in one declarative document. Defaults mirror the library
/// defaults; unknown keys are rejected so typos cannot silently fall back.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; scene batches, walk schedules, and episode seeds all
    /// derive from it.
    pub seed: u64,
    pub scene: SceneSection,
    pub topo: TopoSection,
    pub store: StoreSection,
    pub train: TrainSection,
    pub episode: EpisodeSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scene: SceneSection::default(),
            topo: TopoSection::default(),
            store: StoreSection::default(),
            train: TrainSection::default(),
            episode: EpisodeSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub width_m: f64,
    pub height_m: f64,
    pub resolution: f64,
    pub rooms: u32,
    pub extra_corridors: u32,
    pub objects_per_room: u32,
    pub categories: Vec<String>,
}

impl Default for SceneSection {
    fn default() -> Self {
        let p = SceneParams::default();
        SceneSection {
            width_m: p.width_m,
            height_m: p.height_m,
            resolution: p.resolution,
            rooms: p.rooms,
            extra_corridors: p.extra_corridors,
            objects_per_room: p.objects_per_room,
            categories: p.categories,
        }
    }
}

impl SceneSection {
    pub fn params(&self) -> SceneParams {
        SceneParams {
            width_m: self.width_m,
            height_m: self.height_m,
            resolution: self.resolution,
            rooms: self.rooms,
            extra_corridors: self.extra_corridors,
            objects_per_room: self.objects_per_room,
            categories: self.categories.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopoSection {
    pub d_min: f64,
    pub sample_range: f64,
    pub dilation_radius: u32,
}

impl Default for TopoSection {
    fn default() -> Self {
        let c = TopoConfig::default();
        TopoSection {
            d_min: c.d_min,
            sample_range: c.sample_range,
            dilation_radius: c.dilation_radius,
        }
    }
}

impl TopoSection {
    pub fn config(&self) -> TopoConfig {
        TopoConfig {
            d_min: self.d_min,
            sample_range: self.sample_range,
            dilation_radius: self.dilation_radius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StoreSection {
    pub eps_merge: f64,
    pub knn_k: usize,
    pub ransac_iters: u32,
    pub inlier_tol: f64,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for StoreSection {
    fn default() -> Self {
        let c = StoreConfig::default();
        StoreSection {
            eps_merge: c.eps_merge,
            knn_k: c.knn_k,
            ransac_iters: c.ransac_iters,
            inlier_tol: c.inlier_tol,
            min_inlier_ratio: c.min_inlier_ratio,
            seed: c.seed,
        }
    }
}

impl StoreSection {
    pub fn config(&self) -> StoreConfig {
        StoreConfig {
            eps_merge: self.eps_merge,
            knn_k: self.knn_k,
            ransac_iters: self.ransac_iters,
            inlier_tol: self.inlier_tol,
            min_inlier_ratio: self.min_inlier_ratio,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub tau: f64,
    pub d_out: usize,
    pub negatives_per_anchor: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        TrainSection {
            epochs: c.epochs,
            lr: c.lr,
            tau: c.tau,
            d_out: c.d_out,
            negatives_per_anchor: c.negatives_per_anchor,
            seed: c.seed,
        }
    }
}

impl TrainSection {
    pub fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            lr: self.lr,
            tau: self.tau,
            d_out: self.d_out,
            negatives_per_anchor: self.negatives_per_anchor,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSection {
    pub budget_steps: usize,
    pub success_radius: f64,
    pub observe_range: f64,
    pub fov_deg: f64,
    pub frontier_min_size: usize,
    pub top_m: usize,
    pub top_k: usize,
    pub rebuild_every: usize,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let c = EpisodeConfig::default();
        EpisodeSection {
            budget_steps: c.budget_steps,
            success_radius: c.success_radius,
            observe_range: c.observe_range,
            fov_deg: c.fov_deg,
            frontier_min_size: c.frontier_min_size,
            top_m: c.top_m,
            top_k: c.top_k,
            rebuild_every: c.rebuild_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Paired episodes per evaluation run.
    pub episodes: usize,
    /// Worker threads evaluation fans out across.
    pub threads: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { episodes: 20, threads: 4 }
    }
}

impl RunConfig {
    /// Reads and validates a config file; no path means built-in defaults.
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Rejects values no command could run with. Deep feasibility (such as
    /// whether the requested rooms fit the map) stays with the generators.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: &str| Err(CliError::Usage(format!("config: {msg}")));
        let s = &self.scene;
        if !(s.width_m > 0.0) || !(s.height_m > 0.0) {
            return bad("scene dimensions must be positive");
        }
        if !(s.resolution > 0.0) {
            return bad("scene resolution must be positive");
        }
        if s.rooms == 0 {
            return bad("scene needs at least one room");
        }
        if s.categories.is_empty() {
            return bad("scene needs at least one category");
        }
        for name in &s.categories {
            if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
                return bad("category names must be non-empty and contain no whitespace");
            }
        }
        for (i, a) in s.categories.iter().enumerate() {
            if s.categories[..i].contains(a) {
                return bad("category names must be unique");
            }
        }
        if !(self.topo.d_min > 0.0) || !(self.topo.sample_range > 0.0) {
            return bad("topo distances must be positive");
        }
        let st = &self.store;
        if !(st.eps_merge > 0.0) || !(st.inlier_tol > 0.0) {
            return bad("store distances must be positive");
        }
        if st.knn_k == 0 || st.ransac_iters == 0 {
            return bad("store knn_k and ransac_iters must be at least 1");
        }
        if !(st.min_inlier_ratio > 0.0 && st.min_inlier_ratio <= 1.0) {
            return bad("store min_inlier_ratio must be in (0, 1]");
        }
        let t = &self.train;
        if !(t.lr > 0.0) || !(t.tau > 0.0) {
            return bad("train lr and tau must be positive");
        }
        if t.d_out == 0 || t.negatives_per_anchor == 0 {
            return bad("train d_out and negatives_per_anchor must be at least 1");
        }
        let e = &self.episode;
        if e.budget_steps == 0 || e.frontier_min_size == 0 || e.rebuild_every == 0 {
            return bad("episode counters must be at least 1");
        }
        if !(e.success_radius > 0.0) || !(e.observe_range > 0.0) {
            return bad("episode radii must be positive");
        }
        if !(e.fov_deg > 0.0 && e.fov_deg <= 360.0) {
            return bad("episode fov_deg must be in (0, 360]");
        }
        if e.top_m == 0 || e.top_k == 0 {
            return bad("episode top_m and top_k must be at least 1");
        }
        if self.eval.episodes == 0 || self.eval.threads == 0 {
            return bad("eval episodes and threads must be at least 1");
        }
        Ok(())
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            budget_steps: self.episode.budget_steps,
            success_radius: self.episode.success_radius,
            observe_range: self.episode.observe_range,
            fov_deg: self.episode.fov_deg,
            frontier_min_size: self.episode.frontier_min_size,
            top_m: self.episode.top_m,
            top_k: self.episode.top_k,
            rebuild_every: self.episode.rebuild_every,
            topo: self.topo.config(),
        }
    }
}

// ============================================================================
// Command line
// ============================================================================

#[derive(Debug, Parser)]
#[command(
    name = "trajrag",
    version,
    about = "Topological-polar trajectory memory for goal-directed navigation",
    propagate_version = true
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override the configured root seed.
    #[arg(long, global = true, value_name = "SEED")]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate procedural scenes and write one text file per seed.
    GenScenes(GenScenesArgs),
    /// Walk scripted tours over scene files and save the resulting store.
    BuildKb(BuildKbArgs),
    /// Rank stored groups, then chunks, against a query trajectory.
    Retrieve(RetrieveArgs),
    /// Run experience-guided episodes and print per-episode results.
    Navigate(NavigateArgs),
    /// Paired guided-versus-baseline evaluation over worker threads.
    Eval(EvalArgs),
    /// Draw a scene, map, trajectory, or group summary as an SVG file.
    Render(RenderArgs),
    /// Retrain the fine-index projection stored in a knowledge base.
    TrainEmbedder(TrainEmbedderArgs),
}

#[derive(Debug, Args)]
pub struct GenScenesArgs {
    /// Output directory for scene files.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Explicit scene seeds; when omitted, `--count` consecutive seeds
    /// starting at the root seed are used.
    #[arg(long = "scene-seed", value_name = "SEED")]
    pub scene_seeds: Vec<u64>,
    /// Number of scenes when no explicit seeds are given.
    #[arg(long, default_value_t = 5, value_name = "N")]
    pub count: usize,
}

#[derive(Debug, Args)]
pub struct BuildKbArgs {
    /// Directory of scene text files; every `*.txt` is read in name order.
    #[arg(long, value_name = "DIR")]
    pub scenes: PathBuf,
    /// Scripted walks per scene; goal categories cycle walk by walk.
    #[arg(long, value_name = "N")]
    pub episodes_per_scene: usize,
    /// Output directory for the stored knowledge base.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    /// Knowledge-base directory.
    #[arg(long, value_name = "DIR")]
    pub kb: PathBuf,
    /// Query trajectory file.
    #[arg(long, value_name = "FILE")]
    pub query: PathBuf,
    /// Groups kept by the coarse stage (defaults to the config value).
    #[arg(long, value_name = "N")]
    pub top_m: Option<usize>,
    /// Chunks kept by the fine stage (defaults to the config value).
    #[arg(long, value_name = "N")]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NavigateArgs {
    /// Knowledge-base directory.
    #[arg(long, value_name = "DIR")]
    pub kb: PathBuf,
    /// Scene seeds; one episode runs per seed and goal combination.
    #[arg(long = "scene-seed", required = true, value_name = "SEED")]
    pub scene_seeds: Vec<u64>,
    /// Goal category names; must exist in the knowledge base.
    #[arg(long = "goal", required = true, value_name = "NAME")]
    pub goals: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Knowledge-base directory.
    #[arg(long, value_name = "DIR")]
    pub kb: PathBuf,
    /// Scene seeds episodes cycle over.
    #[arg(long = "scene-seed", required = true, value_name = "SEED")]
    pub scene_seeds: Vec<u64>,
    /// Goal category names each episode draws from; must exist in the store.
    #[arg(long = "goal", required = true, value_name = "NAME")]
    pub goals: Vec<String>,
    /// Paired episodes to run (defaults to the config value).
    #[arg(long, value_name = "N")]
    pub episodes: Option<usize>,
    /// Worker threads (defaults to the config value).
    #[arg(long, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Input file: a scene, semantic map, trajectory, or group summary.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Output SVG path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainEmbedderArgs {
    /// Knowledge-base directory; trained parameters are saved back into it.
    #[arg(long, value_name = "DIR")]
    pub kb: PathBuf,
    /// Training epochs (defaults to the config value).
    #[arg(long, value_name = "N")]
    pub epochs: Option<usize>,
    /// Learning rate (defaults to the config value).
    #[arg(long, value_name = "RATE")]
    pub lr: Option<f64>,
    /// Softmax temperature (defaults to the config value).
    #[arg(long, value_name = "TAU")]
    pub tau: Option<f64>,
    /// Training seed (defaults to the config value).
    #[arg(long, value_name = "SEED")]
    pub train_seed: Option<u64>,
}

/// Parses the process arguments, runs the selected command, and maps the
/// outcome to an exit code: 0 success, 1 usage, 2 data error, 3 internal.
pub fn run() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Loads the config, applies the root-seed override, and dispatches. Returns
/// the command's stdout text.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Command::GenScenes(a) => cmd_gen_scenes(&cfg, a),
        Command::BuildKb(a) => cmd_build_kb(&cfg, a),
        Command::Retrieve(a) => cmd_retrieve(&cfg, a),
        Command::Navigate(a) => cmd_navigate(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Render(a) => cmd_render(&cfg, a),
        Command::TrainEmbedder(a) => cmd_train_embedder(&cfg, a),
    }
}

// ============================================================================
// Commands
// ============================================================================

fn cmd_gen_scenes(cfg: &RunConfig, args: &GenScenesArgs) -> Result<String, CliError> {
    let seeds: Vec<u64> = if args.scene_seeds.is_empty() {
        (0..args.count as u64).map(|i| cfg.seed.wrapping_add(i)).collect()
    } else {
        args.scene_seeds.clone()
    };
    if seeds.is_empty() {
        return Err(CliError::Usage(
            "no scenes requested: give --scene-seed or a positive --count".into(),
        ));
    }
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    let params = cfg.scene.params();
    let mut out = String::from("seed\tfile\twidth\theight\trooms\tobjects\n");
    for &seed in &seeds {
        let scene = generate_scene(seed, &params)?;
        let name = format!("scene_{seed}.txt");
        write_file(&args.out.join(&name), &scene.to_text())?;
        writeln!(
            out,
            "{seed}\t{name}\t{}\t{}\t{}\t{}",
            scene.map.width(),
            scene.map.height(),
            scene.room_centers.len(),
            scene.objects.len()
        )
        .unwrap();
    }
    Ok(out)
}

fn cmd_build_kb(cfg: &RunConfig, args: &BuildKbArgs) -> Result<String, CliError> {
    if args.episodes_per_scene == 0 {
        return Err(CliError::Usage("--episodes-per-scene must be at least 1".into()));
    }
    let entries = fs::read_dir(&args.scenes)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.scenes.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no scene files (*.txt) in {}",
            args.scenes.display()
        )));
    }
    let mut scenes = Vec::with_capacity(files.len());
    for f in &files {
        let scene = Scene::from_text(&read_file(f)?)
            .map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?;
        scenes.push(scene);
    }
    let categories = scenes[0].map.categories().to_vec();
    for (f, s) in files.iter().zip(&scenes) {
        if s.map.categories() != categories.as_slice() {
            return Err(CliError::Data(format!(
                "{}: scene categories differ from {}",
                f.display(),
                files[0].display()
            )));
        }
    }
    let params = ProjectionParams::random(categories.len(), cfg.train.d_out, cfg.train.seed);
    let mut store = TrajRagStore::new(categories, params, cfg.store.config())?;
    let report = build_kb_over_scenes(
        &mut store,
        &scenes,
        args.episodes_per_scene,
        cfg.seed,
        &cfg.episode_config(),
    )?;
    store.save(&args.out)?;
    let mut out =
        String::from("walks\tinserted\tmerged\tdiscarded\tsuperseded\tskipped\tgroups\tchunks\n");
    writeln!(
        out,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
        report.walks_attempted,
        report.inserted_new,
        report.merged,
        report.discarded,
        report.superseded,
        report.skipped,
        store.groups().len(),
        store.chunk_count()
    )
    .unwrap();
    Ok(out)
}

fn cmd_retrieve(cfg: &RunConfig, args: &RetrieveArgs) -> Result<String, CliError> {
    let top_m = args.top_m.unwrap_or(cfg.episode.top_m);
    let top_k = args.top_k.unwrap_or(cfg.episode.top_k);
    if top_m == 0 || top_k == 0 {
        return Err(CliError::Usage("--top-m and --top-k must be at least 1".into()));
    }
    let store = TrajRagStore::load(&args.kb)?;
    let query = TopoPolarTrajectory::from_text(&read_file(&args.query)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", args.query.display())))?;
    let ranked_groups = store.coarse_retrieve(&query, top_m)?;
    let embedding = embed_trajectory(&query, store.params())?;
    let group_ids: Vec<GroupId> = ranked_groups.iter().map(|(g, _)| *g).collect();
    let ranked_chunks = store.fine_retrieve(&group_ids, &embedding, top_k)?;

    let mut owner = BTreeMap::new();
    for group in store.groups() {
        for chunk in group.chunk_ids() {
            owner.insert(chunk, group.id);
        }
    }
    let mut out = String::from("rank\tgroup\tscore\tmembers\tsummary_nodes\n");
    for (rank, (gid, score)) in ranked_groups.iter().enumerate() {
        let group = store
            .groups()
            .iter()
            .find(|g| g.id == *gid)
            .ok_or_else(|| CliError::Internal(format!("ranked group {gid} missing")))?;
        writeln!(
            out,
            "{}\t{}\t{:.4}\t{}\t{}",
            rank + 1,
            gid,
            score,
            group.members.len(),
            group.summary.nodes.len()
        )
        .unwrap();
    }
    out.push('\n');
    out.push_str("rank\tchunk\tgroup\tscore\tdescription\n");
    for (rank, (cid, score)) in ranked_chunks.iter().enumerate() {
        let chunk = store
            .chunk(*cid)
            .ok_or_else(|| CliError::Internal(format!("ranked chunk {cid} missing")))?;
        let group = owner
            .get(cid)
            .ok_or_else(|| CliError::Internal(format!("chunk {cid} belongs to no group")))?;
        writeln!(out, "{}\t{}\t{}\t{:.4}\t{}", rank + 1, cid, group, score, chunk.description)
            .unwrap();
    }
    Ok(out)
}

/// Maps goal names onto the store's category indices, or explains what the
/// store actually has.
fn resolve_goals(names: &[String], categories: &[String]) -> Result<Vec<u16>, CliError> {
    if names.is_empty() {
        return Err(CliError::Usage("at least one --goal is required".into()));
    }
    names
        .iter()
        .map(|name| {
            categories.iter().position(|c| c == name).map(|i| i as u16).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown goal category `{name}`; the knowledge base has: {}",
                    categories.join(", ")
                ))
            })
        })
        .collect()
}

/// The config's scene categories must match the store's: goal indices and
/// sector labels are only meaningful over a shared alphabet.
fn check_categories(cfg: &RunConfig, store: &TrajRagStore) -> Result<(), CliError> {
    if cfg.scene.categories != store.categories() {
        return Err(CliError::Usage(format!(
            "config scene categories [{}] differ from the knowledge base's [{}]",
            cfg.scene.categories.join(", "),
            store.categories().join(", ")
        )));
    }
    Ok(())
}

fn cmd_navigate(cfg: &RunConfig, args: &NavigateArgs) -> Result<String, CliError> {
    let store = TrajRagStore::load(&args.kb)?;
    check_categories(cfg, &store)?;
    let goal_ids = resolve_goals(&args.goals, store.categories())?;
    let params = cfg.scene.params();
    let ep_cfg = cfg.episode_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    let mut out =
        String::from("scene\tgoal\tepisode_seed\tsuccess\tsteps\tpath_m\tshortest_m\tspl\n");
    for &scene_seed in &args.scene_seeds {
        let scene = generate_scene(scene_seed, &params)?;
        for (&goal, name) in goal_ids.iter().zip(&args.goals) {
            let episode_seed: u64 = rng.gen();
            let mut episode_rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let start = sample_start(
                &scene,
                &mut episode_rng,
                &scene.goal_cells(goal),
                ep_cfg.success_radius + 0.5,
            )?;
            let mut planner = HeuristicPlanner;
            let r = run_episode(&scene, start, goal, &mut planner, &store, &ep_cfg)?;
            let spl = if r.success {
                r.shortest_length / r.path_length.max(r.shortest_length)
            } else {
                0.0
            };
            writeln!(
                out,
                "{scene_seed}\t{name}\t{episode_seed}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}",
                r.success, r.steps, r.path_length, r.shortest_length, spl
            )
            .unwrap();
            results.push(r);
        }
    }
    let m = crate::sim::compute_metrics(&results)?;
    out.push('\n');
    out.push_str("episodes\tsuccesses\tsuccess_rate\tspl\tmean_path_m\n");
    writeln!(
        out,
        "{}\t{}\t{:.3}\t{:.3}\t{:.3}",
        m.episodes, m.successes, m.success_rate, m.spl, m.mean_path_length
    )
    .unwrap();
    Ok(out)
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<String, CliError> {
    let episodes = args.episodes.unwrap_or(cfg.eval.episodes);
    let threads = args.threads.unwrap_or(cfg.eval.threads);
    if episodes == 0 || threads == 0 {
        return Err(CliError::Usage("--episodes and --threads must be at least 1".into()));
    }
    let store = TrajRagStore::load(&args.kb)?;
    check_categories(cfg, &store)?;
    let goal_ids = resolve_goals(&args.goals, store.categories())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let episode_seeds: Vec<u64> = (0..episodes).map(|_| rng.gen()).collect();
    let outcome = evaluate_paired_threaded(
        &store,
        &args.scene_seeds,
        &cfg.scene.params(),
        &episode_seeds,
        &goal_ids,
        &cfg.episode_config(),
        threads,
    )?;
    let mut out = String::from(
        "episode\tepisode_seed\tscene\tgoal\tguided_success\tguided_steps\tguided_path_m\t\
         baseline_success\tbaseline_steps\tbaseline_path_m\tshortest_m\n",
    );
    for (i, setup) in outcome.setups.iter().enumerate() {
        let g = &outcome.guided_results[i];
        let b = &outcome.baseline_results[i];
        writeln!(
            out,
            "{i}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t{}\t{}\t{:.3}\t{:.3}",
            setup.episode_seed,
            setup.scene_seed,
            store.categories()[setup.goal as usize],
            g.success,
            g.steps,
            g.path_length,
            b.success,
            b.steps,
            b.path_length,
            g.shortest_length
        )
        .unwrap();
    }
    out.push('\n');
    out.push_str("planner\tepisodes\tsuccesses\tsuccess_rate\tspl\tmean_path_m\n");
    for (name, m) in [("guided", &outcome.guided), ("random-frontier", &outcome.baseline)] {
        writeln!(
            out,
            "{name}\t{}\t{}\t{:.3}\t{:.3}\t{:.3}",
            m.episodes, m.successes, m.success_rate, m.spl, m.mean_path_length
        )
        .unwrap();
    }
    Ok(out)
}

fn cmd_render(cfg: &RunConfig, args: &RenderArgs) -> Result<String, CliError> {
    let text = read_file(&args.input)?;
    let svg = render_text(cfg, &text)
        .map_err(|e| match e {
            CliError::Data(msg) => CliError::Data(format!("{}: {msg}", args.input.display())),
            other => other,
        })?;
    write_file(&args.out, &svg)?;
    Ok(String::new())
}

fn cmd_train_embedder(cfg: &RunConfig, args: &TrainEmbedderArgs) -> Result<String, CliError> {
    let mut store = TrajRagStore::load(&args.kb)?;
    if store.groups().len() < 2 {
        return Err(CliError::Data(format!(
            "training needs at least two groups; the store at {} has {}",
            args.kb.display(),
            store.groups().len()
        )));
    }
    let mut tc = cfg.train.config();
    if let Some(epochs) = args.epochs {
        tc.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        if !(lr > 0.0) {
            return Err(CliError::Usage("--lr must be positive".into()));
        }
        tc.lr = lr;
    }
    if let Some(tau) = args.tau {
        if !(tau > 0.0) {
            return Err(CliError::Usage("--tau must be positive".into()));
        }
        tc.tau = tau;
    }
    if let Some(seed) = args.train_seed {
        tc.seed = seed;
    }
    let report = store.retrain_projection(&tc)?;
    store.save(&args.kb)?;
    let mut out = String::from("groups\tchunks\tepochs\tinitial_loss\tfinal_loss\n");
    writeln!(
        out,
        "{}\t{}\t{}\t{:.4}\t{:.4}",
        store.groups().len(),
        store.chunk_count(),
        tc.epochs,
        report.initial_loss,
        report.final_loss
    )
    .unwrap();
    Ok(out)
}

// ============================================================================
// SVG rendering
// ============================================================================

const CELL_PX: f64 = 6.0;
const MARGIN_PX: f64 = 12.0;
const WORLD_PX_PER_M: f64 = 40.0;

const UNEXPLORED_FILL: &str = "#d9d9d9";
const FREE_FILL: &str = "#ffffff";
const OBSTACLE_FILL: &str = "#3d3d3d";
const SKELETON_FILL: &str = "#9ecae1";
const NODE_FILL: &str = "#d62728";
const EDGE_STROKE: &str = "#7f7f7f";
const ARROW_STROKE: &str = "#1f77b4";
const FRONTIER_FILL: &str = "#c7e9c0";
const FRONTIER_STROKE: &str = "#2ca02c";

/// Category `c` fills with color `c mod 12`.
const CATEGORY_FILLS: [&str; 12] = [
    "#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#b15928", "#00ced1", "#f781bf",
    "#66c2a5", "#fc8d62", "#8da0cb", "#e78ac3",
];

fn escape_text(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Deterministic string-built SVG: identical drawing calls yield identical
/// bytes.
struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    fn new(width: f64, height: f64) -> Svg {
        Svg { width, height, body: String::new() }
    }

    fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        writeln!(
            self.body,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{h:.2}\" fill=\"{fill}\"/>"
        )
        .unwrap();
    }

    fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str, class: &str) {
        let class_attr =
            if class.is_empty() { String::new() } else { format!(" class=\"{class}\"") };
        writeln!(
            self.body,
            "<circle{class_attr} cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{r:.2}\" fill=\"{fill}\"/>"
        )
        .unwrap();
    }

    fn ring(&mut self, cx: f64, cy: f64, r: f64, stroke: &str, class: &str) {
        let class_attr =
            if class.is_empty() { String::new() } else { format!(" class=\"{class}\"") };
        writeln!(
            self.body,
            "<circle{class_attr} cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{r:.2}\" fill=\"none\" \
             stroke=\"{stroke}\" stroke-width=\"1.5\"/>"
        )
        .unwrap();
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, width: f64, class: &str) {
        let class_attr =
            if class.is_empty() { String::new() } else { format!(" class=\"{class}\"") };
        writeln!(
            self.body,
            "<line{class_attr} x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"{stroke}\" stroke-width=\"{width:.2}\"/>"
        )
        .unwrap();
    }

    fn arrow(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) {
        writeln!(
            self.body,
            "<line class=\"arrow\" x1=\"{x1:.2}\" y1=\"{y1:.2}\" x2=\"{x2:.2}\" y2=\"{y2:.2}\" \
             stroke=\"{ARROW_STROKE}\" stroke-width=\"2.00\" marker-end=\"url(#arrow)\"/>"
        )
        .unwrap();
    }

    fn text(&mut self, x: f64, y: f64, size: f64, s: &str) {
        writeln!(
            self.body,
            "<text x=\"{x:.2}\" y=\"{y:.2}\" font-family=\"monospace\" font-size=\"{size:.0}\">{}</text>",
            escape_text(s)
        )
        .unwrap();
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
             viewBox=\"0 0 {w:.2} {h:.2}\">\n<defs>\n<marker id=\"arrow\" viewBox=\"0 0 10 10\" \
             refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" \
             orient=\"auto-start-reverse\">\n<path d=\"M 0 0 L 10 5 L 0 10 z\" \
             fill=\"{ARROW_STROKE}\"/>\n</marker>\n</defs>\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

/// Dispatches on the input's first line: scenes and maps get the full grid
/// drawing, trajectories get node-and-arrow plots, group files get their
/// summary graph.
fn render_text(cfg: &RunConfig, text: &str) -> Result<String, CliError> {
    let header = text.lines().next().unwrap_or("").trim();
    match header {
        "semmap v1" => Ok(render_map_svg(&SemanticMap::from_text(text)?, cfg)?),
        "scene v1" => Ok(render_map_svg(&Scene::from_text(text)?.map, cfg)?),
        "topotraj v1" => Ok(render_trajectory_svg(&TopoPolarTrajectory::from_text(text)?)),
        "group v1" => Ok(render_group_svg(&parse_group(text)?)?),
        other => Err(CliError::Data(format!(
            "unrecognized input header `{other}`; expected one of semmap v1, scene v1, \
             topotraj v1, group v1"
        ))),
    }
}

/// World point to pixel center within a map drawing. The map's y axis points
/// up; SVG's points down.
fn world_to_px(map: &SemanticMap, p: Point) -> (f64, f64) {
    let fx = (p.x - map.origin().x) / map.resolution();
    let fy = (p.y - map.origin().y) / map.resolution();
    let px = MARGIN_PX + fx * CELL_PX + CELL_PX / 2.0;
    let py = MARGIN_PX + (map.height() as f64 - 1.0 - fy) * CELL_PX + CELL_PX / 2.0;
    (px, py)
}

fn render_map_svg(map: &SemanticMap, cfg: &RunConfig) -> Result<String, CliError> {
    let w = map.width() as i32;
    let h = map.height() as i32;
    let mut svg = Svg::new(
        2.0 * MARGIN_PX + w as f64 * CELL_PX,
        2.0 * MARGIN_PX + h as f64 * CELL_PX,
    );
    svg.rect(0.0, 0.0, svg.width, svg.height, UNEXPLORED_FILL);

    let semantics: Vec<&Mask> = (0..map.categories().len())
        .map(|c| map.channel(ChannelId::Semantic(c as u16)))
        .collect::<Result<_, _>>()?;
    let cell_fill = |x: i32, y: i32| -> Option<&'static str> {
        for (c, mask) in semantics.iter().enumerate() {
            if mask.get(x, y) {
                return Some(CATEGORY_FILLS[c % CATEGORY_FILLS.len()]);
            }
        }
        if map.is_obstacle(x, y) {
            Some(OBSTACLE_FILL)
        } else if map.is_explored(x, y) {
            Some(FREE_FILL)
        } else {
            None
        }
    };
    for y in 0..h {
        let py = MARGIN_PX + (h - 1 - y) as f64 * CELL_PX;
        let mut x = 0;
        while x < w {
            let fill = cell_fill(x, y);
            let x0 = x;
            while x < w && cell_fill(x, y) == fill {
                x += 1;
            }
            if let Some(f) = fill {
                svg.rect(
                    MARGIN_PX + x0 as f64 * CELL_PX,
                    py,
                    (x - x0) as f64 * CELL_PX,
                    CELL_PX,
                    f,
                );
            }
        }
    }

    let sampler = PolarSampler::new(map, cfg.topo.dilation_radius);
    for frontier in
        extract_frontiers(map, cfg.episode.frontier_min_size, &sampler, cfg.topo.sample_range)
    {
        for cell in &frontier.cells {
            svg.rect(
                MARGIN_PX + cell.x as f64 * CELL_PX,
                MARGIN_PX + (h - 1 - cell.y) as f64 * CELL_PX,
                CELL_PX,
                CELL_PX,
                FRONTIER_FILL,
            );
        }
        let (px, py) = world_to_px(map, frontier.centroid);
        svg.ring(px, py, CELL_PX * 0.9, FRONTIER_STROKE, "frontier");
    }

    let skeleton = skeletonize(&map.free_mask());
    for cell in skeleton.iter_set() {
        svg.rect(
            MARGIN_PX + cell.x as f64 * CELL_PX + CELL_PX * 0.25,
            MARGIN_PX + (h - 1 - cell.y) as f64 * CELL_PX + CELL_PX * 0.25,
            CELL_PX * 0.5,
            CELL_PX * 0.5,
            SKELETON_FILL,
        );
    }
    for cell in suppress_nodes(&detect_candidate_nodes(&skeleton), cfg.topo.d_min, map.resolution())
    {
        let (px, py) = world_to_px(map, map.cell_center(cell));
        svg.circle(px, py, CELL_PX * 0.45, NODE_FILL, "junction");
    }
    Ok(svg.finish())
}

/// Shared framing for world-coordinate drawings: pixel size plus a closure
/// mapping world points into it.
fn world_frame(points: &[Point]) -> (f64, f64, impl Fn(Point) -> (f64, f64)) {
    const PAD_M: f64 = 1.0;
    let min_x = points.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let max_x = points.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    let min_y = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let max_y = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let width = (max_x - min_x + 2.0 * PAD_M) * WORLD_PX_PER_M;
    let height = (max_y - min_y + 2.0 * PAD_M) * WORLD_PX_PER_M;
    let to_px = move |p: Point| {
        (
            (p.x - min_x + PAD_M) * WORLD_PX_PER_M,
            (max_y - p.y + PAD_M) * WORLD_PX_PER_M,
        )
    };
    (width, height, to_px)
}

fn render_trajectory_svg(traj: &TopoPolarTrajectory) -> String {
    let points: Vec<Point> = traj.nodes.iter().map(|n| n.world_pos).collect();
    let (width, height, to_px) = world_frame(&points);
    let mut svg = Svg::new(width, height.max(3.0 * MARGIN_PX));
    for pair in traj.nodes.windows(2) {
        let (x1, y1) = to_px(pair[0].world_pos);
        let (x2, y2) = to_px(pair[1].world_pos);
        svg.arrow(x1, y1, x2, y2);
    }
    for node in &traj.nodes {
        let (px, py) = to_px(node.world_pos);
        svg.circle(px, py, 5.0, NODE_FILL, "node");
        svg.text(px + 7.0, py - 7.0, 10.0, &node.id.to_string());
    }
    svg.text(
        6.0,
        14.0,
        11.0,
        &format!("goal {}  nodes {}  source {}", traj.goal_category, traj.nodes.len(), traj.source_tag),
    );
    svg.finish()
}

fn render_group_svg(group: &Group) -> Result<String, CliError> {
    let nodes = &group.summary.nodes;
    let points: Vec<Point> = nodes.iter().map(|n| n.world_pos).collect();
    let (width, height, to_px) = world_frame(&points);
    let mut svg = Svg::new(width, height.max(3.0 * MARGIN_PX));
    for &(a, b) in &group.summary.edges {
        let from = nodes.get(a as usize).ok_or_else(|| {
            CliError::Internal(format!("summary edge endpoint {a} has no node"))
        })?;
        let to = nodes.get(b as usize).ok_or_else(|| {
            CliError::Internal(format!("summary edge endpoint {b} has no node"))
        })?;
        let (x1, y1) = to_px(from.world_pos);
        let (x2, y2) = to_px(to.world_pos);
        svg.line(x1, y1, x2, y2, EDGE_STROKE, 2.0, "edge");
    }
    for node in nodes {
        let (px, py) = to_px(node.world_pos);
        svg.circle(px, py, 5.0, NODE_FILL, "node");
        svg.text(px + 7.0, py - 7.0, 10.0, &node.id.to_string());
    }
    svg.text(
        6.0,
        14.0,
        11.0,
        &format!(
            "group {}  nodes {}  edges {}  members {}",
            group.id,
            nodes.len(),
            group.summary.edges.len(),
            group.members.len()
        ),
    );
    Ok(svg.finish())
}
