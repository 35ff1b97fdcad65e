//! Compress navigation traces into topological-polar trajectories, accumulate
//! them in a matchable experience store, and use coarse-to-fine retrieval to
//! steer frontier exploration in a semantic gridworld.
//!
//! The pipeline, end to end:
//!
//! 1. [`gridmap`] — semantic occupancy grids: channel dilation, 12-sector
//!    polar ray sampling, frontier extraction.
//! 2. [`topo`] — skeletonize free space, detect junction nodes, and compress
//!    a pose trace into a loop-free node sequence with polar fingerprints.
//! 3. [`matching`] — rotation-invariant sector matching, mutual-KNN
//!    correspondences, and RANSAC rigid alignment between trajectories.
//! 4. [`embed`] — order-aware trajectory embeddings with a contrastively
//!    trained linear projection.
//! 5. [`store`] — the experience store: groups with merged summary graphs,
//!    redundancy pruning, coarse-to-fine retrieval, text persistence.
//! 6. [`nav`] — candidate frontier paths, experience retrieval, pluggable
//!    planners, A* path planning, and waypoint-following control.
//! 7. [`sim`] — procedural scenes, ray-cast observation, the closed episode
//!    loop, and success-rate / path-efficiency metrics.
//! 8. [`cli`] — the `trajrag` binary: scene generation, store construction,
//!    retrieval, navigation, paired evaluation, SVG rendering, training.
//!
//! Each capability has a runnable walkthrough under `examples/`:
//!
//! ```text
//! cargo run -p trajrag --example semantic_map      # grids, rays, frontiers
//! cargo run -p trajrag --example topo_trajectory   # skeleton -> node sequence
//! cargo run -p trajrag --example match_align       # correspondence + RANSAC
//! cargo run -p trajrag --example build_store       # insertion and merging
//! cargo run -p trajrag --example retrieve          # coarse-to-fine retrieval
//! cargo run -p trajrag --example train_embedder    # contrastive projection
//! cargo run -p trajrag --example navigate          # one full episode
//! cargo run -p trajrag --example evaluate          # paired SR/SPL evaluation
//! cargo run -p trajrag --example render_svg        # scene/trajectory drawing
//! ```
//!
//! The `trajrag` binary wraps the same library calls for batch use; see
//! `trajrag --help`.

pub mod cli;
pub mod embed;
pub mod geom;
pub mod gridmap;
pub mod matching;
pub mod nav;
pub mod sim;
pub mod store;
pub mod textio;
pub mod topo;

pub use geom::{Cell, Point};
pub use gridmap::{Frontier, PolarSampler, SectorLabel, SectorVector, SemanticMap};
pub use nav::{Action, AgentPose, CandidatePath, HeuristicPlanner, Planner, RandomFrontierPlanner};
pub use sim::{
    build_kb, build_kb_over_scenes, compute_metrics, evaluate_paired, evaluate_paired_threaded,
    generate_scene, run_episode, scripted_walk, EpisodeConfig, EpisodeResult, EpisodeSetup,
    KbReport, Metrics, PairedOutcome, Scene, SceneParams,
};
pub use store::TrajRagStore;
pub use topo::{TopoNode, TopoPolarTrajectory};
