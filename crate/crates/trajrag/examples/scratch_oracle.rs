//! Scratch: ceiling check — oracle planner vs random through the same executor.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use trajrag::embed::ProjectionParams;
use trajrag::matching::Se2Transform;
use trajrag::nav::{CandidatePath, PlannerDecision, RetrievedExperience};
use trajrag::sim::{compute_metrics, episode_frame, sample_start};
use trajrag::store::StoreConfig;
use trajrag::{
    generate_scene, run_episode, EpisodeConfig, Planner, Point, RandomFrontierPlanner,
    SceneParams, TrajRagStore,
};

struct OraclePlanner {
    /// Goal centroid in the episode frame.
    goal: Point,
}

impl Planner for OraclePlanner {
    fn name(&self) -> &'static str {
        "oracle"
    }
    fn plan(
        &mut self,
        candidates: &[CandidatePath],
        _experiences: &[Vec<RetrievedExperience>],
        _goal_name: &str,
    ) -> Result<PlannerDecision, trajrag::nav::NavError> {
        let scores: Vec<f64> = candidates
            .iter()
            .map(|c| -c.frontier.centroid.distance(&self.goal))
            .collect();
        let mut chosen = 0;
        for i in 1..scores.len() {
            if scores[i] > scores[chosen] {
                chosen = i;
            }
        }
        Ok(PlannerDecision { chosen, scores, rationale: "oracle".into() })
    }
}

fn main() {
    let params = SceneParams::default();
    let cfg = EpisodeConfig::default();
    let n_cats = params.categories.len();
    let proj = ProjectionParams::random(n_cats, 64, 1234);
    let empty =
        TrajRagStore::new(params.categories.clone(), proj, StoreConfig::default()).expect("store");

    let eval_base: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7_000);
    let scene_seeds: Vec<u64> = (200..210).collect();
    let scenes: Vec<_> =
        scene_seeds.iter().map(|&s| generate_scene(s, &params).expect("scene")).collect();

    let mut oracle_results = Vec::new();
    let mut random_results = Vec::new();
    for i in 0..100usize {
        let episode_seed = eval_base + i as u64;
        let scene = &scenes[i % scenes.len()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(episode_seed);
        let goal = rng.gen_range(0..n_cats) as u16;
        let goal_cells = scene.goal_cells(goal);
        let start =
            sample_start(scene, &mut rng, &goal_cells, cfg.success_radius + 0.5).expect("start");

        let (frame, _k0) = episode_frame(&start);
        let inv: Se2Transform = frame.inverse();
        let mut cx = 0.0;
        let mut cy = 0.0;
        for &c in &goal_cells {
            let p = scene.map.cell_center(c);
            cx += p.x;
            cy += p.y;
        }
        let n = goal_cells.len() as f64;
        let goal_ep = inv.apply(Point::new(cx / n, cy / n));

        let mut oracle = OraclePlanner { goal: goal_ep };
        oracle_results.push(run_episode(scene, start, goal, &mut oracle, &empty, &cfg).unwrap());
        let mut baseline = RandomFrontierPlanner::new(episode_seed ^ 0x9E3779B97F4A7C15);
        random_results.push(run_episode(scene, start, goal, &mut baseline, &empty, &cfg).unwrap());
    }
    let om = compute_metrics(&oracle_results).unwrap();
    let rm = compute_metrics(&random_results).unwrap();
    println!("oracle  sr {:.3} spl {:.3} path {:.2}", om.success_rate, om.spl, om.mean_path_length);
    println!("random  sr {:.3} spl {:.3} path {:.2}", rm.success_rate, rm.spl, rm.mean_path_length);
}
