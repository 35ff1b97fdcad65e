//! Scratch: nearest-frontier policy (heuristic planner, empty store) vs random.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use trajrag::embed::ProjectionParams;
use trajrag::sim::{compute_metrics, sample_start};
use trajrag::store::StoreConfig;
use trajrag::{
    generate_scene, run_episode, EpisodeConfig, HeuristicPlanner, RandomFrontierPlanner,
    SceneParams, TrajRagStore,
};

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

    let mut nearest_results = Vec::new();
    let mut random_results = Vec::new();
    for i in 0..100usize {
        let episode_seed = eval_base + i as u64;
        let scene = &scenes[i % scenes.len()];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(episode_seed);
        let goal = rng.gen_range(0..n_cats) as u16;
        let goal_cells = scene.goal_cells(goal);
        let start =
            sample_start(scene, &mut rng, &goal_cells, cfg.success_radius + 0.5).expect("start");
        let mut guided = HeuristicPlanner;
        nearest_results.push(run_episode(scene, start, goal, &mut guided, &empty, &cfg).unwrap());
        let mut baseline = RandomFrontierPlanner::new(episode_seed ^ 0x9E3779B97F4A7C15);
        random_results.push(run_episode(scene, start, goal, &mut baseline, &empty, &cfg).unwrap());
    }
    let nm = compute_metrics(&nearest_results).unwrap();
    let rm = compute_metrics(&random_results).unwrap();
    println!(
        "nearest sr {:.3} spl {:.3} path {:.2}",
        nm.success_rate, nm.spl, nm.mean_path_length
    );
    println!("random  sr {:.3} spl {:.3} path {:.2}", rm.success_rate, rm.spl, rm.mean_path_length);
}
