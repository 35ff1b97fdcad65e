//! Scratch: when retrieval overrides the nearest-frontier choice, does the
//! override agree with the oracle more often than nearest would have?

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use trajrag::embed::ProjectionParams;
use trajrag::matching::Se2Transform;
use trajrag::nav::{goal_mention_scores, CandidatePath, PlannerDecision, RetrievedExperience};
use trajrag::sim::{compute_metrics, episode_frame, sample_start};
use trajrag::store::StoreConfig;
use trajrag::{
    generate_scene, run_episode, scripted_walk, EpisodeConfig, Planner, Point, SceneParams,
    TrajRagStore,
};

#[derive(Default)]
struct Tally {
    decisions: usize,
    any_finite: usize,
    override_near: usize,
    override_agrees: usize,
    near_agrees_when_overridden: usize,
    override_closer: usize,
}

struct TelemetryPlanner {
    goal: Point,
    goal_name: String,
    tally: Tally,
}

impl Planner for TelemetryPlanner {
    fn name(&self) -> &'static str {
        "telemetry"
    }
    fn plan(
        &mut self,
        candidates: &[CandidatePath],
        experiences: &[Vec<RetrievedExperience>],
        _goal_name: &str,
    ) -> Result<PlannerDecision, trajrag::nav::NavError> {
        let scores = goal_mention_scores(experiences, candidates.len(), &self.goal_name);
        let mut chosen = 0;
        for i in 1..candidates.len() {
            let better = scores[i] > scores[chosen]
                || (scores[i] == scores[chosen]
                    && candidates[i].route_meters() < candidates[chosen].route_meters());
            if better {
                chosen = i;
            }
        }
        if candidates.len() > 1 {
            let t = &mut self.tally;
            t.decisions += 1;
            if scores.iter().any(|s| s.is_finite()) {
                t.any_finite += 1;
            }
            let mut near = 0;
            for i in 1..candidates.len() {
                if candidates[i].route_meters() < candidates[near].route_meters() {
                    near = i;
                }
            }
            let dist =
                |i: usize| candidates[i].frontier.centroid.distance(&self.goal);
            let mut best = 0;
            for i in 1..candidates.len() {
                if dist(i) < dist(best) {
                    best = i;
                }
            }
            if scores[chosen].is_finite() && chosen != near {
                t.override_near += 1;
                if chosen == best {
                    t.override_agrees += 1;
                }
                if near == best {
                    t.near_agrees_when_overridden += 1;
                }
                if dist(chosen) < dist(near) {
                    t.override_closer += 1;
                }
            }
        }
        Ok(PlannerDecision { chosen, scores, rationale: String::new() })
    }
}

fn main() {
    let params = SceneParams::default();
    let cfg = EpisodeConfig::default();
    let n_cats = params.categories.len();

    // Cross-scene direct-walk KB, as in the diag harness.
    let proj = ProjectionParams::random(n_cats, 64, 1234);
    let mut store =
        TrajRagStore::new(params.categories.clone(), proj, StoreConfig::default()).expect("store");
    for s in 0..4u64 {
        let scene = generate_scene(100 + s, &params).expect("scene");
        for episode in 0..12usize {
            let goal = (episode % n_cats) as u16;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                77 ^ (100 + s).wrapping_mul(0x9E3779B97F4A7C15) ^ episode as u64,
            );
            let Ok(start) = sample_start(&scene, &mut rng, &[], 0.0) else { continue };
            let tag = format!("scene{}-ep{episode}-goal{goal}", 100 + s);
            if let Ok(w) = scripted_walk(&scene, start, &[], goal, &cfg, &tag) {
                let _ = store.insert_trajectory(&w.trajectory);
            }
        }
    }

    let scene_seeds: Vec<u64> = (200..210).collect();
    let scenes: Vec<_> =
        scene_seeds.iter().map(|&s| generate_scene(s, &params).expect("scene")).collect();
    let eval_base: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(7_000);

    let mut total = Tally::default();
    let mut results = Vec::new();
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
        let (mut cx, mut cy) = (0.0, 0.0);
        for &c in &goal_cells {
            let p = scene.map.cell_center(c);
            cx += p.x;
            cy += p.y;
        }
        let n = goal_cells.len() as f64;
        let mut tp = TelemetryPlanner {
            goal: inv.apply(Point::new(cx / n, cy / n)),
            goal_name: scene.map.categories()[goal as usize].clone(),
            tally: Tally::default(),
        };
        results.push(run_episode(scene, start, goal, &mut tp, &store, &cfg).unwrap());
        let t = tp.tally;
        total.decisions += t.decisions;
        total.any_finite += t.any_finite;
        total.override_near += t.override_near;
        total.override_agrees += t.override_agrees;
        total.near_agrees_when_overridden += t.near_agrees_when_overridden;
        total.override_closer += t.override_closer;
    }
    let m = compute_metrics(&results).unwrap();
    println!("guided sr {:.3} spl {:.3} path {:.2}", m.success_rate, m.spl, m.mean_path_length);
    println!(
        "decisions {} | finite {} | overrides {} | override=oracle {} | near=oracle {} | override-closer {}",
        total.decisions,
        total.any_finite,
        total.override_near,
        total.override_agrees,
        total.near_agrees_when_overridden,
        total.override_closer
    );
}
