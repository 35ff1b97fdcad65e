//! Scratch: does the heuristic score agree with an oracle when the store
//! holds same-scene experience?

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use trajrag::embed::ProjectionParams;
use trajrag::matching::Se2Transform;
use trajrag::nav::{goal_mention_scores, CandidatePath, PlannerDecision, RetrievedExperience};
use trajrag::sim::{compute_metrics, episode_frame, sample_start};
use trajrag::store::StoreConfig;
use trajrag::{
    generate_scene, run_episode, scripted_walk, EpisodeConfig, Planner, Point,
    SceneParams, TrajRagStore,
};

struct TelemetryPlanner {
    goal: Point,
    goal_name: String,
    total: usize,
    agree: usize,
    top2: usize,
    finite: usize,
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
                    && candidates[i].route_len() < candidates[chosen].route_len());
            if better {
                chosen = i;
            }
        }
        if candidates.len() > 1 {
            let oracle: Vec<f64> = candidates
                .iter()
                .map(|c| -c.frontier.centroid.distance(&self.goal))
                .collect();
            let mut best = 0;
            for i in 1..oracle.len() {
                if oracle[i] > oracle[best] {
                    best = i;
                }
            }
            let mut order: Vec<usize> = (0..oracle.len()).collect();
            order.sort_by(|&a, &b| oracle[b].total_cmp(&oracle[a]));
            self.total += 1;
            if chosen == best {
                self.agree += 1;
            }
            if order.iter().take(2).any(|&i| i == chosen) {
                self.top2 += 1;
            }
            if scores[chosen].is_finite() {
                self.finite += 1;
            }
        }
        Ok(PlannerDecision { chosen, scores, rationale: String::new() })
    }
}

fn main() {
    let params = SceneParams::default();
    let cfg = EpisodeConfig::default();
    let n_cats = params.categories.len();
    let scene_seeds: Vec<u64> = (200..210).collect();
    let scenes: Vec<_> =
        scene_seeds.iter().map(|&s| generate_scene(s, &params).expect("scene")).collect();

    // Same-scene stores: each scene gets direct walks to every goal from
    // three different starts.
    let mut stores = Vec::new();
    for scene in &scenes {
        let proj = ProjectionParams::random(n_cats, 64, 1234);
        let mut store = TrajRagStore::new(params.categories.clone(), proj, StoreConfig::default())
            .expect("store");
        let mut n = 0usize;
        for round in 0..3u64 {
            for g in 0..n_cats as u16 {
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                    999 ^ scene.seed.wrapping_mul(31) ^ (round * 17 + g as u64),
                );
                let Ok(start) = sample_start(scene, &mut rng, &[], 0.0) else { continue };
                let tag = format!("xp-{}-{g}", scene.seed);
                if let Ok(w) = scripted_walk(scene, start, &[], g, &cfg, &tag) {
                    if store.insert_trajectory(&w.trajectory).is_ok() {
                        n += 1;
                    }
                }
            }
        }
        eprintln!(
            "scene {}: {n} walks, {} groups, {} chunks",
            scene.seed,
            store.groups().len(),
            store.chunks().count()
        );
        stores.push(store);
    }

    let mut total = 0usize;
    let mut agree = 0usize;
    let mut top2 = 0usize;
    let mut finite = 0usize;
    let mut results = Vec::new();
    for i in 0..100usize {
        let episode_seed = 7_000 + i as u64;
        let scene = &scenes[i % scenes.len()];
        let store = &stores[i % scenes.len()];
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
        let mut tp = TelemetryPlanner {
            goal: inv.apply(Point::new(cx / n, cy / n)),
            goal_name: scene.map.categories()[goal as usize].clone(),
            total: 0,
            agree: 0,
            top2: 0,
            finite: 0,
        };
        results.push(run_episode(scene, start, goal, &mut tp, store, &cfg).unwrap());
        total += tp.total;
        agree += tp.agree;
        top2 += tp.top2;
        finite += tp.finite;
    }
    let m = compute_metrics(&results).unwrap();
    println!(
        "same-scene guided  sr {:.3} spl {:.3} path {:.2}",
        m.success_rate, m.spl, m.mean_path_length
    );
    println!(
        "decisions {total}: agree-with-oracle {agree} ({:.2}), oracle-top2 {top2} ({:.2}), finite {finite}",
        agree as f64 / total.max(1) as f64,
        top2 as f64 / total.max(1) as f64
    );
}
