//! Scratch diagnostic: build KB variants in-process and measure the paired eval.

use trajrag::embed::ProjectionParams;
use trajrag::sim::sample_start;
use trajrag::store::StoreConfig;
use trajrag::{
    evaluate_paired_threaded, generate_scene, scripted_walk, EpisodeConfig, SceneParams,
    TrajRagStore,
};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let style = args.get(1).map(String::as_str).unwrap_or("tour").to_string();
    let n_scenes: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(4);
    let eps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(12);
    let opr: u32 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2);

    let mut params = SceneParams::default();
    params.objects_per_room = opr;
    let cfg = EpisodeConfig::default();
    let n_cats = params.categories.len();

    let proj = ProjectionParams::random(n_cats, 64, 1234);
    let mut store =
        TrajRagStore::new(params.categories.clone(), proj, StoreConfig::default()).expect("store");

    let t0 = std::time::Instant::now();
    let mut attempted = 0usize;
    let mut kept = 0usize;
    for s in 0..n_scenes {
        let scene_seed = 100 + s;
        let scene = generate_scene(scene_seed, &params).expect("scene");
        for episode in 0..eps {
            attempted += 1;
            let goal = (episode % n_cats) as u16;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(
                77 ^ scene_seed.wrapping_mul(0x9E3779B97F4A7C15) ^ episode as u64,
            );
            let Ok(start) = sample_start(&scene, &mut rng, &[], 0.0) else { continue };
            let rot = rng.gen_range(0..scene.room_centers.len());
            let via: Vec<trajrag::Cell> = match style.as_str() {
                "direct" => vec![],
                "hop" => vec![scene.room_centers[rot]],
                _ => (0..scene.room_centers.len())
                    .map(|i| scene.room_centers[(i + rot) % scene.room_centers.len()])
                    .collect(),
            };
            let tag = format!("scene{scene_seed}-ep{episode}-goal{goal}");
            if let Ok(w) = scripted_walk(&scene, start, &via, goal, &cfg, &tag) {
                if store.insert_trajectory(&w.trajectory).is_ok() {
                    kept += 1;
                }
            }
        }
    }
    println!(
        "kb style {style} scenes {n_scenes} eps {eps} opr {opr}: {kept}/{attempted} walks, {} groups, {} chunks ({:.1}s)",
        store.groups().len(),
        store.chunks().count(),
        t0.elapsed().as_secs_f64()
    );
    if args.get(5).map(String::as_str) == Some("train") {
        let report = store
            .retrain_projection(&trajrag::embed::TrainConfig::default())
            .expect("train");
        println!("trained: loss {:.4} -> {:.4}", report.initial_loss, report.final_loss);
    }

    let eval_base: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(7_000);
    let scene_seeds: Vec<u64> = (200..210).collect();
    let episode_seeds: Vec<u64> = (0..100).map(|i| eval_base + i as u64).collect();
    let goals: Vec<u16> = (0..n_cats as u16).collect();
    let t1 = std::time::Instant::now();
    let out =
        evaluate_paired_threaded(&store, &scene_seeds, &params, &episode_seeds, &goals, &cfg, 8)
            .expect("eval");
    println!(
        "guided  sr {:.3} spl {:.3} path {:.2}",
        out.guided.success_rate, out.guided.spl, out.guided.mean_path_length
    );
    println!(
        "random  sr {:.3} spl {:.3} path {:.2}  ({:.1}s)",
        out.baseline.success_rate,
        out.baseline.spl,
        out.baseline.mean_path_length,
        t1.elapsed().as_secs_f64()
    );
}

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
