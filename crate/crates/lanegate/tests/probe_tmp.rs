//! Scratch probe against a pre-trained pilot; not part of the suite.

use lanegate::config::RunConfig;
use lanegate::eval::{analyze_decisions, count_trace_collisions, run_greedy_episode, GateMode};
use lanegate::obs::ObsParams;
use lanegate::policy::{reference_for_decision, ActionMode};
use lanegate::sim::World;
use lanegate::train::TrainedManifest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[test]
#[ignore]
fn probe_experts_only() {
    use lanegate::policy::LowLevelExpert;
    let dir = Path::new("/tmp/probe/full");
    let run = RunConfig::default();
    let map = run.map.build().unwrap();
    let params = ObsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    for lane in [0usize, 1] {
        let expert = LowLevelExpert::load(&dir.join(format!("expert_{lane}.json"))).unwrap();
        let mut sim = run.sim.clone();
        sim.n_egos = 1;
        sim.n_slow = 0;
        let (mut held, mut clean) = (0, 0);
        let mut worst = (1.0f64, 0usize); // (hold fraction proxy, seed)
        for start in 0..50 {
            let seed = 9_000 + (lane * 50 + start) as u64;
            let mut world = World::spawn(map.clone(), sim.clone(), seed).unwrap();
            world.set_target_lane(0, lane).unwrap();
            let mut consecutive = 0usize;
            let mut best = 0usize;
            let mut reached = false;
            let mut boundary_hit = false;
            for _ in 0..sim.max_steps {
                let reference = reference_for_decision(&world, 0, lane, &params).unwrap();
                let obs = lanegate::obs::observe_low(&world, 0, &reference, &params).unwrap();
                let act = expert.act(&obs, ActionMode::Greedy, &mut rng).unwrap();
                let outcome = world.step(&[act.action]).unwrap();
                let flags = outcome.ego_flags[0];
                boundary_hit |= flags.hit_boundary;
                if flags.respawned {
                    consecutive = 0;
                    continue;
                }
                let off = map
                    .signed_offset_in_lane(world.vehicles[0].position, lane)
                    .unwrap();
                consecutive = if off.abs() < map.lane_width / 4.0 { consecutive + 1 } else { 0 };
                best = best.max(consecutive);
                if consecutive >= 100 {
                    reached = true;
                }
            }
            held += reached as usize;
            clean += !boundary_hit as usize;
            let frac = best as f64 / 100.0;
            if frac < worst.0 {
                worst = (frac, start);
            }
        }
        println!(
            "expert {lane}: held {held}/50, clean {clean}/50, worst best-streak {:.0}% (start {})",
            worst.0 * 100.0,
            worst.1
        );

        // One verbose trajectory for the eyeball.
        let mut world = World::spawn(map.clone(), sim.clone(), 9_000 + (lane * 50) as u64).unwrap();
        world.set_target_lane(0, lane).unwrap();
        for step in 0..60 {
            let reference = reference_for_decision(&world, 0, lane, &params).unwrap();
            let obs = lanegate::obs::observe_low(&world, 0, &reference, &params).unwrap();
            let act = expert.act(&obs, ActionMode::Greedy, &mut rng).unwrap();
            let outcome = world.step(&[act.action]).unwrap();
            let flags = outcome.ego_flags[0];
            if step % 4 == 0 || flags.hit_boundary {
                let v = &world.vehicles[0];
                let off = map.signed_offset_in_lane(v.position, lane).unwrap();
                println!(
                    "  e{lane} step {step:3} offset {off:+.3} speed_cmd {:.2} steer_cmd {:+.2} heading {:+.2} lane {}{}",
                    act.action.speed,
                    act.action.steering,
                    v.heading,
                    v.current_lane,
                    if flags.hit_boundary { "  BOUNDARY" } else { "" }
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe_trajectory() {
    let dir = Path::new("/tmp/probe/full");
    let manifest = TrainedManifest::load(&dir.join("manifest.json")).unwrap();
    let (_, pool) = manifest.load_policies(dir).unwrap();
    let run = RunConfig::default();
    let map = manifest.map.build().unwrap();
    let params = ObsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for lane in [0usize, 1] {
        let expert = &pool.experts[lane];
        let mut sim = run.sim.clone();
        sim.n_egos = 1;
        sim.n_slow = 0;
        let mut world = World::spawn(map.clone(), sim.clone(), 9_000 + (lane * 50) as u64).unwrap();
        world.set_target_lane(0, lane).unwrap();
        println!(
            "=== expert {lane}: spawn lane {} pos ({:.3},{:.3})",
            world.vehicles[0].current_lane, world.vehicles[0].position.x, world.vehicles[0].position.y
        );
        for step in 0..200 {
            let reference = reference_for_decision(&world, 0, lane, &params).unwrap();
            let obs = lanegate::obs::observe_low(&world, 0, &reference, &params).unwrap();
            let act = expert.act(&obs, ActionMode::Greedy, &mut rng).unwrap();
            let outcome = world.step(&[act.action]).unwrap();
            let flags = outcome.ego_flags[0];
            if step % 10 == 0 || flags.hit_boundary {
                let v = &world.vehicles[0];
                let off = map.signed_offset_in_lane(v.position, lane).unwrap();
                println!(
                    "step {step:3} offset {off:+.3} speed_cmd {:.2} steer_cmd {:+.2} heading {:+.2} curlane {}{}",
                    act.action.speed,
                    act.action.steering,
                    v.heading,
                    v.current_lane,
                    if flags.hit_boundary { "  BOUNDARY" } else { "" }
                );
            }
        }
    }
}

#[test]
#[ignore]
fn probe_competence() {
    let dir = Path::new("/tmp/probe/full");
    let manifest = TrainedManifest::load(&dir.join("manifest.json")).unwrap();
    let (hl, pool) = manifest.load_policies(dir).unwrap();
    let run = RunConfig::default();
    let map = manifest.map.build().unwrap();
    let params = ObsParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);

    // Criterion 4 analog: hold rate + boundary-clean rate per expert.
    for (lane, expert) in pool.experts.iter().enumerate() {
        let mut sim = run.sim.clone();
        sim.n_egos = 1;
        sim.n_slow = 0;
        let (mut held, mut clean) = (0, 0);
        for start in 0..50 {
            let seed = 9_000 + (lane * 50 + start) as u64;
            let mut world = World::spawn(map.clone(), sim.clone(), seed).unwrap();
            world.set_target_lane(0, lane).unwrap();
            let mut consecutive = 0usize;
            let mut reached = false;
            let mut boundary_hit = false;
            for _ in 0..sim.max_steps {
                let reference = reference_for_decision(&world, 0, lane, &params).unwrap();
                let obs = lanegate::obs::observe_low(&world, 0, &reference, &params).unwrap();
                let act = expert.act(&obs, ActionMode::Greedy, &mut rng).unwrap();
                let outcome = world.step(&[act.action]).unwrap();
                let flags = outcome.ego_flags[0];
                boundary_hit |= flags.hit_boundary;
                if flags.respawned {
                    consecutive = 0;
                    continue;
                }
                let off = map
                    .signed_offset_in_lane(world.vehicles[0].position, lane)
                    .unwrap();
                consecutive = if off.abs() < map.lane_width / 4.0 { consecutive + 1 } else { 0 };
                if consecutive >= 100 {
                    reached = true;
                }
            }
            held += reached as usize;
            clean += !boundary_hit as usize;
        }
        println!("expert {lane}: held {held}/50, clean {clean}/50");
    }

    // Criterion 5/6 analog: collisions vs baselines + consistency.
    let mut sim = run.sim.clone();
    sim.n_egos = 4;
    sim.n_slow = 4;
    let mut totals = [0u64; 3];
    for &seed in &[0u64, 1, 2] {
        let learned =
            run_greedy_episode(&map, &sim, &run, GateMode::Learned(&hl), &pool, 2000, seed)
                .unwrap();
        let fixed =
            run_greedy_episode(&map, &sim, &run, GateMode::SpawnLane, &pool, 2000, seed).unwrap();
        let random =
            run_greedy_episode(&map, &sim, &run, GateMode::UniformRandom, &pool, 2000, seed)
                .unwrap();
        totals[0] += learned.total();
        totals[1] += fixed.total();
        totals[2] += random.total();
        let (_, s10) = analyze_decisions(&learned.trace, 10).unwrap();
        let (e1, _) = analyze_decisions(&learned.trace, 1).unwrap();
        let completed1: Vec<_> = e1.iter().filter(|e| e.completed).collect();
        let long = completed1.iter().filter(|e| e.run_length >= 8).count();
        let (aa, b) = count_trace_collisions(&learned.trace);
        println!(
            "seed {seed}: learned {} (aa {aa} b {b}) fixed {} random {} | completed@10 {} | completions@1 {} long-run {long}",
            learned.total(),
            fixed.total(),
            random.total(),
            s10.completed,
            completed1.len()
        );
    }
    println!(
        "TOTALS learned {} fixed {} random {} (0.6*worse = {})",
        totals[0],
        totals[1],
        totals[2],
        0.6 * totals[1].max(totals[2]) as f64
    );
}
