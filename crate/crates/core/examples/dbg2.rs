use sonotrack::acoustics::{synthesize_volume_fast, PsfSpec};
use sonotrack::config::*;
use sonotrack::geom::Vec3;
use sonotrack::registration::*;
use sonotrack::scene::*;
use sonotrack::volume::Grid3;

fn landmark_crop(world: &World, shift: Vec3) -> sonotrack::volume::Volume {
    let pose = ProbePose::new(Vec3::ZERO, 0.0);
    let bubbles = world.bubble_field(0.0, 1);
    let mut sc = world.scatterers_at(0.0, &pose, &bubbles);
    for s in &mut sc { s.position += shift; }
    let grid = Grid3::centered(world.landmark_center, Vec3::new(12.5, 12.5, 12.5), 0.4);
    synthesize_volume_fast(&sc, grid, &PsfSpec::default(), None, None)
}

fn main() {
    let cfg = ExperimentConfig::with_seed(5);
    let world = World::build(&cfg.world_params()).unwrap();
    let reference = landmark_crop(&world, Vec3::ZERO);
    let d = Vec3::new(-0.7, 0.9, 0.2);
    let moving = landmark_crop(&world, d);
    // raw cost at truth and at the stall point
    let stall = Vec3::new(-0.777, 0.822, 0.245);
    for (name, t) in [("truth", d), ("stall", stall), ("zero", Vec3::ZERO)] {
        let e = ssd_cost(&reference, &moving, t).unwrap();
        println!("raw cost at {name}: {:.6} (overlap {:.3})", e.cost, e.valid_fraction);
    }
    // scan raw cost along the line truth -> stall
    for k in 0..=10 {
        let f = k as f64 / 10.0;
        let t = d * (1.0 - f) + stall * f;
        let e = ssd_cost(&reference, &moving, t).unwrap();
        println!("f={f:.1} cost {:.6}", e.cost);
    }
}
