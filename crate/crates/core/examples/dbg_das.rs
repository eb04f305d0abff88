use sonotrack::cli;
use sonotrack::config::*;
use sonotrack::geom::Vec3;
use sonotrack::metrics::{fsc, split_tracks_odd_even};
use sonotrack::trackloop::run_closed_loop;
use sonotrack::ulm::{run_ulm, sr_grid_for};
use std::time::Instant;

fn main() {
    for (bv, dur) in [(2.0f64, 110.0f64), (2.4, 110.0)] {
    for seed in [1234u64, 555] {
        let mut cfg = ExperimentConfig::with_seed(seed);
        cfg.scene.profile = ProfileKind::Mixed;
        cfg.scene.channel_layout = ChannelLayout::Parallel;
        cfg.scene.channel_length = 1.7;
        cfg.scene.channel_separation = 0.33;
        cfg.scene.bubbles_in_view = bv;
        cfg.ulm.ceus_extent = Vec3::new(4.2, 2.6, 2.6);
        cfg.acquisition.duration_s = dur;
        cfg.acquisition.store_volumes = false;
        let t0 = Instant::now();
        let record = run_closed_loop(&cfg).unwrap();
        let t1 = Instant::now();
        let out = run_ulm(&record).unwrap();
        let nlocs: usize = out.localizations_per_frame.iter().map(|f| f.len()).sum();
        let d = &out.smoothed.density;
        let [nx, ny, nz] = d.grid.dims;
        let mut profile = vec![0.0f64; ny];
        for iz in 0..nz { for iy in 0..ny { for ix in 0..nx { profile[iy] += d.at(ix, iy, iz) as f64; }}}
        let y_of = |iy: usize| d.grid.origin.y + 0.02 * iy as f64;
        let peak = |t: f64| (0..ny).filter(|&iy| (y_of(iy)-t).abs() < 0.12).map(|iy| profile[iy]).fold(0.0, f64::max);
        let (pa, pb) = (peak(0.165), peak(-0.165));
        let valley = (0..ny).filter(|&iy| y_of(iy) > -0.10 && y_of(iy) < 0.10).map(|iy| profile[iy]).fold(f64::MAX, f64::min);
        let grid = sr_grid_for(&out.tracks, cfg.ulm.sr_spacing_mm).unwrap();
        let (odd, even) = split_tracks_odd_even(&out.tracks, grid);
        let r = fsc(&odd.density, &even.density).unwrap();
        println!("bv {bv} dur {dur} seed {seed}: sim {:.0}s ulm {:.0}s | locs {nlocs} tracks {} | dip {:.2} | fsc {:.1} um (cube {})",
            t1.duration_since(t0).as_secs_f64(), t1.elapsed().as_secs_f64(),
            out.tracks.len(), 1.0 - valley/(0.5*(pa+pb)), r.resolution_um, r.cube);
    }
    }
}
