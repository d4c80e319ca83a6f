use lanepilot::render::*;
use lanepilot::simcore::*;
use std::time::Instant;

fn main() {
    let map = TrackMap::preset(MapPreset::Loop);
    let cam = CameraModel::default();
    let r = FrameRenderer::new(&cam);
    let pose = map.default_spawn();
    for (name, d) in [("SIM-LP", Domain::SimLp), ("PR-B", Domain::PseudoRealB)] {
        let domain = domain_preset(d);
        let t = Instant::now();
        let mut acc = 0u64;
        for i in 0..50 {
            let img = r.render(&map, pose, &domain, i);
            acc += img.data[0] as u64;
        }
        println!("{name}: {:.2} ms/frame (acc {acc})", t.elapsed().as_secs_f64() * 1000.0 / 50.0);
    }
}
