use urbansplat::dataset::Dataset;
use urbansplat::scene::compose;
use urbansplat::train::load_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let ds = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let vi: usize = args[3].parse().unwrap();
    let v = &ds.views[vi];
    let (set, layout) = compose(&ckpt.graph, v.frame).unwrap();
    let cam = &v.camera;
    let mut near = Vec::new();
    for i in 0..set.len() {
        let p = cam.pose.inverse_transform_point(&set.centers[i]);
        if p.z > 0.0 && p.z < 1.0 {
            let node = if layout.background.contains(&i) { "bg" }
                else if layout.road.contains(&i) { "road" }
                else { "obj" };
            near.push((i, node, p.z, set.scales(i), set.opacity(i)));
        }
    }
    println!("composed {} gaussians; {} with z_cam in (0,1):", set.len(), near.len());
    for (i, node, z, s, o) in near.iter().take(12) {
        println!("  {i} {node} z_cam={z:.3} scales=[{:.3} {:.3} {:.3}] op={o:.3}", s.x, s.y, s.z);
    }
}
