use urbansplat::dataset::Dataset;
use urbansplat::scene::SceneGraph;
use urbansplat::scene::compose;
use urbansplat::splat::render;
use urbansplat::train::load_checkpoint;

fn stats(label: &str, graph: &SceneGraph, ds: &Dataset, vi: usize) {
    let v = &ds.views[vi];
    let (set, _) = compose(graph, v.frame).unwrap();
    let out = render(&set, &v.camera).unwrap();
    let gt = v.gt_depth.as_ref().unwrap();
    let mut n = 0; let mut rel = 0.0; let mut alpha_sum = 0.0; let mut nv = 0;
    for i in 0..gt.values().len() {
        alpha_sum += out.alpha[i];
        if gt.valid_mask()[i] && out.depth.valid_mask()[i] {
            rel += (out.depth.values()[i] - gt.values()[i]).abs() / gt.values()[i];
            n += 1;
        }
        if out.depth.valid_mask()[i] { nv += 1; }
    }
    println!("{label:10} gaussians={:4}  mean_alpha={:.3}  depth_valid={nv:4}  abs_rel={:.4} (n={n})",
        set.len(), alpha_sum / out.alpha.len() as f64, if n > 0 { rel / n as f64 } else { f64::NAN });
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let ds = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let vi: usize = args[3].parse().unwrap();
    let g = &ckpt.graph;
    let empty = Default::default();
    stats("full", g, &ds, vi);
    stats("bg only", &SceneGraph { background: g.background.clone(), road: empty, objects: vec![], ground: None }, &ds, vi);
    let empty2 = Default::default();
    stats("road only", &SceneGraph { background: empty2, road: g.road.clone(), objects: vec![], ground: None }, &ds, vi);
    let empty3 = Default::default();
    let empty4 = Default::default();
    stats("obj only", &SceneGraph { background: empty3, road: empty4, objects: g.objects.clone(), ground: None }, &ds, vi);
}
