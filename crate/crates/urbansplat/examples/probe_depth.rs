use urbansplat::dataset::Dataset;
use urbansplat::scene::compose;
use urbansplat::splat::render;
use urbansplat::train::load_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let ds = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let vi: usize = args[3].parse().unwrap();
    let v = &ds.views[vi];
    let (set, _) = compose(&ckpt.graph, v.frame).unwrap();
    let out = render(&set, &v.camera).unwrap();
    let gt = v.gt_depth.as_ref().unwrap();
    let dynmask = v.dynamic.as_ref();
    // bucket abs_rel by region
    let mut sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    let mut invalid_pred = 0usize;
    for r in 0..ds.height {
        for c in 0..ds.width {
            let i = r * ds.width + c;
            if !gt.valid_mask()[i] { continue; }
            if !out.depth.valid_mask()[i] { invalid_pred += 1; continue; }
            let region = if dynmask.map_or(false, |m| m[i]) { 3 }
                else if v.masks.road()[i] { 0 }
                else if v.masks.sky()[i] { 2 }
                else { 1 };
            let rel = (out.depth.values()[i] - gt.values()[i]).abs() / gt.values()[i];
            sums[region] += rel;
            counts[region] += 1;
        }
    }
    println!("view {vi} frame {}", v.frame);
    for (name, k) in [("road", 0), ("box", 1), ("sky?", 2), ("mover", 3)] {
        if counts[k] > 0 {
            println!("  {name:5} n={:5} mean_abs_rel={:.4}", counts[k], sums[k] / counts[k] as f64);
        }
    }
    println!("  pred-invalid on gt-valid: {invalid_pred}");
    // worst rows
    let mut rows: Vec<(usize, f64, usize)> = Vec::new();
    for r in 0..ds.height {
        let mut s = 0.0; let mut n = 0;
        for c in 0..ds.width {
            let i = r * ds.width + c;
            if gt.valid_mask()[i] && out.depth.valid_mask()[i] {
                s += (out.depth.values()[i] - gt.values()[i]).abs() / gt.values()[i];
                n += 1;
            }
        }
        if n > 0 { rows.push((r, s / n as f64, n)); }
    }
    let r = ds.height / 2;
    let mut samples = Vec::new();
    for c in (8..ds.width).step_by(16) {
        let i = r * ds.width + c;
        if gt.valid_mask()[i] && out.depth.valid_mask()[i] {
            samples.push((c, (gt.values()[i] * 100.0).round() / 100.0, (out.depth.values()[i] * 100.0).round() / 100.0));
        }
    }
    println!("  center row (col, gt, pred): {samples:?}");
    let mut ratios = Vec::new();
    for rr in (4..ds.height).step_by(12) {
        for c in (8..ds.width).step_by(24) {
            let i = rr * ds.width + c;
            if gt.valid_mask()[i] && out.depth.valid_mask()[i] {
                ratios.push(((rr, c), (out.depth.values()[i] / gt.values()[i] * 1000.0).round() / 1000.0, (out.alpha[i] * 100.0).round() / 100.0));
            }
        }
    }
    println!("  ((row,col), pred/gt, alpha): {ratios:?}");
    let cam = &v.camera;
    println!("  camera eye: {:?} fx {}", cam.pose.translation.as_slice(), cam.fx);
    rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("  worst rows (row mean_rel n): {:?}", rows.iter().take(6).map(|(r, e, n)| (*r, (e * 1000.0).round() / 1000.0, *n)).collect::<Vec<_>>());
}
