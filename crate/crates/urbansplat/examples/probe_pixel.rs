use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2};
use urbansplat::dataset::Dataset;
use urbansplat::scene::compose;
use urbansplat::splat::{EIGEN_FLOOR, Q_CUT};
use urbansplat::train::load_checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ckpt = load_checkpoint(std::path::Path::new(&args[1])).unwrap();
    let ds = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let vi: usize = args[3].parse().unwrap();
    let px: usize = args[4].parse().unwrap();
    let py: usize = args[5].parse().unwrap();
    let v = &ds.views[vi];
    let (set, layout) = compose(&ckpt.graph, v.frame).unwrap();
    let cam = &v.camera;
    let w_inv = cam.pose.rotation.transpose();
    let wcut = (-(Q_CUT) / 2.0f64).exp();
    // gather (z, weight, idx) for the pixel
    let mut hits: Vec<(f64, f64, usize)> = Vec::new();
    let pc = Vector2::new(px as f64 + 0.5, py as f64 + 0.5);
    for i in 0..set.len() {
        let x_cam = cam.pose.inverse_transform_point(&set.centers[i]);
        let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
        if z <= 1e-4 { continue; }
        let mean_px = Vector2::new(cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy);
        let j = Matrix2x3::new(cam.fx / z, 0.0, -cam.fx * x / (z * z), 0.0, cam.fy / z, -cam.fy * y / (z * z));
        let jw = j * w_inv;
        let rot = set.rotation(i);
        let scales = set.scales(i);
        let vworld = rot * Matrix3::from_diagonal(&scales.map(|s| s * s)) * rot.transpose();
        let raw = jw * vworld * jw.transpose();
        // eigen floor
        let tr = raw[(0,0)] + raw[(1,1)];
        let dt = raw[(0,0)]*raw[(1,1)] - raw[(0,1)]*raw[(1,0)];
        let gap = ((tr*tr/4.0 - dt).max(0.0)).sqrt();
        let (l1, l2) = (tr/2.0 + gap, tr/2.0 - gap);
        let (f1, f2) = (l1.max(EIGEN_FLOOR), l2.max(EIGEN_FLOOR));
        // rebuild floored cov in eigenbasis
        let cov = if gap < 1e-12 {
            Matrix2::new(f1, raw[(0,1)], raw[(1,0)], f2)
        } else {
            let e1 = if raw[(0,1)].abs() > 1e-18 { Vector2::new(l1 - raw[(1,1)], raw[(0,1)]).normalize() } else if raw[(0,0)] >= raw[(1,1)] { Vector2::new(1.0,0.0) } else { Vector2::new(0.0,1.0) };
            let e2 = Vector2::new(-e1.y, e1.x);
            Matrix2::from_columns(&[e1, e2]) * Matrix2::new(f1, 0.0, 0.0, f2) * Matrix2::from_columns(&[e1, e2]).transpose()
        };
        let det = cov[(0,0)]*cov[(1,1)] - cov[(0,1)]*cov[(1,0)];
        let ci = Matrix2::new(cov[(1,1)], -cov[(0,1)], -cov[(1,0)], cov[(0,0)]) / det;
        let d = pc - mean_px;
        let q = d.x*d.x*ci[(0,0)] + 2.0*d.x*d.y*ci[(0,1)] + d.y*d.y*ci[(1,1)];
        if q >= Q_CUT { continue; }
        let wq = ((-q/2.0f64).exp() - wcut) / (1.0 - wcut);
        let alpha = set.opacity(i) * wq;
        if alpha > 1e-4 { hits.push((z, alpha, i)); }
    }
    hits.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut t = 1.0;
    let mut zacc = 0.0; let mut aacc = 0.0;
    println!("pixel ({px},{py}) view {vi}: {} contributors", hits.len());
    for (k, (z, a, i)) in hits.iter().enumerate() {
        let wgt = t * a;
        zacc += wgt * z; aacc += wgt;
        let node = if layout.background.contains(i) { "bg" } else if layout.road.contains(i) { "road" } else { "obj" };
        if k < 14 {
            println!("  {node:4} idx={i:5} z={z:8.3} alpha={a:.3} contrib_w={wgt:.4} center={:?} scales={:?}",
                set.centers[*i].iter().map(|v| (v*100.0).round()/100.0).collect::<Vec<_>>(),
                set.scales(*i).iter().map(|v| (v*1000.0).round()/1000.0).collect::<Vec<_>>());
        }
        t *= 1.0 - a;
    }
    println!("  total alpha={aacc:.3} norm_depth={:.3}", zacc / aacc.max(1e-12));
}
