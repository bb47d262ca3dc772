//! Scratch calibration of the recognition projection and pose ranges.

use facedit::config::Config;
use facedit::dataforge::{make_identity, render_frame, sample_pose, PoseRanges};
use facedit::ops::cosine_similarity;
use facedit::params::ParamSet;
use facedit::rng::RngState;
use facedit::tensor::Tensor;

fn project(img: &Tensor, proj: &Tensor) -> Tensor {
    facedit::ops::matmul(&img.reshaped(&[1, img.len()]).unwrap(), proj).unwrap()
}

fn lowfreq_proj(h: usize, w: usize, out_dim: usize, max_mode: usize, seed: u64) -> Tensor {
    let mut rng = RngState::new(seed);
    let mut modes = Vec::new();
    for u in 0..=max_mode {
        for v in 0..=max_mode {
            let weight = 1.0 / (1.0 + (u + v) as f64);
            let mut grid = vec![0f64; h * w];
            for y in 0..h {
                for x in 0..w {
                    let fx = (std::f64::consts::PI * u as f64 * (x as f64 + 0.5)) / w as f64;
                    let fy = (std::f64::consts::PI * v as f64 * (y as f64 + 0.5)) / h as f64;
                    grid[y * w + x] = weight * fx.cos() * fy.cos();
                }
            }
            modes.push(grid);
        }
    }
    let mut proj = Tensor::zeros(&[h * w, out_dim]);
    for c in 0..out_dim {
        let coef: Vec<f64> = (0..modes.len()).map(|_| rng.normal()).collect();
        for p in 0..h * w {
            let mut acc = 0.0;
            for (m, grid) in modes.iter().enumerate() {
                acc += coef[m] * grid[p];
            }
            proj.data_mut()[c + p * out_dim] = acc as f32;
        }
    }
    proj
}

fn stats(name: &str, proj: &Tensor, ranges: &PoseRanges, h: usize, w: usize) {
    let mut rng = RngState::new(999);
    let total = 300;
    let mut wins = 0;
    let mut same_sum = 0.0;
    let mut same_sq = 0.0;
    let mut diff_sum = 0.0;
    let mut diff_sq = 0.0;
    let mut kept = 0;
    for _ in 0..total {
        let a = make_identity(&mut rng);
        let b = make_identity(&mut rng);
        let pa1 = sample_pose(&mut rng, ranges, h, w);
        let pa2 = sample_pose(&mut rng, ranges, h, w);
        let pb = sample_pose(&mut rng, ranges, h, w);
        let ea1 = project(&render_frame(&a, &pa1, h, w).unwrap().pixels, proj);
        let ea2 = project(&render_frame(&a, &pa2, h, w).unwrap().pixels, proj);
        let eb = project(&render_frame(&b, &pb, h, w).unwrap().pixels, proj);
        let same = cosine_similarity(&ea1, &ea2).unwrap() as f64;
        let diff = cosine_similarity(&ea1, &eb).unwrap() as f64;
        if same > diff {
            wins += 1;
        }
        if same > 0.65 {
            kept += 1;
        }
        same_sum += same;
        same_sq += same * same;
        diff_sum += diff;
        diff_sq += diff * diff;
    }
    let n = total as f64;
    let sm = same_sum / n;
    let dm = diff_sum / n;
    println!(
        "{name}: wins {}/{} same {:.3}±{:.3} diff {:.3}±{:.3} kept@0.65 {:.2}",
        wins,
        total,
        sm,
        (same_sq / n - sm * sm).sqrt(),
        dm,
        (diff_sq / n - dm * dm).sqrt(),
        kept as f64 / n
    );
}

/// Deterministic prototype face: z = 0 renders averaged over a fixed pose grid.
fn mean_face(h: usize, w: usize) -> Tensor {
    let id = facedit::dataforge::Identity {
        z: Tensor::zeros(&[8]),
        tag: facedit::dataforge::Demographic::Man,
    };
    let mut mean = vec![0f64; h * w];
    let mut count = 0.0;
    for ai in -1i32..=1 {
        for dxi in -1i32..=1 {
            for dyi in -1i32..=1 {
                let pose = facedit::dataforge::Pose {
                    angle: ai as f64 * 0.15,
                    dx: dxi as f64 * 0.05 * w as f64,
                    dy: dyi as f64 * 0.05 * h as f64,
                    scale: 1.0,
                };
                let f = render_frame(&id, &pose, h, w).unwrap();
                for (m, &p) in mean.iter_mut().zip(f.pixels.data()) {
                    *m += p as f64;
                }
                count += 1.0;
            }
        }
    }
    Tensor::from_vec(&[h * w], mean.iter().map(|&v| (v / count) as f32).collect()).unwrap()
}

/// Orthogonalize each projection column against the prototype face.
fn orthogonalize(proj: &Tensor, mu: &Tensor) -> Tensor {
    let (rows, cols) = (proj.rows(), proj.cols());
    let mu_sq: f64 = mu.data().iter().map(|&v| (v as f64).powi(2)).sum();
    let mut out = proj.clone();
    for c in 0..cols {
        let mut dot = 0.0f64;
        for r in 0..rows {
            dot += proj.data()[r * cols + c] as f64 * mu.data()[r] as f64;
        }
        let coef = dot / mu_sq;
        for r in 0..rows {
            out.data_mut()[r * cols + c] -= (coef * mu.data()[r] as f64) as f32;
        }
    }
    out
}

/// Pose-derivative images of the prototype at a probe pose, by central
/// differences in each pose coordinate.
fn pose_derivatives(h: usize, w: usize, at: facedit::dataforge::Pose) -> Vec<Tensor> {
    let id = facedit::dataforge::Identity {
        z: Tensor::zeros(&[8]),
        tag: facedit::dataforge::Demographic::Man,
    };
    let render = |p: facedit::dataforge::Pose| render_frame(&id, &p, h, w).unwrap().pixels;
    let eps = 0.05;
    let mut out = Vec::new();
    for k in 0..4 {
        let mut up = at;
        let mut dn = at;
        match k {
            0 => {
                up.dx += eps;
                dn.dx -= eps;
            }
            1 => {
                up.dy += eps;
                dn.dy -= eps;
            }
            2 => {
                up.angle += eps;
                dn.angle -= eps;
            }
            _ => {
                up.scale += eps;
                dn.scale -= eps;
            }
        }
        let a = render(up);
        let b = render(dn);
        let d: Vec<f32> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) / (2.0 * eps as f32))
            .collect();
        out.push(Tensor::from_vec(&[h * w], d).unwrap());
    }
    out
}

/// Gram-Schmidt of columns against a set of nuisance directions.
fn orthogonalize_many(proj: &Tensor, nuisance: &[Tensor]) -> Tensor {
    // orthonormalize nuisance basis first
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for n in nuisance {
        let mut v: Vec<f64> = n.data().iter().map(|&x| x as f64).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi -= dot * bi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    let (rows, cols) = (proj.rows(), proj.cols());
    let mut out = proj.clone();
    for b in &basis {
        for c in 0..cols {
            let mut dot = 0.0f64;
            for r in 0..rows {
                dot += out.data()[r * cols + c] as f64 * b[r];
            }
            for r in 0..rows {
                out.data_mut()[r * cols + c] -= (dot * b[r]) as f32;
            }
        }
    }
    out
}

fn main() {
    let cfg = Config::default();
    let (h, w) = (cfg.height, cfg.width);
    let params = ParamSet::init(&cfg);
    let ranges = cfg.pose_ranges();
    let mu = mean_face(h, w);

    stats("white-noise     ", params.tensor("embedder.id_proj"), &ranges, h, w);
    let white_orth = orthogonalize(params.tensor("embedder.id_proj"), &mu);
    stats("white+orth      ", &white_orth, &ranges, h, w);

    // nuisance subspace: prototype + pose derivatives at probe poses
    let mut nuisance = vec![mu.clone()];
    let mut probes = vec![facedit::dataforge::Pose::NEUTRAL];
    for &(dx, dy, a, s) in &[
        (0.4, 0.4, 0.0, 1.0),
        (-0.4, -0.4, 0.08, 1.0),
        (0.4, -0.4, -0.08, 1.04),
        (-0.4, 0.4, 0.04, 0.97),
        (0.0, 0.0, 0.1, 1.0),
        (0.0, 0.0, -0.1, 1.05),
    ] {
        probes.push(facedit::dataforge::Pose { dx, dy, angle: a, scale: s });
    }
    for probe in probes {
        nuisance.extend(pose_derivatives(h, w, probe));
    }
    let wpose = orthogonalize_many(params.tensor("embedder.id_proj"), &nuisance);
    stats("white+pose-orth ", &wpose, &ranges, h, w);
    let lf = lowfreq_proj(h, w, 2 * cfg.dim, 3, 777);
    let lfpose = orthogonalize_many(&lf, &nuisance);
    stats("lf3+pose-orth   ", &lfpose, &ranges, h, w);
    for shift in [0.02f64, 0.05] {
        let r = PoseRanges {
            max_shift_frac: shift,
            ..ranges
        };
        stats(&format!("wp-orth sh={shift}"), &wpose, &r, h, w);
    }
    // saturation check
    let mut rng = RngState::new(5);
    let mut sat = 0usize;
    let mut tot = 0usize;
    for _ in 0..50 {
        let id = make_identity(&mut rng);
        let f = render_frame(&id, &facedit::dataforge::Pose::NEUTRAL, h, w).unwrap();
        sat += f.pixels.data().iter().filter(|&&v| v >= 0.999).count();
        tot += f.pixels.len();
    }
    println!("saturated pixels: {:.3}%", 100.0 * sat as f64 / tot as f64);
}
