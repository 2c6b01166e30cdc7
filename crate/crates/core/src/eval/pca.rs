use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TOL: f64 = 1e-10;
const MAX_ITERS: usize = 100_000;

/// Top-two principal directions of a parameter trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Two orthonormal directions of length `P`.
    pub components: [Vec<f64>; 2],
    /// Variances along the components (sums of squared projections).
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    /// Trajectory coordinates in the component basis.
    pub projections: Vec<[f64; 2]>,
}

impl Pca {
    /// Fraction of the total variance captured by the two components.
    pub fn explained(&self) -> f64 {
        (self.eigenvalues[0] + self.eigenvalues[1]) / self.total_variance
    }

    /// `mean + a·c₀ + b·c₁`.
    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        let [c0, c1] = &self.components;
        self.mean.iter().zip(c0).zip(c1).map(|((m, x), y)| m + a * x + b * y).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| dot(row, v)).collect()
}

/// Dominant eigenpair of the symmetric positive semi-definite `m`,
/// restricted to the complement of `against`.
fn power_iteration(m: &[Vec<f64>], against: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let n = m.len();
    let project = |v: &mut Vec<f64>| {
        for a in against {
            let c = dot(v, a);
            v.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
        }
    };
    // Deterministic start that is unlikely to be orthogonal to the answer.
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    project(&mut v);
    if normalize(&mut v) == 0.0 {
        return (0.0, v);
    }
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERS {
        let mut w = mat_vec(m, &v);
        project(&mut w);
        lambda = normalize(&mut w);
        if lambda == 0.0 {
            return (0.0, v);
        }
        let delta = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = w;
        if delta < TOL {
            break;
        }
    }
    (lambda, v)
}

/// Any unit vector of length `p` orthogonal to `a`.
fn orthogonal_to(a: &[f64]) -> Vec<f64> {
    for k in 0..a.len() {
        let mut e = vec![0.0; a.len()];
        e[k] = 1.0;
        let c = a[k];
        e.iter_mut().zip(a).for_each(|(x, y)| *x -= c * y);
        if normalize(&mut e) > 1e-6 {
            return e;
        }
    }
    vec![0.0; a.len()]
}

/// PCA of the rows of `trajectory` through the smaller of its two Gram
/// forms, by power iteration with deflation.
pub fn principal_components(trajectory: &[Vec<f64>]) -> Result<Pca> {
    let t = trajectory.len();
    let p = trajectory.first().map_or(0, Vec::len);
    if p < 2 || trajectory.iter().any(|r| r.len() != p) {
        return Err(Error::Shape {
            op: "principal_components",
            left: vec![t, p],
            right: trajectory.iter().map(Vec::len).collect(),
        });
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for r in trajectory {
        if !distinct.contains(&r) {
            distinct.push(r);
        }
    }
    if distinct.len() < 3 {
        return Err(Error::Protocol(format!(
            "trajectory has {} distinct points, at least 3 needed",
            distinct.len()
        )));
    }
    let mean: Vec<f64> = (0..p).map(|j| trajectory.iter().map(|r| r[j]).sum::<f64>() / t as f64).collect();
    let x: Vec<Vec<f64>> = trajectory.iter().map(|r| r.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let total_variance: f64 = x.iter().map(|r| dot(r, r)).sum();
    if !(total_variance > 0.0) {
        return Err(Error::Degenerate("trajectory has zero variance".into()));
    }

    let mut components: Vec<Vec<f64>> = Vec::with_capacity(2);
    let mut eigenvalues = [0.0; 2];
    if t <= p {
        // Eigenvectors u of X·Xᵀ map to components Xᵀu / ‖Xᵀu‖.
        let gram: Vec<Vec<f64>> = x.iter().map(|a| x.iter().map(|b| dot(a, b)).collect()).collect();
        let mut found: Vec<Vec<f64>> = Vec::new();
        for k in 0..2 {
            let (lambda, u) = power_iteration(&gram, &found);
            let mut c = vec![0.0; p];
            for (ui, row) in u.iter().zip(&x) {
                c.iter_mut().zip(row).for_each(|(ci, xi)| *ci += ui * xi);
            }
            for prev in &components {
                let d = dot(&c, prev);
                c.iter_mut().zip(prev).for_each(|(a, b)| *a -= d * b);
            }
            if normalize(&mut c) <= 1e-12 {
                c = orthogonal_to(&components[0]);
            }
            eigenvalues[k] = lambda;
            found.push(u);
            components.push(c);
        }
    } else {
        let cov: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..p).map(|j| x.iter().map(|r| r[i] * r[j]).sum()).collect())
            .collect();
        for k in 0..2 {
            let (lambda, mut c) = power_iteration(&cov, &components);
            if normalize(&mut c) <= 1e-12 {
                c = orthogonal_to(&components[0]);
            }
            eigenvalues[k] = lambda;
            components.push(c);
        }
    }
    let components: [Vec<f64>; 2] = [components[0].clone(), components[1].clone()];
    let projections = x.iter().map(|r| [dot(r, &components[0]), dot(r, &components[1])]).collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
        total_variance,
        projections,
    })
}

/// Grid around the projected trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    /// Points per axis.
    pub resolution: usize,
    /// Extra room on each side, as a fraction of the trajectory's span.
    pub margin: f64,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            resolution: 21,
            margin: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub pca: Pca,
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `loss[i][j]` at `(alphas[i], betas[j])`.
    pub loss: Vec<Vec<f64>>,
    pub trajectory_loss: Vec<f64>,
}

impl Landscape {
    pub fn all_finite(&self) -> bool {
        self.loss.iter().flatten().chain(&self.trajectory_loss).all(|v| v.is_finite())
    }
}

fn axis(values: impl Iterator<Item = f64> + Clone, grid: &Grid) -> Vec<f64> {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 0.0 { hi - lo } else { 1.0 };
    let (a, b) = (lo - grid.margin * span, hi + grid.margin * span);
    let r = grid.resolution;
    (0..r).map(|i| if r == 1 { (a + b) / 2.0 } else { a + (b - a) * i as f64 / (r - 1) as f64 }).collect()
}

/// Loss over the plane of the top two principal directions of
/// `trajectory`, plus the loss along the trajectory itself.
pub fn pca_landscape(
    trajectory: &[Vec<f64>],
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    grid: &Grid,
) -> Result<Landscape> {
    if grid.resolution == 0 {
        return Err(Error::Config("grid resolution must be positive".into()));
    }
    let pca = principal_components(trajectory)?;
    let alphas = axis(pca.projections.iter().map(|p| p[0]), grid);
    let betas = axis(pca.projections.iter().map(|p| p[1]), grid);
    let mut loss = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        loss.push(betas.iter().map(|&b| loss_fn(&pca.point(a, b))).collect::<Result<Vec<_>>>()?);
    }
    let trajectory_loss = trajectory.iter().map(|r| loss_fn(r)).collect::<Result<Vec<_>>>()?;
    Ok(Landscape {
        pca,
        alphas,
        betas,
        loss,
        trajectory_loss,
    })
}

/// Writes `landscape_grid.csv` (alpha, beta, loss) and
/// `landscape_trajectory.csv` (epoch, pc1, pc2, loss) into `dir`.
pub fn write_landscape(landscape: &Landscape, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let grid_path = dir.join("landscape_grid.csv");
    let mut w = csv::Writer::from_path(&grid_path).map_err(csv_err)?;
    w.write_record(["alpha", "beta", "loss"]).map_err(csv_err)?;
    for (i, a) in landscape.alphas.iter().enumerate() {
        for (j, b) in landscape.betas.iter().enumerate() {
            w.write_record([a.to_string(), b.to_string(), landscape.loss[i][j].to_string()]).map_err(csv_err)?;
        }
    }
    w.flush()?;
    let traj_path = dir.join("landscape_trajectory.csv");
    let mut w = csv::Writer::from_path(&traj_path).map_err(csv_err)?;
    w.write_record(["epoch", "pc1", "pc2", "loss"]).map_err(csv_err)?;
    for (e, (p, l)) in landscape.pca.projections.iter().zip(&landscape.trajectory_loss).enumerate() {
        w.write_record([e.to_string(), p[0].to_string(), p[1].to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(vec![grid_path, traj_path])
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_axis_trajectory() {
        let traj: Vec<Vec<f64>> = (0..5).map(|i| vec![0.0, i as f64, 0.0]).collect();
        let pca = principal_components(&traj).unwrap();
        assert!((pca.components[0][1].abs() - 1.0).abs() < 1e-10);
        let sign = pca.components[0][1].signum();
        for (i, p) in pca.projections.iter().enumerate() {
            assert!((sign * p[0] - (i as f64 - 2.0)).abs() < 1e-10);
        }
        assert!((pca.explained() - 1.0).abs() < 1e-12);
        assert!(dot(&pca.components[0], &pca.components[1]).abs() < 1e-8);
    }

    #[test]
    fn covariance_form_used_for_long_trajectories() {
        // More points than dimensions.
        let traj: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64).sin(), 0.1 * i as f64, 0.0]).collect();
        let pca = principal_components(&traj).unwrap();
        for c in &pca.components {
            assert!((dot(c, c) - 1.0).abs() < 1e-8);
        }
        assert!(pca.explained() > 0.999_999);
    }

    #[test]
    fn degenerate_trajectories_rejected() {
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(principal_components(&same), Err(Error::Protocol(_))));
        let two = vec![vec![1.0, 2.0], vec![1.0, 3.0], vec![1.0, 2.0]];
        assert!(principal_components(&two).is_err());
    }

    #[test]
    fn landscape_grid_shape_and_files() {
        let traj: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64, (i * i) as f64, 1.0]).collect();
        let grid = Grid {
            resolution: 5,
            margin: 0.2,
        };
        let l = pca_landscape(&traj, |x| Ok(x.iter().map(|v| v * v).sum()), &grid).unwrap();
        assert_eq!(l.loss.len(), 5);
        assert!(l.loss.iter().all(|r| r.len() == 5));
        assert!(l.all_finite());
        let dir = tempfile::tempdir().unwrap();
        let paths = write_landscape(&l, dir.path()).unwrap();
        let grid_csv = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(grid_csv.lines().count(), 26);
        assert!(grid_csv.starts_with("alpha,beta,loss\n"));
    }
}
