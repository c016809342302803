//! Level-2 and level-3 lifts of grid paths and the truncated tensor algebra
//! they live in.
//!
//! A lift stores, for every grid interval `[t_i, t_{i+1}]`, the iterated
//! integrals of levels `1..=N` of the driving path over that interval.
//! Increments over longer stretches are rebuilt on demand with Chen's
//! relation. Tensors are stored flat in row-major multi-index order, so the
//! level-2 entry `(j1, j2)` sits at `j1 * d + j2`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{TimeGrid, Trajectory};

/// Truncation depth of a lift.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub enum Depth {
    Two,
    Three,
}

impl Depth {
    pub fn get(self) -> usize {
        match self {
            Depth::Two => 2,
            Depth::Three => 3,
        }
    }

    /// `⌊1/α⌋` for a roughness exponent `α ∈ (1/4, 1/2]`.
    pub fn for_alpha(alpha: f64) -> Result<Self> {
        if !(alpha > 0.25 && alpha <= 0.5) {
            return Err(Error::validation(
                "alpha",
                format!("must lie in (0.25, 0.5], got {alpha}"),
            ));
        }
        Ok(if alpha > 1.0 / 3.0 {
            Depth::Two
        } else {
            Depth::Three
        })
    }
}

impl TryFrom<usize> for Depth {
    type Error = Error;
    fn try_from(n: usize) -> Result<Self> {
        match n {
            2 => Ok(Depth::Two),
            3 => Ok(Depth::Three),
            _ => Err(Error::validation("depth", format!("must be 2 or 3, got {n}"))),
        }
    }
}

impl From<Depth> for usize {
    fn from(d: Depth) -> usize {
        d.get()
    }
}

/// Default working roughness for a Hurst parameter: `0.01` below `H`, or
/// halfway to the depth threshold (`1/3` or `1/4`) below `H` when that is closer,
/// so the depth implied by `α` always matches the one implied by `H`.
pub fn default_alpha(hurst: f64) -> f64 {
    let floor = if hurst > 1.0 / 3.0 { 1.0 / 3.0 } else { 0.25 };
    hurst - (0.5 * (hurst - floor)).min(0.01)
}

/// Truncated signature increment `(x¹, x², x³)` over one time interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Increment {
    dim: usize,
    depth: Depth,
    l1: Vec<f64>,
    l2: Vec<f64>,
    /// Empty when `depth == Two`.
    l3: Vec<f64>,
}

impl Increment {
    pub fn zero(dim: usize, depth: Depth) -> Self {
        let l3 = match depth {
            Depth::Two => Vec::new(),
            Depth::Three => vec![0.0; dim * dim * dim],
        };
        Self {
            dim,
            depth,
            l1: vec![0.0; dim],
            l2: vec![0.0; dim * dim],
            l3,
        }
    }

    /// Exact iterated integrals of a straight segment with displacement `v`:
    /// `v^{⊗k} / k!`.
    pub fn segment(v: &[f64], depth: Depth) -> Self {
        let d = v.len();
        let mut out = Self::zero(d, depth);
        out.l1.copy_from_slice(v);
        for a in 0..d {
            for b in 0..d {
                out.l2[a * d + b] = 0.5 * v[a] * v[b];
            }
        }
        if depth == Depth::Three {
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        out.l3[(a * d + b) * d + c] = v[a] * v[b] * v[c] / 6.0;
                    }
                }
            }
        }
        out
    }

    /// Builds an increment from explicit level tensors.
    pub fn from_levels(dim: usize, l1: Vec<f64>, l2: Vec<f64>, l3: Option<Vec<f64>>) -> Result<Self> {
        if l1.len() != dim || l2.len() != dim * dim {
            return Err(Error::Shape("level tensor sizes do not match dimension".into()));
        }
        let (depth, l3) = match l3 {
            None => (Depth::Two, Vec::new()),
            Some(t) if t.len() == dim * dim * dim => (Depth::Three, t),
            Some(_) => return Err(Error::Shape("level-3 tensor has wrong size".into())),
        };
        Ok(Self { dim, depth, l1, l2, l3 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> Depth {
        self.depth
    }

    /// Level `k` tensor, `k ∈ 1..=depth`.
    pub fn level(&self, k: usize) -> &[f64] {
        match k {
            1 => &self.l1,
            2 => &self.l2,
            3 if self.depth == Depth::Three => &self.l3,
            _ => panic!("level {k} outside depth {}", self.depth.get()),
        }
    }

    /// Euclidean norm of the level-`k` tensor.
    pub fn level_norm(&self, k: usize) -> f64 {
        self.level(k).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_compatible(&self, other: &Increment) -> Result<()> {
        if self.dim != other.dim || self.depth != other.depth {
            return Err(Error::Shape(format!(
                "cannot combine increments of (dim {}, depth {}) and (dim {}, depth {})",
                self.dim,
                self.depth.get(),
                other.dim,
                other.depth.get()
            )));
        }
        Ok(())
    }

    /// In-place Chen product: `self` over `[s,u]` becomes the increment over
    /// `[s,t]` given `next` over `[u,t]`.
    pub fn extend(&mut self, next: &Increment) -> Result<()> {
        self.check_compatible(next)?;
        let d = self.dim;
        if self.depth == Depth::Three {
            for a in 0..d {
                for b in 0..d {
                    for c in 0..d {
                        let idx = (a * d + b) * d + c;
                        self.l3[idx] += next.l3[idx]
                            + self.l1[a] * next.l2[b * d + c]
                            + self.l2[a * d + b] * next.l1[c];
                    }
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                self.l2[a * d + b] += next.l2[a * d + b] + self.l1[a] * next.l1[b];
            }
        }
        for a in 0..d {
            self.l1[a] += next.l1[a];
        }
        Ok(())
    }

    /// Multiplies level `k` by `c^k`.
    pub fn dilate(&self, c: f64) -> Self {
        let c2 = c * c;
        let c3 = c2 * c;
        Self {
            dim: self.dim,
            depth: self.depth,
            l1: self.l1.iter().map(|v| c * v).collect(),
            l2: self.l2.iter().map(|v| c2 * v).collect(),
            l3: self.l3.iter().map(|v| c3 * v).collect(),
        }
    }
}

/// Chen's relation: combines increments over `[s,u]` and `[u,t]`.
pub fn chen_combine(a: &Increment, b: &Increment) -> Result<Increment> {
    let mut out = a.clone();
    out.extend(b)?;
    Ok(out)
}

/// Per-interval lift of a grid path; the discrete stand-in for a geometric
/// rough path.
#[derive(Clone, Debug, PartialEq)]
pub struct RoughPathLift {
    grid: TimeGrid,
    dim: usize,
    depth: Depth,
    intervals: Vec<Increment>,
}

impl RoughPathLift {
    /// Assembles a lift from explicit interval increments. No geometricity
    /// check is made; [`lift_piecewise_linear`] is the usual constructor.
    pub fn from_intervals(grid: TimeGrid, intervals: Vec<Increment>) -> Result<Self> {
        if intervals.len() != grid.steps() {
            return Err(Error::Shape(format!(
                "expected {} intervals, got {}",
                grid.steps(),
                intervals.len()
            )));
        }
        let first = &intervals[0];
        let (dim, depth) = (first.dim, first.depth);
        for inc in &intervals[1..] {
            first.check_compatible(inc)?;
        }
        Ok(Self {
            grid,
            dim,
            depth,
            intervals,
        })
    }

    pub fn zero(grid: TimeGrid, dim: usize, depth: Depth) -> Self {
        Self {
            grid,
            dim,
            depth,
            intervals: vec![Increment::zero(dim, depth); grid.steps()],
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> Depth {
        self.depth
    }

    pub fn interval(&self, i: usize) -> &Increment {
        &self.intervals[i]
    }

    pub fn intervals(&self) -> &[Increment] {
        &self.intervals
    }

    /// Increment over `[t_s, t_t]` (node indices, `s <= t`) via Chen's relation.
    pub fn increment(&self, s: usize, t: usize) -> Increment {
        assert!(s <= t && t <= self.grid.steps(), "bad node range {s}..{t}");
        let mut acc = Increment::zero(self.dim, self.depth);
        for inc in &self.intervals[s..t] {
            acc.extend(inc).expect("uniform shape");
        }
        acc
    }

    /// Every stored entry as `(interval, level, multi-index, value)`.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, Vec<usize>, f64)> + '_ {
        let d = self.dim;
        self.intervals.iter().enumerate().flat_map(move |(i, inc)| {
            (1..=inc.depth.get()).flat_map(move |k| {
                inc.level(k).iter().enumerate().map(move |(flat, &v)| {
                    let mut idx = vec![0; k];
                    let mut rest = flat;
                    for slot in idx.iter_mut().rev() {
                        *slot = rest % d;
                        rest /= d;
                    }
                    (i, k, idx, v)
                })
            })
        })
    }

    /// Flat dump `interval,level,index,value`; the multi-index is dot-joined.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["interval", "level", "index", "value"])?;
        for (i, k, idx, v) in self.entries() {
            out.write_record([
                i.to_string(),
                k.to_string(),
                join_index(&idx),
                v.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn join_index(idx: &[usize]) -> String {
    idx.iter()
        .map(|j| j.to_string())
        .collect::<Vec<_>>()
        .join(".")
}

/// Natural lift of the piecewise-linear interpolation of `path`.
pub fn lift_piecewise_linear(path: &Trajectory, depth: usize) -> Result<RoughPathLift> {
    let depth = Depth::try_from(depth)?;
    Ok(lift_with_depth(path, depth))
}

pub fn lift_with_depth(path: &Trajectory, depth: Depth) -> RoughPathLift {
    let d = path.dim();
    let mut v = vec![0.0; d];
    let intervals = path
        .values()
        .windows(2 * d)
        .step_by(d)
        .map(|w| {
            for k in 0..d {
                v[k] = w[d + k] - w[k];
            }
            Increment::segment(&v, depth)
        })
        .collect();
    RoughPathLift {
        grid: path.grid(),
        dim: d,
        depth,
        intervals,
    }
}

/// Scales the lift by `c`: level `k` is multiplied by `c^k`.
pub fn dilate(x: &RoughPathLift, c: f64) -> RoughPathLift {
    RoughPathLift {
        grid: x.grid,
        dim: x.dim,
        depth: x.depth,
        intervals: x.intervals.iter().map(|inc| inc.dilate(c)).collect(),
    }
}

/// Grid maximum of `|x^k_{s,t}| / (t-s)^{kα}` for every level `k`.
pub fn holder_estimate(x: &RoughPathLift, alpha: f64) -> Vec<f64> {
    let n = x.grid.steps();
    let mesh = x.grid.mesh();
    let depth = x.depth.get();
    let mut best = vec![0.0f64; depth];
    for s in 0..n {
        let mut acc = Increment::zero(x.dim, x.depth);
        for t in s + 1..=n {
            acc.extend(&x.intervals[t - 1]).expect("uniform shape");
            let dt = (t - s) as f64 * mesh;
            for (k, b) in best.iter_mut().enumerate() {
                let level = k + 1;
                let r = acc.level_norm(level) / dt.powf(level as f64 * alpha);
                *b = b.max(r);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn linear_path(level: u32) -> Trajectory {
        Trajectory::from_fn(TimeGrid::new(level).unwrap(), 1, |t, x| x[0] = t)
    }

    #[test]
    fn depth_from_alpha() {
        assert_eq!(Depth::for_alpha(0.49).unwrap(), Depth::Two);
        assert_eq!(Depth::for_alpha(0.5).unwrap(), Depth::Two);
        assert_eq!(Depth::for_alpha(1.0 / 3.0).unwrap(), Depth::Three);
        assert_eq!(Depth::for_alpha(0.29).unwrap(), Depth::Three);
        assert!(Depth::for_alpha(0.25).is_err());
        assert!(Depth::for_alpha(0.6).is_err());
        assert!(Depth::try_from(4).is_err());
    }

    #[test]
    fn default_alpha_keeps_depth_of_hurst() {
        for &h in &[0.255, 0.26, 0.3, 1.0 / 3.0, 0.34, 0.45, 0.5] {
            let a = default_alpha(h);
            assert!(a > 0.25 && a < h, "H={h} alpha={a}");
            let by_h = if h > 1.0 / 3.0 { Depth::Two } else { Depth::Three };
            assert_eq!(Depth::for_alpha(a).unwrap(), by_h, "H={h}");
        }
    }

    #[test]
    fn lift_of_unit_segment() {
        let lift = lift_piecewise_linear(&linear_path(0), 3).unwrap();
        let inc = lift.interval(0);
        assert_eq!(inc.level(1), &[1.0]);
        assert_eq!(inc.level(2), &[0.5]);
        assert_abs_diff_eq!(inc.level(3)[0], 1.0 / 6.0, epsilon = 1e-16);
    }

    #[test]
    fn constant_path_lifts_to_zero() {
        let path = Trajectory::from_fn(TimeGrid::new(3).unwrap(), 2, |_, x| x.fill(4.0));
        let lift = lift_piecewise_linear(&path, 3).unwrap();
        assert!(lift.entries().all(|(_, _, _, v)| v == 0.0));
    }

    #[test]
    fn planar_segment_level_two() {
        let inc = Increment::segment(&[1.0, 0.0], Depth::Two);
        assert_eq!(inc.level(2), &[0.5, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_depth() {
        assert!(lift_piecewise_linear(&linear_path(2), 1).is_err());
        assert!(lift_piecewise_linear(&linear_path(2), 4).is_err());
    }

    #[test]
    fn chen_on_halves_matches_direct() {
        let lift = lift_piecewise_linear(&linear_path(1), 2).unwrap();
        let joined = chen_combine(lift.interval(0), lift.interval(1)).unwrap();
        assert_eq!(joined.level(2), &[0.5]);
        assert_eq!(joined.level(1), &[1.0]);
    }

    #[test]
    fn zero_is_identity() {
        let a = Increment::segment(&[0.3, -1.2], Depth::Three);
        let z = Increment::zero(2, Depth::Three);
        assert_eq!(chen_combine(&a, &z).unwrap(), a);
        assert_eq!(chen_combine(&z, &a).unwrap(), a);
    }

    #[test]
    fn chen_rejects_shape_mismatch() {
        let a = Increment::segment(&[1.0], Depth::Two);
        let b = Increment::segment(&[1.0, 2.0], Depth::Two);
        let c = Increment::segment(&[1.0], Depth::Three);
        assert!(chen_combine(&a, &b).is_err());
        assert!(chen_combine(&a, &c).is_err());
    }

    #[test]
    fn dilation_examples() {
        let lift = lift_piecewise_linear(&linear_path(0), 2).unwrap();
        assert_eq!(dilate(&lift, 1.0), lift);
        assert_eq!(dilate(&lift, 2.0).interval(0).level(2), &[2.0]);
        let path = Trajectory::from_fn(TimeGrid::new(3).unwrap(), 2, |t, x| {
            x[0] = (3.0 * t).sin();
            x[1] = t * t - 0.3;
        });
        let lift = lift_piecewise_linear(&path, 3).unwrap();
        assert_eq!(dilate(&dilate(&lift, 0.5), 4.0), dilate(&lift, 2.0));
    }

    #[test]
    fn holder_examples() {
        let lift = lift_piecewise_linear(&linear_path(4), 2).unwrap();
        let est = holder_estimate(&lift, 0.5);
        assert_abs_diff_eq!(est[0], 1.0, epsilon = 1e-14);

        let flat = Trajectory::zeros(TimeGrid::new(3).unwrap(), 2);
        let est = holder_estimate(&lift_piecewise_linear(&flat, 3).unwrap(), 0.3);
        assert_eq!(est, vec![0.0; 3]);
    }

    #[test]
    fn holder_is_homogeneous() {
        let path = Trajectory::from_fn(TimeGrid::new(4).unwrap(), 2, |t, x| {
            x[0] = (7.0 * t).cos();
            x[1] = (5.0 * t).sin();
        });
        let lift = lift_piecewise_linear(&path, 3).unwrap();
        let base = holder_estimate(&lift, 0.3);
        let scaled = holder_estimate(&dilate(&lift, -2.0), 0.3);
        for k in 0..3 {
            assert_eq!(scaled[k], base[k] * 2f64.powi(k as i32 + 1));
        }
    }

    #[test]
    fn csv_dump_lists_every_entry() {
        let path = Trajectory::from_fn(TimeGrid::new(1).unwrap(), 2, |t, x| {
            x[0] = t;
            x[1] = -t;
        });
        let lift = lift_piecewise_linear(&path, 2).unwrap();
        let mut buf = Vec::new();
        lift.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * (2 + 4));
        assert!(text.contains("\n0,2,0.1,-0.125\n"), "{text}");
    }
}
