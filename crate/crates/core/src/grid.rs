//! Uniform dyadic time grids on `[0, 1]` and grid-valued paths.

use std::io::Write;

use crate::error::{Error, Result};

/// Largest supported dyadic level. Keeps node counts and the circulant
/// embedding size comfortably inside `usize` and memory.
pub const MAX_LEVEL: u32 = 24;

/// The partition `{ i / 2^m : 0 <= i <= 2^m }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TimeGrid {
    level: u32,
}

impl TimeGrid {
    pub fn new(level: u32) -> Result<Self> {
        if level > MAX_LEVEL {
            return Err(Error::validation(
                "grid_level",
                format!("must be at most {MAX_LEVEL}, got {level}"),
            ));
        }
        Ok(Self { level })
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Number of intervals, `2^m`.
    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    /// Number of nodes, `2^m + 1`.
    pub fn nodes(&self) -> usize {
        self.steps() + 1
    }

    pub fn mesh(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    /// Node `t_i = i / 2^m`; exact in binary floating point.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps() as f64
    }

    pub fn times(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.nodes()).map(move |i| self.time(i))
    }
}

/// A path sampled on the nodes of a [`TimeGrid`], stored node-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("trajectory dimension must be positive".into()));
        }
        if values.len() != grid.nodes() * dim {
            return Err(Error::Shape(format!(
                "expected {} values for {} nodes of dimension {}, got {}",
                grid.nodes() * dim,
                grid.nodes(),
                dim,
                values.len()
            )));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn zeros(grid: TimeGrid, dim: usize) -> Self {
        Self {
            grid,
            dim,
            values: vec![0.0; grid.nodes() * dim],
        }
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(grid: TimeGrid, dim: usize, mut f: impl FnMut(f64, &mut [f64])) -> Self {
        let mut values = vec![0.0; grid.nodes() * dim];
        for (i, chunk) in values.chunks_mut(dim).enumerate() {
            f(grid.time(i), chunk);
        }
        Self { grid, dim, values }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn initial(&self) -> &[f64] {
        self.node(0)
    }

    pub fn terminal(&self) -> &[f64] {
        self.node(self.grid.steps())
    }

    /// Iterator over nodes.
    pub fn iter_nodes(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.dim)
    }

    /// Largest absolute component over all nodes.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup-norm of the componentwise difference.
    pub fn sup_distance(&self, other: &Trajectory) -> Result<f64> {
        self.check_compatible(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub(crate) fn check_compatible(&self, other: &Trajectory) -> Result<()> {
        if self.grid != other.grid || self.dim != other.dim {
            return Err(Error::Shape(format!(
                "trajectories differ: level {} dim {} vs level {} dim {}",
                self.grid.level(),
                self.dim,
                other.grid.level(),
                other.dim
            )));
        }
        Ok(())
    }

    /// Writes one row per node: `node,t,x0,x1,...`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header = vec!["node".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|k| format!("x{k}")));
        out.write_record(&header)?;
        for (i, node) in self.iter_nodes().enumerate() {
            let mut row = vec![i.to_string(), self.grid.time(i).to_string()];
            row.extend(node.iter().map(|v| v.to_string()));
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}
