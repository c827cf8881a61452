//! Plain-text outputs.
//!
//! A grid-field file is self-describing CSV: `#` header lines carry the box
//! and the node counts, followed by one comma-separated row per node with
//! its coordinates and field values, nodes in flat-index order.
//!
//! ```text
//! # otdp grid-field v1
//! # lower -3,-3
//! # upper 3,3
//! # counts 150,150
//! # columns x1,x2,mu1
//! -3,-3,0.4121
//! ...
//! ```
//!
//! Numbers use Rust's shortest round-trip formatting, so writing and reading
//! back is lossless and identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path as FsPath;

use crate::dp::TraceRow;
use crate::fpk::EnergyTrace;
use crate::grid::Grid;
use crate::model::BoxDomain;
use crate::sde::Path;
use crate::{Error, Result};

const MAGIC: &str = "otdp grid-field v1";

/// Nodal fields on a tensor grid, `values[i * fields.len() + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFieldFile {
    pub domain: BoxDomain,
    pub counts: Vec<usize>,
    pub fields: Vec<String>,
    pub values: Vec<f64>,
}

impl GridFieldFile {
    /// Bundles node-major data; `values.len()` must be `grid.len() * fields.len()`.
    pub fn new(grid: &Grid, fields: &[&str], values: Vec<f64>) -> Result<GridFieldFile> {
        if fields.is_empty() || values.len() != grid.len() * fields.len() {
            return Err(Error::Incompatible(format!(
                "{} values for {} fields on {} nodes",
                values.len(),
                fields.len(),
                grid.len()
            )));
        }
        Ok(GridFieldFile {
            domain: grid.domain().clone(),
            counts: grid.counts().to_vec(),
            fields: fields.iter().map(|s| s.to_string()).collect(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(&self.domain, &self.counts)
    }

    /// Values of field `k` in node order.
    pub fn field(&self, k: usize) -> Vec<f64> {
        self.values.iter().skip(k).step_by(self.fields.len()).copied().collect()
    }

    /// Whether the header describes `grid` (same counts, same box to 1e-12).
    pub fn matches(&self, grid: &Grid) -> bool {
        let d = grid.domain();
        let close = |a: &[f64], b: &[f64]| {
            a.len() == b.len()
                && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
        };
        self.counts == grid.counts()
            && close(&self.domain.lower, &d.lower)
            && close(&self.domain.upper, &d.upper)
    }

    pub fn to_csv(&self) -> Result<String> {
        let grid = self.grid()?;
        let nf = self.fields.len();
        let mut out = String::new();
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "# {MAGIC}");
        let _ = writeln!(out, "# lower {}", join(&self.domain.lower));
        let _ = writeln!(out, "# upper {}", join(&self.domain.upper));
        let counts: Vec<String> = self.counts.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "# counts {}", counts.join(","));
        let coords: Vec<String> = (1..=grid.dim()).map(|a| format!("x{a}")).collect();
        let _ = writeln!(out, "# columns {},{}", coords.join(","), self.fields.join(","));
        for (i, x) in grid.nodes().enumerate() {
            let _ = writeln!(out, "{},{}", join(x), join(&self.values[i * nf..(i + 1) * nf]));
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<GridFieldFile> {
        let bad = |msg: String| Error::Incompatible(format!("grid-field file: {msg}"));
        let mut lower = None;
        let mut upper = None;
        let mut counts = None;
        let mut columns: Option<Vec<String>> = None;
        let mut magic = false;
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(h) = line.strip_prefix('#') {
                let h = h.trim();
                let (key, rest) = h.split_once(' ').unwrap_or((h, ""));
                let nums = || -> Result<Vec<f64>> {
                    rest.split(',')
                        .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 1))))
                        .collect()
                };
                match key {
                    "otdp" => magic = h == MAGIC,
                    "lower" => lower = Some(nums()?),
                    "upper" => upper = Some(nums()?),
                    "counts" => {
                        counts = Some(
                            rest.split(',')
                                .map(|s| s.trim().parse::<usize>().map_err(|e| bad(format!("counts: {e}"))))
                                .collect::<Result<Vec<_>>>()?,
                        )
                    }
                    "columns" => columns = Some(rest.split(',').map(|s| s.trim().to_string()).collect()),
                    _ => {}
                }
                continue;
            }
            rows.push((ln + 1, line));
        }
        if !magic {
            return Err(bad("missing format line".into()));
        }
        let (lower, upper, counts, columns) = match (lower, upper, counts, columns) {
            (Some(l), Some(u), Some(c), Some(k)) => (l, u, c, k),
            _ => return Err(bad("incomplete header".into())),
        };
        let dim = counts.len();
        if lower.len() != dim || upper.len() != dim || columns.len() <= dim {
            return Err(bad("header dimensions disagree".into()));
        }
        let m: usize = counts.iter().product();
        if rows.len() != m {
            return Err(bad(format!("{} rows, header promises {m}", rows.len())));
        }
        let nf = columns.len() - dim;
        let mut values = Vec::with_capacity(m * nf);
        for (ln, row) in rows {
            let cells: Vec<&str> = row.split(',').collect();
            if cells.len() != columns.len() {
                return Err(bad(format!("line {ln}: {} columns, expected {}", cells.len(), columns.len())));
            }
            for c in &cells[dim..] {
                values.push(c.trim().parse::<f64>().map_err(|e| bad(format!("line {ln}: {e}")))?);
            }
        }
        Ok(GridFieldFile {
            domain: BoxDomain::new(lower, upper),
            counts,
            fields: columns[dim..].to_vec(),
            values,
        })
    }

    pub fn write(&self, path: &FsPath) -> Result<()> {
        fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    pub fn read(path: &FsPath) -> Result<GridFieldFile> {
        GridFieldFile::parse(&fs::read_to_string(path)?)
    }
}

/// Convergence trace of the ergodic iteration: `iteration,residual,ell`.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("iteration,residual,ell\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.iteration, r.residual, r.ell);
    }
    out
}

/// Energy trace: `time,energy`.
pub fn energy_csv(trace: &EnergyTrace) -> String {
    let mut out = String::from("time,energy\n");
    for (t, e) in trace.times.iter().zip(&trace.values) {
        let _ = writeln!(out, "{t},{e}");
    }
    out
}

/// Path dump: `trajectory,t,x1..xn`, one row per retained sample.
pub fn paths_csv(paths: &[Path], dim: usize) -> String {
    let coords: Vec<String> = (1..=dim).map(|a| format!("x{a}")).collect();
    let mut out = format!("trajectory,t,{}\n", coords.join(","));
    for p in paths {
        for (k, t) in p.times.iter().enumerate() {
            let x: Vec<String> = p.state(k).iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{},{t},{}", p.trajectory, x.join(","));
        }
    }
    out
}
