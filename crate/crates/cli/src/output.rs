//! CSV, VTK and JSON writers. Layouts are pinned by `SCHEMA_VERSION`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crossdiff::experiments::{ConvergenceRow, SweepTable};
use crossdiff::fields::SpeciesField;
use crossdiff::mesh::{Layout, Mesh};
use crossdiff::solver::StepReport;

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest round-trip text, in exponent form outside `[1e-4, 1e15)`.
pub fn num(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn diagnostics_header(species: usize) -> String {
    let mut cols = vec![
        "step".to_string(),
        "t".into(),
        "dt".into(),
        "entropy".into(),
        "relative_entropy".into(),
        "dissipation".into(),
        "cross_dissipation".into(),
    ];
    cols.extend((1..=species).map(|i| format!("mass_{i}")));
    cols.extend(["min_u", "newton_iterations", "path_length", "residual"].map(String::from));
    cols.join(",")
}

pub fn diagnostics_row(r: &StepReport) -> String {
    let rel = r.relative_entropy.map(num).unwrap_or_default();
    let mut cols = vec![
        r.step.to_string(),
        num(r.time),
        num(r.dt),
        num(r.entropy),
        rel,
        num(r.dissipation),
        num(r.cross_dissipation),
    ];
    cols.extend(r.masses.iter().map(|&m| num(m)));
    cols.push(num(r.min_value));
    cols.push(r.newton_iterations.to_string());
    cols.push(r.path.len().to_string());
    cols.push(num(r.residual_norm));
    cols.join(",")
}

pub struct Diagnostics {
    out: BufWriter<File>,
}

impl Diagnostics {
    pub fn create(path: &Path, species: usize) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", diagnostics_header(species))?;
        Ok(Self { out })
    }

    pub fn push(&mut self, r: &StepReport) -> io::Result<()> {
        writeln!(self.out, "{}", diagnostics_row(r))
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}

/// `x,u_1,...,u_N` per cell.
pub fn write_snapshot_csv(w: &mut impl Write, field: &SpeciesField, mesh: &Mesh) -> io::Result<()> {
    let n = field.species_count();
    let header: Vec<String> = std::iter::once("x".to_string())
        .chain((1..=n).map(|i| format!("u_{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (k, c) in mesh.cells().iter().enumerate() {
        write!(w, "{}", num(c.center[0]))?;
        for v in field.cell(k) {
            write!(w, ",{}", num(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Legacy ASCII VTK, structured points with one cell scalar per species.
pub fn write_snapshot_vtk(
    w: &mut impl Write,
    field: &SpeciesField,
    mesh: &Mesh,
    time: f64,
) -> io::Result<()> {
    let Layout::Rectangle { lo, hi, nx, ny } = mesh.layout() else {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "VTK snapshots need a 2D mesh",
        ));
    };
    let (dx, dy) = ((hi[0] - lo[0]) / nx as f64, (hi[1] - lo[1]) / ny as f64);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "crossdiff t={time}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} 1", nx + 1, ny + 1)?;
    writeln!(w, "ORIGIN {} {} 0", lo[0], lo[1])?;
    writeln!(w, "SPACING {dx} {dy} 1")?;
    writeln!(w, "CELL_DATA {}", nx * ny)?;
    for i in 0..field.species_count() {
        writeln!(w, "SCALARS u_{} double 1", i + 1)?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for k in 0..mesh.num_cells() {
            writeln!(w, "{}", num(field.get(i, k)))?;
        }
    }
    Ok(())
}

pub fn write_snapshot(
    dir: &Path,
    step: usize,
    field: &SpeciesField,
    mesh: &Mesh,
    time: f64,
) -> io::Result<()> {
    let (name, two_d) = match mesh.layout() {
        Layout::Interval { .. } => (format!("snapshot_{step:06}.csv"), false),
        Layout::Rectangle { .. } => (format!("snapshot_{step:06}.vtk"), true),
    };
    let mut w = BufWriter::new(File::create(dir.join(name))?);
    if two_d {
        write_snapshot_vtk(&mut w, field, mesh, time)?;
    } else {
        write_snapshot_csv(&mut w, field, mesh)?;
    }
    w.flush()
}

pub fn write_eoc(w: &mut impl Write, rows: &[ConvergenceRow]) -> io::Result<()> {
    writeln!(w, "cells,error,eoc")?;
    for r in rows {
        let eoc = r.eoc.map(num).unwrap_or_default();
        writeln!(w, "{},{},{eoc}", r.cells, num(r.error))?;
    }
    Ok(())
}

pub fn write_sweep(w: &mut impl Write, table: &SweepTable) -> io::Result<()> {
    writeln!(w, "astar,error,ratio")?;
    for r in &table.rows {
        writeln!(w, "{},{},{}", num(r.astar), num(r.error), num(r.ratio))?;
    }
    Ok(())
}

pub fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>,
) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> io::Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}
