//! On-disk formats for fields and observation lists.
//!
//! A field file is the line `MPDA1`, a header line `nx ny dx dy boundary`,
//! then `nx * ny` little-endian `f64` values in row-major order. An
//! observation file holds one `i j value variance` record per line; `#`
//! starts a comment and fractional coordinates snap to the nearest node.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{snap_to_node, Observation, ObservationSet};
use crate::grid::GridSpec;
use crate::oracle::Field;

pub const FIELD_MAGIC: &str = "MPDA1";

pub fn write_field<W: Write>(mut out: W, field: &Field) -> Result<()> {
    let g = &field.grid;
    writeln!(out, "{FIELD_MAGIC}")?;
    writeln!(out, "{} {} {} {} {}", g.nx(), g.ny(), g.dx(), g.dy(), g.boundary())?;
    let mut body = Vec::with_capacity(8 * field.values.len());
    for v in &field.values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

fn read_line<R: BufRead>(input: &mut R, what: &str) -> Result<String> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 || !line.ends_with('\n') {
        return Err(Error::Format(format!("truncated {what}")));
    }
    line.pop();
    Ok(line)
}

pub fn read_field<R: Read>(input: R) -> Result<Field> {
    let mut input = BufReader::new(input);
    let magic = read_line(&mut input, "magic line")?;
    if magic != FIELD_MAGIC {
        return Err(Error::Format(format!("expected magic '{FIELD_MAGIC}', found '{magic}'")));
    }
    let header = read_line(&mut input, "header")?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let [nx, ny, dx, dy, boundary] = parts.as_slice() else {
        return Err(Error::Format(format!("header needs 5 fields, found {}", parts.len())));
    };
    let bad = |name: &str, v: &str| Error::Format(format!("header {name} '{v}' does not parse"));
    let grid = GridSpec::new(
        nx.parse().map_err(|_| bad("nx", nx))?,
        ny.parse().map_err(|_| bad("ny", ny))?,
        dx.parse().map_err(|_| bad("dx", dx))?,
        dy.parse().map_err(|_| bad("dy", dy))?,
        boundary.parse()?,
    )?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    if body.len() != 8 * grid.len() {
        return Err(Error::Format(format!("expected {} value bytes, found {}", 8 * grid.len(), body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8"))).collect();
    Field::new(grid, values)
}

pub fn save_field(path: &Path, field: &Field) -> Result<()> {
    write_field(BufWriter::new(File::create(path)?), field)
}

pub fn load_field(path: &Path) -> Result<Field> {
    read_field(File::open(path)?)
}

pub fn write_observations<W: Write>(mut out: W, grid: &GridSpec, obs: &ObservationSet) -> Result<()> {
    writeln!(out, "# i j value variance")?;
    for o in obs.entries() {
        if o.node >= grid.len() {
            return Err(Error::Observation(format!("node {} outside {} nodes", o.node, grid.len())));
        }
        let (i, j) = grid.coords(o.node);
        writeln!(out, "{i} {j} {} {}", o.value, o.variance)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_observations<R: Read>(input: R, grid: &GridSpec) -> Result<ObservationSet> {
    let mut obs = ObservationSet::default();
    for (k, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        let record = line.split('#').next().unwrap_or("").trim();
        if record.is_empty() {
            continue;
        }
        let fields: Vec<&str> = record.split_whitespace().collect();
        let line_no = k + 1;
        if fields.len() != 4 {
            return Err(Error::Format(format!("line {line_no}: expected 4 fields, found {}", fields.len())));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("line {line_no}: '{s}' is not a number")))
        };
        let node = snap_to_node(grid, num(fields[0])?, num(fields[1])?)
            .map_err(|e| Error::Format(format!("line {line_no}: {e}")))?;
        obs.push(Observation { node, value: num(fields[2])?, variance: num(fields[3])? });
    }
    obs.validate(grid.len())?;
    Ok(obs)
}

pub fn save_observations(path: &Path, grid: &GridSpec, obs: &ObservationSet) -> Result<()> {
    write_observations(BufWriter::new(File::create(path)?), grid, obs)
}

pub fn load_observations(path: &Path, grid: &GridSpec) -> Result<ObservationSet> {
    read_observations(File::open(path)?, grid)
}
