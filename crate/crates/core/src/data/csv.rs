//! Trajectory CSV persistence.
//!
//! Column order is fixed: `t, x1.., y1.., u1..`. Values are written with
//! Rust's shortest round-trip float formatting, so a write/read cycle is
//! lossless for finite doubles. Metadata travels in a JSON sidecar next to
//! the CSV (`<path>.meta.json`).

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DataError, Trajectory, TrajectoryMeta};

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_csv(traj: &Trajectory, path: &Path) -> Result<(), DataError> {
    // Refuse to persist non-finite samples; readers reject them anyway.
    for k in 0..traj.len() {
        for (name, row) in [("x", traj.x_row(k)), ("y", traj.y_row(k)), ("u", traj.u_row(k))] {
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite {
                    row: k,
                    column: format!("{name}{}", c + 1),
                });
            }
        }
    }

    let mut out = String::new();
    out.push('t');
    for c in 0..traj.n_x() {
        out.push_str(&format!(",x{}", c + 1));
    }
    for c in 0..traj.n_y() {
        out.push_str(&format!(",y{}", c + 1));
    }
    for c in 0..traj.n_u() {
        out.push_str(&format!(",u{}", c + 1));
    }
    out.push('\n');
    for k in 0..traj.len() {
        out.push_str(&format!("{}", traj.times()[k]));
        for v in traj.x_row(k) {
            out.push_str(&format!(",{v}"));
        }
        for v in traj.y_row(k) {
            out.push_str(&format!(",{v}"));
        }
        for v in traj.u_row(k) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }

    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| io_err(path, e))?;

    let meta_path = sidecar_path(path);
    let json = serde_json::to_string_pretty(&traj.meta).map_err(|e| DataError::Json {
        path: meta_path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(&meta_path, json).map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Trajectory, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let parse_err = |line: usize, message: String| DataError::Parse {
        path: path.display().to_string(),
        line,
        message,
    };

    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"t") {
        return Err(parse_err(1, format!("first column must be 't', got {:?}", columns.first())));
    }
    let count = |prefix: &str| columns.iter().filter(|c| c.starts_with(prefix)).count();
    let (n_x, n_y, n_u) = (count("x"), count("y"), count("u"));
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=n_x).map(|i| format!("x{i}")))
        .chain((1..=n_y).map(|i| format!("y{i}")))
        .chain((1..=n_u).map(|i| format!("u{i}")))
        .collect();
    if columns != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(parse_err(
            1,
            format!("header must be {:?}, got {:?}", expected.join(","), header),
        ));
    }
    let width = 1 + n_x + n_y + n_u;

    let mut times = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut u = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(parse_err(
                line_no,
                format!("expected {width} columns, got {}", fields.len()),
            ));
        }
        let mut parsed = Vec::with_capacity(width);
        for (c, field) in fields.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(line_no, format!("column {:?}: not a number: {field:?}", columns[c]))
            })?;
            if !v.is_finite() {
                return Err(parse_err(
                    line_no,
                    format!("column {:?}: non-finite value {field:?}", columns[c]),
                ));
            }
            parsed.push(v);
        }
        times.push(parsed[0]);
        x.push(parsed[1..1 + n_x].to_vec());
        y.push(parsed[1 + n_x..1 + n_x + n_y].to_vec());
        u.push(parsed[1 + n_x + n_y..].to_vec());
    }
    if times.is_empty() {
        return Err(parse_err(2, "no data rows".into()));
    }

    let meta_path = sidecar_path(path);
    let meta = match fs::read_to_string(&meta_path) {
        Ok(json) => serde_json::from_str(&json).map_err(|e| DataError::Json {
            path: meta_path.display().to_string(),
            message: e.to_string(),
        })?,
        Err(_) => TrajectoryMeta {
            system: String::new(),
            dt: if times.len() > 1 { times[1] - times[0] } else { 0.0 },
            ..Default::default()
        },
    };

    Trajectory::new(times, x, y, u, meta)
}
