//! Trajectory CSV and atomic multi-file writes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ptchain_core::sim::Sample;

use crate::CliError;

/// `t,x0,x1,...,xn[,xi1,...,xin],u0,u,gamma,V`.
pub fn csv_header(n: usize, with_xi: bool) -> String {
    let mut cols = vec!["t".to_string(), "x0".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    if with_xi {
        cols.extend((1..=n).map(|i| format!("xi{i}")));
    }
    cols.extend(["u0", "u", "gamma", "V"].map(String::from));
    cols.join(",")
}

/// Nine significant digits.
pub fn num(v: f64) -> String {
    // Adding 0.0 turns -0.0 into 0.0.
    format!("{:.8e}", v + 0.0)
}

pub fn trajectory_csv(samples: &[Sample], n: usize) -> String {
    let with_xi = samples.first().is_some_and(|s| s.xi.is_some());
    let mut out = csv_header(n, with_xi);
    out.push('\n');
    for s in samples {
        let mut row = vec![num(s.t), num(s.x0)];
        row.extend(s.x.iter().map(|v| num(*v)));
        if let Some(xi) = &s.xi {
            row.extend(xi.iter().map(|v| num(*v)));
        }
        row.extend([num(s.u0), num(s.u), num(s.gamma), s.v.map(num).unwrap_or_default()]);
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Writes every file or none: contents go to temporaries first and are
/// renamed into place only after all of them were written.
pub fn write_all(dir: &Path, files: &[(String, String)]) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &Path, e: std::io::Error| CliError::Io { path: path.to_path_buf(), source: e };
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let cleanup = |staged: &[(PathBuf, PathBuf)]| {
        for (tmp, _) in staged {
            let _ = fs::remove_file(tmp);
        }
    };
    for (name, body) in files {
        let dest = dir.join(name);
        let tmp = dir.join(format!(".{name}.partial"));
        if let Err(e) = fs::write(&tmp, body) {
            cleanup(&staged);
            let _ = fs::remove_file(&tmp);
            return Err(io(&tmp, e));
        }
        staged.push((tmp, dest));
    }
    for (tmp, dest) in &staged {
        if let Err(e) = fs::rename(tmp, dest) {
            cleanup(&staged);
            return Err(io(dest, e));
        }
    }
    Ok(staged.into_iter().map(|(_, d)| d).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn header_layout() {
        assert_eq!(csv_header(2, false), "t,x0,x1,x2,u0,u,gamma,V");
        assert_eq!(csv_header(3, true), "t,x0,x1,x2,x3,xi1,xi2,xi3,u0,u,gamma,V");
    }

    #[test]
    fn rows_carry_nine_significant_digits() {
        let s = Sample {
            t: 0.1,
            x0: 1.0 / 3.0,
            x: DVector::from_vec(vec![-2.0, 0.0]),
            xi: None,
            u0: 1e-300,
            u: 5.0,
            gamma: 0.4,
            v: Some(1.5),
        };
        let csv = trajectory_csv(&[s], 2);
        let row = csv.lines().nth(1).unwrap();
        assert_eq!(row, "1.00000000e-1,3.33333333e-1,-2.00000000e0,0.00000000e0,1.00000000e-300,5.00000000e0,4.00000000e-1,1.50000000e0");
    }

    #[test]
    fn write_all_leaves_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let written = write_all(dir.path(), &[("a.csv".into(), "x\n".into()), ("b.csv".into(), "y\n".into())]).unwrap();
        assert_eq!(written.len(), 2);
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 2);
    }
}
