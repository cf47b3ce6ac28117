//! CSV artifacts and the binary trajectory snapshot.
//!
//! Floats are written in Rust's shortest round-trip form, so rerunning a
//! command reproduces artifacts byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::adjoint::AdjointPath;
use crate::control::{IterationRecord, OptimizeReport};
use crate::error::{Error, Result};
use crate::forward::{ControlPath, TimeGrid, Trajectory};
use crate::grid::{Field, StateX};

pub const TRAJECTORY_CSV_VERSION: u32 = 1;
pub const HISTORY_CSV_VERSION: u32 = 1;
pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_MAGIC: &[u8; 4] = b"FHNT";

fn node_header(prefix: &str, nodes: usize, out: &mut String) {
    for i in 0..nodes {
        let _ = write!(out, ",{prefix}_{i}");
    }
}

fn push_values(values: &[f64], out: &mut String) {
    for x in values {
        let _ = write!(out, ",{x}");
    }
}

/// One row per time node: `time, v_0..v_{n-1}, w_0..w_{n-1}`.
pub fn states_csv(time: &TimeGrid, states: &[StateX]) -> String {
    let nodes = states.first().map(|x| x.len()).unwrap_or(0);
    let mut out = String::from("time");
    node_header("v", nodes, &mut out);
    node_header("w", nodes, &mut out);
    out.push('\n');
    for (n, x) in states.iter().enumerate() {
        let _ = write!(out, "{}", time.time(n));
        push_values(x.v.values(), &mut out);
        push_values(x.w.values(), &mut out);
        out.push('\n');
    }
    out
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    states_csv(&traj.time, &traj.states)
}

/// Nodal adjoint `p` per time node, then `κ` per step (left time of the step).
pub fn adjoint_csv(time: &TimeGrid, adjoint: &AdjointPath) -> String {
    let nodes = adjoint.p.first().map(|x| x.len()).unwrap_or(0);
    let mut out = String::from("kind,time");
    node_header("v", nodes, &mut out);
    node_header("w", nodes, &mut out);
    out.push('\n');
    let rows = adjoint
        .p
        .iter()
        .enumerate()
        .map(|(n, x)| ("p", n, x))
        .chain(adjoint.kappa.iter().enumerate().map(|(n, x)| ("kappa", n, x)));
    for (kind, n, x) in rows {
        let _ = write!(out, "{kind},{}", time.time(n));
        push_values(x.v.values(), &mut out);
        push_values(x.w.values(), &mut out);
        out.push('\n');
    }
    out
}

/// One row per step: `time, u_0..u_{n-1}` at the left end of the step.
pub fn control_csv(time: &TimeGrid, control: &ControlPath) -> String {
    let nodes = control.values.first().map(|u| u.len()).unwrap_or(0);
    let mut out = String::from("time");
    node_header("u", nodes, &mut out);
    out.push('\n');
    for (n, u) in control.values.iter().enumerate() {
        let _ = write!(out, "{}", time.time(n));
        push_values(u.values(), &mut out);
        out.push('\n');
    }
    out
}

pub fn history_csv(report: &OptimizeReport) -> String {
    let mut out = String::from("iteration,psi,psi_std_err,residual,eps,accepted,step,margin,sup_mean_energy\n");
    for r in &report.history {
        let IterationRecord {
            iteration,
            psi,
            psi_std_err,
            residual,
            eps,
            accepted,
            step,
            sup_mean_energy,
        } = *r;
        let _ = writeln!(
            out,
            "{iteration},{psi},{psi_std_err},{residual},{eps},{},{step},{},{sup_mean_energy}",
            accepted as u8, report.margin.margin
        );
    }
    out
}

/// Binary layout (little endian): magic `FHNT`, `u32` version, `u64` node
/// count, `u64` steps, `f64` horizon, `u64` seed, `u64` path, then the
/// `N + 1` states as `v` followed by `w`.
pub fn write_snapshot(path: &Path, traj: &Trajectory) -> Result<()> {
    let nodes = traj.states[0].len();
    let mut buf = Vec::with_capacity(48 + traj.states.len() * nodes * 16);
    buf.extend_from_slice(SNAPSHOT_MAGIC);
    buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(nodes as u64).to_le_bytes());
    buf.extend_from_slice(&(traj.time.steps() as u64).to_le_bytes());
    buf.extend_from_slice(&traj.time.horizon().to_le_bytes());
    buf.extend_from_slice(&traj.seed.to_le_bytes());
    buf.extend_from_slice(&traj.path.to_le_bytes());
    for x in &traj.states {
        for v in x.v.values().iter().chain(x.w.values()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub time: TimeGrid,
    pub seed: u64,
    pub path: u64,
    pub states: Vec<StateX>,
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let slice = bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Format("snapshot truncated".into()))?;
        at += n;
        Ok(slice)
    };
    if take(4)? != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a trajectory snapshot".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().unwrap());
    let nodes = u64_at(take(8)?) as usize;
    let steps = u64_at(take(8)?) as usize;
    let horizon = f64::from_le_bytes(take(8)?.try_into().unwrap());
    let seed = u64_at(take(8)?);
    let traj_path = u64_at(take(8)?);
    let mut states = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        let mut field = || -> Result<Field> {
            let raw = take(8 * nodes)?;
            Ok(Field::from_vec(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ))
        };
        let v = field()?;
        let w = field()?;
        states.push(StateX::new(v, w));
    }
    if take(1).is_ok() {
        return Err(Error::Format("trailing bytes in snapshot".into()));
    }
    Ok(Snapshot {
        time: TimeGrid::new(horizon, steps)?,
        seed,
        path: traj_path,
        states,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::FhnParams;
    use crate::forward::{integrate, ActuatorSpec, Model};
    use crate::grid::Grid;
    use crate::noise::SpectralCovariance;

    fn trajectory() -> Trajectory {
        let grid = Grid::new(1, 8, 1.0).unwrap();
        let params = FhnParams::excitable(&grid);
        let cov = SpectralCovariance::power_law(1, 4, 0.1, 0.1, 2.0).unwrap();
        let model = Model::new(grid.clone(), params, cov, ActuatorSpec::full(&grid)).unwrap();
        let time = TimeGrid::new(0.1, 5).unwrap();
        let x0 = StateX::new(grid.field_from_fn(|x| x[0]), grid.zeros());
        integrate(&model, &time, &x0, &ControlPath::zeros(&grid, &time), 9, 2).unwrap()
    }

    #[test]
    fn snapshot_round_trip() {
        let traj = trajectory();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_snapshot(&path, &traj).unwrap();
        let snap = read_snapshot(&path).unwrap();
        assert_eq!(snap.states, traj.states);
        assert_eq!((snap.seed, snap.path, snap.time), (9, 2, traj.time));

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_snapshot(&path), Err(Error::Format(_))));
    }

    #[test]
    fn trajectory_csv_shape() {
        let traj = trajectory();
        let csv = trajectory_csv(&traj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[0].starts_with("time,v_0,") && lines[0].ends_with(",w_7"));
        assert_eq!(lines[1].split(',').count(), 17);
        let parsed: f64 = lines[6].split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(parsed, traj.states[5].v.values()[2]);
    }
}
