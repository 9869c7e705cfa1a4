//! JSON-Lines trajectory dump: one trajectory per line,
//! `{"traj": i, "steps": L, "x": [[...]], "a": [...], "r": [...]}`.
//!
//! `x` holds the `L + 2` chained states (the last one is the successor of the
//! final transition); `a` and `r` hold `L + 1` entries. Floats are written with
//! 17 significant digits so that reading reproduces them bit for bit.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::Deserialize;

use super::Trajectory;
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    traj: usize,
    steps: usize,
    x: Vec<Vec<f64>>,
    a: Vec<usize>,
    r: Vec<f64>,
}

fn push_float(buf: &mut String, v: f64) {
    write!(buf, "{v:.16e}").unwrap();
}

fn encode(t: &Trajectory, buf: &mut String) {
    buf.clear();
    write!(buf, "{{\"traj\":{},\"steps\":{},\"x\":[", t.index, t.horizon_steps()).unwrap();
    for k in 0..=t.len() {
        if k > 0 {
            buf.push(',');
        }
        buf.push('[');
        for (j, v) in t.state(k).iter().enumerate() {
            if j > 0 {
                buf.push(',');
            }
            push_float(buf, *v);
        }
        buf.push(']');
    }
    buf.push_str("],\"a\":[");
    for (k, a) in t.actions().iter().enumerate() {
        if k > 0 {
            buf.push(',');
        }
        write!(buf, "{a}").unwrap();
    }
    buf.push_str("],\"r\":[");
    for (k, r) in t.rewards().iter().enumerate() {
        if k > 0 {
            buf.push(',');
        }
        push_float(buf, *r);
    }
    buf.push_str("]}\n");
}

/// Writes trajectories as JSON Lines.
pub fn write_jsonl<W: Write>(mut w: W, trajectories: &[Trajectory]) -> Result<()> {
    let mut buf = String::new();
    for t in trajectories {
        encode(t, &mut buf);
        w.write_all(buf.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads trajectories written by [`write_jsonl`]. Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if rec.a.len() != rec.steps + 1 || rec.x.len() != rec.steps + 2 {
            return Err(parse_err(format!(
                "steps = {} but {} states and {} actions",
                rec.steps,
                rec.x.len(),
                rec.a.len()
            )));
        }
        let dim = rec.x[0].len();
        if rec.x.iter().any(|s| s.len() != dim) {
            return Err(parse_err("states have inconsistent dimensions".into()));
        }
        let states = rec.x.into_iter().flatten().collect();
        let t = Trajectory::new(rec.traj, dim, states, rec.a, rec.r).map_err(|e| parse_err(e.to_string()))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::env::builtin_env;
    use crate::par::Parallelism;
    use proptest::prelude::*;

    fn bits(ts: &[Trajectory]) -> Vec<u64> {
        ts.iter()
            .flat_map(|t| {
                (0..=t.len())
                    .flat_map(|k| t.state(k).to_vec())
                    .chain(t.rewards().iter().copied())
                    .map(f64::to_bits)
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn line_format() {
        let t = Trajectory::new(3, 1, vec![0.5, -0.25, 1.0], vec![2, 0], vec![0.1, -0.0]).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &[t]).unwrap();
        let line = String::from_utf8(buf).unwrap();
        assert_eq!(
            line,
            "{\"traj\":3,\"steps\":1,\"x\":[[5.0000000000000000e-1],[-2.5000000000000000e-1],[1.0000000000000000e0]],\
             \"a\":[2,0],\"r\":[1.0000000000000001e-1,-0.0000000000000000e0]}\n"
        );
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["steps"], 1);
    }

    #[test]
    fn generated_dataset_round_trips_bitwise() {
        let b = builtin_env("ou2d").unwrap();
        let ds = generate_dataset(&b.env, &b.policy, &b.initial, 50, 42, Parallelism::default()).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &ds.trajectories).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, ds.trajectories);
        assert_eq!(bits(&back), bits(&ds.trajectories));
    }

    #[test]
    fn malformed_lines_are_rejected() {
        let bad = "{\"traj\":0,\"steps\":1,\"x\":[[0.0],[1.0]],\"a\":[0,1],\"r\":[0.0,0.0]}\n";
        assert!(matches!(read_jsonl(bad.as_bytes()), Err(Error::Parse { line: 1, .. })));
        let unknown = "{\"traj\":0,\"steps\":0,\"x\":[[0.0],[1.0]],\"a\":[0],\"r\":[0.0],\"z\":1}\n";
        assert!(read_jsonl(unknown.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_floats_round_trip(
            xs in prop::collection::vec(-1e300f64..1e300, 3..12),
            r in -1.0f64..=1.0,
        ) {
            let steps = xs.len() - 2;
            let t = Trajectory::new(0, 1, xs.clone(), vec![0; steps + 1], vec![r; steps + 1]).unwrap();
            let mut buf = Vec::new();
            write_jsonl(&mut buf, std::slice::from_ref(&t)).unwrap();
            let back = read_jsonl(buf.as_slice()).unwrap();
            prop_assert_eq!(bits(&back), bits(&[t]));
        }
    }
}
