//! Time-aligned command/state logs and their CSV form.
//!
//! The file has a header `t,q_des,q,qdot` optionally followed by
//! `q_true,qdot_true`, then one row per sample. Values are written with the
//! shortest decimal that parses back to the same `f64`.

use std::io::{Read, Write};
use std::path::Path;

use crate::dynamics::JointState;
use crate::error::{Error, Result};

const BASE_HEADER: [&str; 4] = ["t", "q_des", "q", "qdot"];
const TRUTH_HEADER: [&str; 2] = ["q_true", "qdot_true"];
/// Allowed deviation from uniform sample spacing, s.
pub const SPACING_TOLERANCE: f64 = 1e-9;

/// Sample `i` holds the command applied at step `i` and the logged state
/// before that step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t0: f64,
    pub dt: f64,
    pub q_des: Vec<f64>,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Noiseless state, when the log is synthetic.
    pub truth: Option<Vec<JointState>>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.q_des.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q_des.is_empty()
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.dt
    }

    pub fn state(&self, i: usize) -> JointState {
        JointState { q: self.q[i], qdot: self.qdot[i] }
    }

    pub fn true_state(&self, i: usize) -> Option<JointState> {
        self.truth.as_ref().map(|t| t[i])
    }

    /// Logged samples with the truth channel dropped, or the truth channel
    /// promoted to the log when `use_truth` is set.
    pub fn view(&self, use_truth: bool) -> Result<Trajectory> {
        if !use_truth {
            return Ok(Trajectory { truth: None, ..self.clone() });
        }
        let truth = self.truth.as_ref().ok_or_else(|| Error::Usage("trajectory has no truth channel".into()))?;
        Ok(Trajectory {
            q: truth.iter().map(|s| s.q).collect(),
            qdot: truth.iter().map(|s| s.qdot).collect(),
            truth: Some(truth.clone()),
            ..self.clone()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.q.len() != n || self.qdot.len() != n || self.truth.as_ref().is_some_and(|t| t.len() != n) {
            return Err(Error::Usage("trajectory channels differ in length".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Usage(format!("trajectory dt = {} must be positive", self.dt)));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = BASE_HEADER.to_vec();
        if self.truth.is_some() {
            header.extend(TRUTH_HEADER);
        }
        w.write_record(&header)?;
        let mut row = Vec::with_capacity(6);
        for i in 0..self.len() {
            row.clear();
            row.push(self.time(i).to_string());
            row.push(self.q_des[i].to_string());
            row.push(self.q[i].to_string());
            row.push(self.qdot[i].to_string());
            if let Some(t) = &self.truth {
                row.push(t[i].q.to_string());
                row.push(t[i].qdot.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Trajectory> {
        let mut r = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
        let with_truth = if header == BASE_HEADER {
            false
        } else if header.len() == 6 && header[..4] == BASE_HEADER && header[4..] == TRUTH_HEADER {
            true
        } else {
            return Err(Error::Parse(format!(
                "trajectory header must be t,q_des,q,qdot[,q_true,qdot_true], found {}",
                header.join(",")
            )));
        };
        let mut t = Vec::new();
        let mut traj = Trajectory {
            t0: 0.0,
            dt: 0.0,
            q_des: Vec::new(),
            q: Vec::new(),
            qdot: Vec::new(),
            truth: with_truth.then(Vec::new),
        };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            let mut vals = [0.0; 6];
            for (k, field) in rec.iter().enumerate() {
                vals[k] = field.trim().parse::<f64>().map_err(|_| {
                    Error::Parse(format!("row {}, column {}: {field:?} is not a number", line + 2, header[k]))
                })?;
                if !vals[k].is_finite() {
                    return Err(Error::Parse(format!("row {}, column {}: non-finite value", line + 2, header[k])));
                }
            }
            t.push(vals[0]);
            traj.q_des.push(vals[1]);
            traj.q.push(vals[2]);
            traj.qdot.push(vals[3]);
            if let Some(tr) = &mut traj.truth {
                tr.push(JointState { q: vals[4], qdot: vals[5] });
            }
        }
        if t.len() < 2 {
            return Err(Error::Parse("trajectory needs at least two rows".into()));
        }
        traj.t0 = t[0];
        traj.dt = t[1] - t[0];
        if !(traj.dt > 0.0) {
            return Err(Error::Parse("t must be strictly increasing".into()));
        }
        for (i, &ti) in t.iter().enumerate() {
            if (ti - traj.time(i)).abs() > SPACING_TOLERANCE {
                return Err(Error::Parse(format!("t is not uniformly spaced at row {}", i + 2)));
            }
        }
        Ok(traj)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::from(e).context(format!("writing {}", path.display())))?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Trajectory> {
        let f = std::fs::File::open(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Trajectory::read_csv(std::io::BufReader::new(f)).map_err(|e| e.context(format!("reading {}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(truth: bool) -> Trajectory {
        let n = 6;
        Trajectory {
            t0: 0.0,
            dt: 0.002,
            q_des: (0..n).map(|i| (i as f64 * 0.1).sin()).collect(),
            q: (0..n).map(|i| 1.0 / (i as f64 + 3.0)).collect(),
            qdot: (0..n).map(|i| -(i as f64) * 1e-7).collect(),
            truth: truth.then(|| (0..n).map(|i| JointState::new(0.1 * i as f64, 0.3)).collect()),
        }
    }

    #[test]
    fn csv_roundtrip_exact() {
        for truth in [false, true] {
            let tr = sample(truth);
            let mut buf = Vec::new();
            tr.write_csv(&mut buf).unwrap();
            let back = Trajectory::read_csv(buf.as_slice()).unwrap();
            assert_eq!(back, tr);
        }
    }

    #[test]
    fn header_is_checked() {
        let err = Trajectory::read_csv("t,q,qdes,qdot\n0,0,0,0\n0.002,0,0,0\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(Trajectory::read_csv("t,q_des,q,qdot\n0,0,0,0\n0.002,0,0\n".as_bytes()).is_err());
    }

    #[test]
    fn non_uniform_time_is_rejected() {
        let text = "t,q_des,q,qdot\n0,0,0,0\n0.002,0,0,0\n0.0041,0,0,0\n";
        let err = Trajectory::read_csv(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("uniformly"));
        let back = "t,q_des,q,qdot\n0,0,0,0\n-0.002,0,0,0\n";
        assert!(Trajectory::read_csv(back.as_bytes()).is_err());
    }

    #[test]
    fn view_switches_channels() {
        let tr = sample(true);
        let v = tr.view(true).unwrap();
        assert_eq!(v.q[2], 0.2);
        assert!(sample(false).view(true).is_err());
        assert!(tr.view(false).unwrap().truth.is_none());
    }
}
