use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::SolveStatus;
use crate::types::{Vec6, DOF};

/// Status of the plan being executed at a logged step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStatus {
    /// No planner, or no plan yet.
    None,
    Converged,
    MaxIter,
    Infeasible,
}

impl PlanStatus {
    pub fn name(self) -> &'static str {
        match self {
            PlanStatus::None => "none",
            PlanStatus::Converged => "converged",
            PlanStatus::MaxIter => "max_iter",
            PlanStatus::Infeasible => "infeasible",
        }
    }

    pub fn parse(s: &str) -> Option<PlanStatus> {
        [PlanStatus::None, PlanStatus::Converged, PlanStatus::MaxIter, PlanStatus::Infeasible]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

impl From<SolveStatus> for PlanStatus {
    fn from(s: SolveStatus) -> Self {
        match s {
            SolveStatus::Converged => PlanStatus::Converged,
            SolveStatus::MaxIter => PlanStatus::MaxIter,
            SolveStatus::Infeasible => PlanStatus::Infeasible,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub x: Vec6,
    pub v: Vec6,
    pub f_human: Vec6,
    pub f_contact: Vec6,
    pub f_disturbance: Vec6,
    /// Measured external force including sensor noise.
    pub f_total: Vec6,
    pub f_ref: Vec6,
    pub mass: Vec6,
    pub damping: Vec6,
    pub belief: Vec<f64>,
    pub status: PlanStatus,
    /// A new plan was installed at this step.
    pub mpc_step: bool,
}

/// One row per inner-loop step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub modes: usize,
    pub rows: Vec<LogRow>,
}

const VEC_GROUPS: [&str; 9] = ["x", "v", "fh", "fc", "fd", "f", "fr", "m", "d"];

fn header(modes: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for g in VEC_GROUPS {
        for i in 0..DOF {
            h.push(format!("{g}{i}"));
        }
    }
    for n in 0..modes {
        h.push(format!("b{n}"));
    }
    h.push("status".into());
    h.push("mpc_step".into());
    h
}

impl LogRow {
    fn groups(&self) -> [&Vec6; 9] {
        [&self.x, &self.v, &self.f_human, &self.f_contact, &self.f_disturbance, &self.f_total, &self.f_ref, &self.mass, &self.damping]
    }
}

impl RunLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(header(self.modes))?;
        let mut rec = Vec::with_capacity(1 + 9 * DOF + self.modes + 2);
        for r in &self.rows {
            rec.clear();
            rec.push(r.t.to_string());
            for g in r.groups() {
                rec.extend(g.iter().map(|v| v.to_string()));
            }
            rec.extend(r.belief.iter().map(|b| b.to_string()));
            rec.push(r.status.name().to_string());
            rec.push(if r.mpc_step { "1" } else { "0" }.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a log, rejecting any column layout other than the fixed schema.
    pub fn read_csv<R: Read>(input: R, name: &str) -> Result<RunLog> {
        let csv_err = |msg: String| Error::Csv { path: name.to_string(), msg };
        let mut rd = csv::Reader::from_reader(input);
        let hdr: Vec<String> = rd.headers().map_err(|e| csv_err(e.to_string()))?.iter().map(String::from).collect();
        let modes = hdr.iter().filter(|h| h.starts_with('b') && h[1..].parse::<usize>().is_ok()).count();
        if hdr != header(modes) {
            return Err(csv_err("column layout does not match the run log schema".into()));
        }
        let mut rows = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            let num = |i: usize| -> Result<f64> {
                rec[i].parse::<f64>().map_err(|_| csv_err(format!("row {}: bad number `{}` in column {}", line + 2, &rec[i], hdr[i])))
            };
            let vec_at = |g: usize| -> Result<Vec6> {
                let mut v = Vec6::zeros();
                for i in 0..DOF {
                    v[i] = num(1 + g * DOF + i)?;
                }
                Ok(v)
            };
            let base = 1 + 9 * DOF;
            let belief = (0..modes).map(|n| num(base + n)).collect::<Result<Vec<_>>>()?;
            let status = PlanStatus::parse(&rec[base + modes])
                .ok_or_else(|| csv_err(format!("row {}: unknown status `{}`", line + 2, &rec[base + modes])))?;
            let mpc_step = match &rec[base + modes + 1] {
                "0" => false,
                "1" => true,
                other => return Err(csv_err(format!("row {}: bad mpc_step `{other}`", line + 2))),
            };
            rows.push(LogRow {
                t: num(0)?,
                x: vec_at(0)?,
                v: vec_at(1)?,
                f_human: vec_at(2)?,
                f_contact: vec_at(3)?,
                f_disturbance: vec_at(4)?,
                f_total: vec_at(5)?,
                f_ref: vec_at(6)?,
                mass: vec_at(7)?,
                damping: vec_at(8)?,
                belief,
                status,
                mpc_step,
            });
        }
        if rows.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(csv_err("timestamps are not increasing".into()));
        }
        Ok(RunLog { modes, rows })
    }
}
