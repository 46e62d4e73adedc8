//! Per-ingest telemetry records and their CSV form.

use std::io::Write;

use serde::Serialize;

use crate::qp::QpStatus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestOutcome {
    Accepted,
    Stale,
    Infeasible,
    WindowTooWide,
    Invalid,
}

impl IngestOutcome {
    pub fn name(&self) -> &'static str {
        match self {
            IngestOutcome::Accepted => "accepted",
            IngestOutcome::Stale => "stale",
            IngestOutcome::Infeasible => "infeasible",
            IngestOutcome::WindowTooWide => "window_too_wide",
            IngestOutcome::Invalid => "invalid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TelemetryRecord {
    pub t_obs: f64,
    /// Inference latency, `now − t_obs`.
    pub t1: f64,
    pub t2_budget: f64,
    /// Wall-clock processing time, when measured.
    pub t2_measured: Option<f64>,
    pub outcome: IngestOutcome,
    /// Largest speed of the new segment over all channels.
    pub max_blend_velocity: f64,
    pub splice_position_jump: f64,
    pub splice_velocity_jump: f64,
    /// Largest iteration count among the channel QPs.
    pub qp_iterations: usize,
    /// Worst QP status among the channels.
    pub qp_status: Option<QpStatus>,
}

impl TelemetryRecord {
    pub(crate) fn rejected(t_obs: f64, t1: f64, t2_budget: f64, outcome: IngestOutcome) -> Self {
        TelemetryRecord {
            t_obs,
            t1,
            t2_budget,
            t2_measured: None,
            outcome,
            max_blend_velocity: 0.0,
            splice_position_jump: 0.0,
            splice_velocity_jump: 0.0,
            qp_iterations: 0,
            qp_status: None,
        }
    }

    pub fn accepted(&self) -> bool {
        self.outcome == IngestOutcome::Accepted
    }
}

/// Writes records as CSV. The measured-t2 column is emitted only when
/// `with_measured` is set, so simulated runs stay byte-reproducible.
pub fn write_telemetry_csv<W: Write>(
    mut w: W,
    records: &[TelemetryRecord],
    comment: Option<&str>,
    with_measured: bool,
) -> std::io::Result<()> {
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    let mut header = vec!["t_obs", "t1", "t2_budget"];
    if with_measured {
        header.push("t2_measured");
    }
    header.extend([
        "accepted",
        "reason",
        "max_blend_velocity",
        "splice_position_jump",
        "splice_velocity_jump",
        "qp_iterations",
        "qp_status",
    ]);
    writeln!(w, "{}", header.join(","))?;
    for r in records {
        let mut cols = vec![format!("{}", r.t_obs), format!("{}", r.t1), format!("{}", r.t2_budget)];
        if with_measured {
            cols.push(r.t2_measured.map_or(String::new(), |v| format!("{v}")));
        }
        cols.push(if r.accepted() { "1" } else { "0" }.to_string());
        cols.push(r.outcome.name().to_string());
        cols.push(format!("{}", r.max_blend_velocity));
        cols.push(format!("{:e}", r.splice_position_jump));
        cols.push(format!("{:e}", r.splice_velocity_jump));
        cols.push(r.qp_iterations.to_string());
        cols.push(match r.qp_status {
            Some(QpStatus::Solved) => "solved".into(),
            Some(QpStatus::MaxIters) => "max_iters".into(),
            Some(QpStatus::Infeasible) => "infeasible".into(),
            None => String::new(),
        });
        writeln!(w, "{}", cols.join(","))?;
    }
    Ok(())
}
