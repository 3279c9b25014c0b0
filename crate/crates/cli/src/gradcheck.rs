//! Finite-difference report over every primitive and learner loss.

use anyhow::Result;
use g2a_core::checks;
use g2a_core::diffnet::GradCheckReport;
use serde::Serialize;

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct Entry {
    pub name: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

fn entry(name: String, r: &GradCheckReport) -> Entry {
    Entry { name, max_rel_error: r.max_rel_error, coords_checked: r.coords_checked, pass: r.max_rel_error < TOLERANCE }
}

pub fn report() -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = checks::primitive_reports()?.iter().map(|(n, r)| entry(format!("op/{n}"), r)).collect();
    out.push(entry("loss/ga-comm".into(), &checks::comm_loss_report()?));
    for (kind, r) in checks::critic_loss_reports()? {
        out.push(entry(format!("loss/critic-{kind:?}").to_lowercase(), &r));
    }
    out.push(entry("loss/actor".into(), &checks::actor_loss_report()?));
    Ok(out)
}
