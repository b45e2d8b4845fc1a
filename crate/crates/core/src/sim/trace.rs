use std::path::Path;

use serde_json::{json, Value};

use super::{SimError, SimTimeline};

/// Chrome trace-event document: one complete ("X") event per interval,
/// process = rank, thread = SM slot, times in microseconds.
pub fn trace_json(timeline: &SimTimeline) -> Value {
    let mut events = Vec::new();
    for w in timeline.workers.iter().filter(|w| !w.intervals.is_empty()) {
        for iv in &w.intervals {
            let name = match iv.stall {
                Some(_) => format!("wait {}", iv.task),
                None => format!("{} {}", iv.role.name(), iv.task),
            };
            let mut args = json!({ "task": iv.task, "busy_us": iv.busy * 1e6 });
            if let Some(reason) = iv.stall {
                args["stall"] = json!(reason);
            }
            events.push(json!({
                "name": name,
                "cat": iv.role.name(),
                "ph": "X",
                "ts": iv.start * 1e6,
                "dur": (iv.end - iv.start) * 1e6,
                "pid": w.rank,
                "tid": w.slot,
                "args": args,
            }));
        }
    }
    json!({ "traceEvents": events, "displayTimeUnit": "ns", "otherData": { "phase": timeline.phase } })
}

pub fn metrics_csv(timeline: &SimTimeline) -> String {
    let m = &timeline.metrics;
    let rows: [(&str, f64); 16] = [
        ("l_comm", m.l_comm),
        ("l_compute", m.l_compute),
        ("makespan", m.makespan),
        ("compute_stall", m.compute_stall),
        ("held_comm", m.held.comm),
        ("held_relay", m.held.relay),
        ("held_compute", m.held.compute),
        ("held_reduce", m.held.reduce),
        ("busy_comm", m.busy.comm),
        ("busy_relay", m.busy.relay),
        ("busy_compute", m.busy.compute),
        ("busy_reduce", m.busy.reduce),
        ("bytes_nvl", m.bytes_nvl),
        ("bytes_hbm", m.bytes_hbm),
        ("events", m.events as f64),
        ("workers", timeline.workers.len() as f64),
    ];
    let mut out = format!("phase,{}\nmetric,value\n", timeline.phase);
    for (k, v) in rows {
        out.push_str(&format!("{k},{v:e}\n"));
    }
    out
}

/// Writes `path` (trace JSON) and `path` with a `.csv` extension (metrics).
pub fn emit_trace(timeline: &SimTimeline, path: impl AsRef<Path>) -> Result<(), SimError> {
    let path = path.as_ref();
    let io = |p: &Path| {
        let p = p.display().to_string();
        move |source| SimError::Io { path: p, source }
    };
    let text = serde_json::to_string(&trace_json(timeline)).expect("trace serializes");
    std::fs::write(path, text).map_err(io(path))?;
    let csv = path.with_extension("csv");
    std::fs::write(&csv, metrics_csv(timeline)).map_err(io(&csv))
}
