//! Writes a synthetic event log to stdout.
//!
//! cargo run -p valence-core --example synth_log -- [weekday] [location] [hour] [reports] [seed]
//!
//! The three counts are entities per driver (defaults 2, 1, 0); each entity
//! gets `reports` reports (default 400).

use std::io::{self, BufWriter, Write};

use valence_core::model::{profile_line, report_line, sample_line};
use valence_core::synth::{generate_population, Driver, EntitySpec};

fn main() -> io::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("arguments are non-negative integers"))
        .collect();
    let arg = |i: usize, default: usize| args.get(i).copied().unwrap_or(default);
    let reports = arg(3, 400);
    let mut specs = Vec::new();
    for (slot, driver, prefix) in [(0, Driver::Weekday, "weekday"), (1, Driver::Location, "location"), (2, Driver::Hour, "hour")] {
        for i in 0..arg(slot, [2, 1, 0][slot]) {
            specs.push(EntitySpec::new(&format!("{prefix}-{i:02}"), driver, reports));
        }
    }
    let data = generate_population(&specs, arg(4, 1) as u64);

    let mut out = BufWriter::new(io::stdout().lock());
    for p in &data.profiles {
        writeln!(out, "{}", profile_line(p))?;
    }
    for r in &data.reports {
        writeln!(out, "{}", report_line(r))?;
    }
    for s in &data.samples {
        writeln!(out, "{}", sample_line(s))?;
    }
    out.flush()
}
