//! Arena planning for a deep MLP with and without fusion.
//!
//! `cargo run --example buffer_plan`

use tgc::compile::{compile, CompileOptions};
use tgc::workloads::{row, BenchConfig, Precision};

fn main() -> anyhow::Result<()> {
    let r = row("MLP-2").unwrap();
    let g = BenchConfig::new(&r, 32, Precision::F32, 4).graph();
    for fuse in [false, true] {
        let mut o = CompileOptions::default();
        o.pipeline.fuse = fuse;
        let c = compile(&g, &o)?;
        let p = c.plan();
        println!(
            "{}: {} temporaries, {} bytes total, peak live {}, arena {} ({:.3} of total)",
            if fuse { "fused  " } else { "unfused" },
            p.arena.len(),
            p.temp_bytes,
            p.peak_live_bytes,
            p.arena_bytes,
            p.arena_bytes as f64 / p.temp_bytes.max(1) as f64
        );
        let m = c.module();
        for (b, pl) in &p.arena {
            println!("    {:<24} offset {:>9} size {:>9} live calls {}..={}", m.bufs[b.0].name, pl.offset, pl.size, pl.first, pl.last);
        }
    }
    Ok(())
}
