//! One online stream with the default configuration: cyclic adaptation with
//! five gold-labeled in-context examples per test sample.

use incpl::harness::{self, RunConfig};

fn main() -> incpl::Result<()> {
    let config = RunConfig::default();
    let report = harness::run(&config)?;
    let b = &report.body;
    println!(
        "accuracy {}/{} = {:.4}",
        b.correct,
        b.total,
        b.accuracy.unwrap_or(0.0)
    );
    println!(
        "forward calls: {} vision, {} text encodings, {} class-embedding requests",
        b.forward.vision, b.forward.text, b.forward.text_batches
    );
    let first = &b.records[0];
    println!(
        "first sample {} phases {:?} context {:?}",
        first.id, first.phases, first.context_ids
    );
    for step in &first.loss_trace {
        println!(
            "  entropy {:.4} supervised {:?} total {:.4}",
            step.entropy_term, step.supervised_terms, step.total
        );
    }
    println!(
        "backbone digest unchanged: {}",
        b.weight_digest_before == b.weight_digest_after
    );
    println!("report digest {}", report.digest);
    Ok(())
}
