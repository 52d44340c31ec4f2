//! Zero-shot against each adaptation mode on the same stream.

use incpl::adaptation::AdaptMode;
use incpl::backbone::ToyBackend;
use incpl::harness::{run_on, RunConfig, TaskData};

fn main() -> incpl::Result<()> {
    let base = RunConfig::default();
    let backend = ToyBackend::new(base.backend_config.clone())?;
    let data = TaskData::load(&base.data, &backend)?;
    for mode in [
        AdaptMode::ZeroShot,
        AdaptMode::VisualOnly,
        AdaptMode::TextOnly,
        AdaptMode::Concurrent,
        AdaptMode::Cyclic,
    ] {
        let mut config = base.clone();
        config.stream.adaptation.mode = mode;
        let b = run_on(&backend, &config, &data)?.body;
        let per_sample = b.forward.vision / b.total as u64;
        println!(
            "{:<12} {:>3}/{} vision calls per sample {per_sample}",
            mode.name(),
            b.correct,
            b.total
        );
    }
    Ok(())
}
