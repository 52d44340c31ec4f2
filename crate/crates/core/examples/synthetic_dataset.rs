//! Write a synthetic task to disk as PNGs plus JSON-lines manifests, then
//! run from the manifests as with a real dataset.

use incpl::backbone::{BackendConfig, ToyBackend};
use incpl::harness::{self, generate_synthetic, DataSource, RunConfig, SyntheticTaskSpec};

fn main() -> incpl::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "synthetic-task".into());
    let dir = std::path::PathBuf::from(dir);
    let backend = ToyBackend::new(BackendConfig::default())?;
    let spec = SyntheticTaskSpec {
        n_classes: 5,
        samples_per_class: 12,
        ..SyntheticTaskSpec::default()
    };
    let task = generate_synthetic(&backend, &spec)?;
    task.write(&dir)?;
    println!(
        "wrote {} labeled and {} test images under {}",
        task.labeled.len(),
        task.test.len(),
        dir.display()
    );

    let mut config = RunConfig {
        data: DataSource::Manifests {
            test: dir.join("test.jsonl"),
            labeled: dir.join("labeled.jsonl"),
        },
        ..RunConfig::default()
    };
    config.stream.context.n_context = 3;
    let report = harness::run(&config)?;
    println!(
        "accuracy from manifests {}/{}",
        report.body.correct, report.body.total
    );
    Ok(())
}
