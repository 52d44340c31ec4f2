//! Accuracy as the number of in-context examples grows. The candidate pool
//! holds one example per class, so the sweep needs at least 19 classes.

use incpl::backbone::ToyBackend;
use incpl::context::example_count_grid;
use incpl::harness::{run_on, DataSource, RunConfig, SyntheticTaskSpec, TaskData};

fn main() -> incpl::Result<()> {
    let base = RunConfig {
        data: DataSource::Synthetic(SyntheticTaskSpec {
            n_classes: 20,
            samples_per_class: 10,
            ..SyntheticTaskSpec::default()
        }),
        ..RunConfig::default()
    };
    let backend = ToyBackend::new(base.backend_config.clone())?;
    let data = TaskData::load(&base.data, &backend)?;
    for n in example_count_grid() {
        let mut config = base.clone();
        config.stream.context.n_context = n;
        let b = run_on(&backend, &config, &data)?.body;
        println!(
            "N={n:<3} {:.4}  ({} vision calls)",
            b.accuracy.unwrap_or(0.0),
            b.forward.vision
        );
    }
    Ok(())
}
