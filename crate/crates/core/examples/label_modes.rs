//! How much the labels of the in-context examples matter. `same` and
//! `oracle` read the test label and need the ablation flag.

use incpl::backbone::ToyBackend;
use incpl::context::LabelMode;
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
    for mode in LabelMode::ALL {
        let mut config = base.clone();
        config.stream.context.label_mode = mode;
        config.stream.context.ablation = mode.needs_test_label();
        let b = run_on(&backend, &config, &data)?.body;
        println!("{:<12} {:.4}", mode.name(), b.accuracy.unwrap_or(0.0));
    }
    Ok(())
}
