//! Token-level prompts (language-aware, generic, random) against pixel-space
//! prompts (patched, padded).

use incpl::backbone::ToyBackend;
use incpl::harness::{run_on, RunConfig, TaskData};
use incpl::prompts::PromptVariant;

fn main() -> incpl::Result<()> {
    let base = RunConfig::default();
    let backend = ToyBackend::new(base.backend_config.clone())?;
    let data = TaskData::load(&base.data, &backend)?;
    for variant in PromptVariant::TABLE {
        let mut config = base.clone();
        config.stream.prompt.variant = variant;
        let b = run_on(&backend, &config, &data)?.body;
        println!("{:<18} {}/{}", variant.name(), b.correct, b.total);
    }
    Ok(())
}
