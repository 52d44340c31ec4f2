//! Zero-shot classification on the default synthetic task, with and without
//! the prompt template.

use incpl::backbone::{BackendConfig, ToyBackend};
use incpl::harness::synth::zero_shot_accuracy;
use incpl::harness::{generate_synthetic, SyntheticTaskSpec};
use incpl::prompts::ClassVocabulary;

fn main() -> incpl::Result<()> {
    let backend = ToyBackend::new(BackendConfig::default())?;
    let task = generate_synthetic(&backend, &SyntheticTaskSpec::default())?;
    let vocab = ClassVocabulary::new(task.class_names.clone(), &backend)?;
    println!(
        "{} classes, {} test samples (task seed {})",
        vocab.len(),
        task.test.len(),
        task.seed_used
    );
    for template in ["a photo of a", "a", ""] {
        let acc = zero_shot_accuracy(&backend, &vocab, &task.test, template)?;
        println!("template {template:<16?} accuracy {acc:.4}");
    }
    Ok(())
}
