//! Reports are self-verifying: the digest covers the whole body, and the
//! embedded config is enough to reproduce the run.

use incpl::harness::report::emit_report;
use incpl::harness::{self, DataSource, ReportFormat, RunConfig, RunReport, SyntheticTaskSpec};

fn main() -> incpl::Result<()> {
    let config = RunConfig {
        data: DataSource::Synthetic(SyntheticTaskSpec {
            samples_per_class: 10,
            ..SyntheticTaskSpec::default()
        }),
        ..RunConfig::default()
    };
    let report = harness::run(&config)?;
    let out = std::env::temp_dir().join("incpl-reports");
    let named = vec![("default".to_string(), report.clone())];
    for path in emit_report(&named, ReportFormat::Json, &out)?
        .into_iter()
        .chain(emit_report(&named, ReportFormat::Csv, &out)?)
    {
        println!("wrote {}", path.display());
    }
    let reread = RunReport::read(&out.join("default.json"))?;
    println!("digest verifies: {}", reread.verify());
    let again = harness::reproduce(&reread)?;
    println!("re-run digest matches: {}", again.digest == report.digest);
    Ok(())
}
