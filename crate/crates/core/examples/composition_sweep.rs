//! Sweep retrieval capacity against composition ratio and print the CSV along
//! with the best ratio per capacity.

use personadb::eval::{sweep, MethodConfig, MethodName, Runner, SweepMetric};
use personadb::refine::{RefineConfig, Refiner};
use personadb::store::Store;
use personadb::synth::{generate_population, SynthConfig, SynthResponder};
use personadb::template::TemplateSet;

fn main() -> personadb::Result<()> {
    let pop = generate_population(&SynthConfig::default())?;
    let dir = tempfile::tempdir().map_err(|e| personadb::Error::io("tempdir", e))?;
    let store = Store::open(dir.path())?;
    store.ingest_records(pop.records.clone())?;
    let gateway = SynthResponder::gateway(&pop)?;
    let templates = TemplateSet::builtin();
    let rcfg = RefineConfig::default();
    Refiner::new(&gateway, &templates, &rcfg).refine_all(&store, &store.user_ids()?, 4);

    let runner = Runner::new(&gateway, &store, &templates).with_max_parallel(4);
    let r_values = [4, 8, 16, 32];
    let result = sweep(
        &runner,
        &MethodConfig::new(MethodName::PersonaDb),
        &r_values,
        &[0.0, 0.25, 0.5, 0.75],
        &pop.tasks,
    );
    print!("{}", result.to_csv());
    for r in r_values {
        println!("r={r}: best x {:?}", result.argmax_x(r, SweepMetric::Accuracy));
    }
    Ok(())
}
