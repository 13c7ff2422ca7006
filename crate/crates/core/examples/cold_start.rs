//! Lurkers asked about domains they never wrote about: with the join, evidence
//! from cluster-mates answers them; without it, nothing can.

use personadb::eval::{render_table, MethodConfig, MethodName, Runner};
use personadb::infer::QueryTask;
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
    let cold: Vec<QueryTask> = pop.cold_start_tasks().into_iter().cloned().collect();
    let mut rows = Vec::new();
    for name in [MethodName::PersonaDb, MethodName::PersonaDbWoJoin, MethodName::HRetrieval, MethodName::Majority] {
        let mut m = MethodConfig::new(name);
        m.composition.r = 8;
        let run = runner.run_method(&m, &cold)?;
        rows.push((name.to_string(), run.report));
    }
    println!("{} cold-start tasks\n", cold.len());
    print!("{}", render_table(&rows));
    Ok(())
}
