//! Ingest a small corpus and refine one user into Distilled Persona, Induced
//! Persona and Cache layers, printing each entry with its provenance.

use personadb::refine::{RefineConfig, Refiner};
use personadb::store::{Layer, Store};
use personadb::synth::{generate_population, SynthConfig, SynthResponder};
use personadb::template::TemplateSet;

fn main() -> personadb::Result<()> {
    let pop = generate_population(&SynthConfig::default())?;
    let dir = tempfile::tempdir().map_err(|e| personadb::Error::io("tempdir", e))?;
    let store = Store::open(dir.path())?;
    store.ingest_records(pop.records.clone())?;

    let gateway = SynthResponder::gateway(&pop)?;
    let templates = TemplateSet::builtin();
    let cfg = RefineConfig::default();
    let refiner = Refiner::new(&gateway, &templates, &cfg);

    let user = &pop.users[0].user_id;
    let mut db = store.load_database(user)?;
    let calls = refiner.refine(&mut db)?;
    store.save_database(&db)?;

    println!("{user}: {} history records, {calls} analyzer calls", db.history.len());
    for layer in [Layer::DistilledPersona, Layer::InducedPersona, Layer::Cache] {
        println!("\n[{layer}]");
        for e in db.layer(layer) {
            println!("  {:<24} {}", e.entry_id, e.text);
            println!("  {:<24} <- {}", "", e.provenance.join(", "));
        }
    }
    println!("\ncache text used for matching:\n{}", db.cache_text());
    Ok(())
}
