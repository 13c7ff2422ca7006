//! Compose a retrieval set for a lurker: a quarter of the capacity goes to
//! collaborators' entries, the rest to the user's own, with backfill.

use personadb::collab::{Collab, JoinConfig};
use personadb::refine::{RefineConfig, Refiner};
use personadb::retrieve::{CompositionConfig, Retriever};
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
    let collab = Collab::new(&gateway, &store, JoinConfig::default())?;

    let task = pop.cold_start_tasks()[0].clone();
    let cfg = CompositionConfig {
        r: 8,
        x: 0.25,
        ..CompositionConfig::default()
    };
    let set = Retriever::new(&gateway).retrieve(&store, Some(&collab), &task.user_id, &task.stimulus, &cfg)?;
    println!("user {} asks: {}", task.user_id, task.stimulus);
    println!("{} own + {} collaborative items", set.n_self, set.n_collab);
    for item in &set.items {
        let score = item.score.map(|s| format!("{s:.3}")).unwrap_or_else(|| "-".into());
        println!("  [{:?} {}] {score}  {}", item.source, item.source_user, item.text);
    }
    Ok(())
}
