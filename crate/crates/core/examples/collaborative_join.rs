//! Embed every user's cache, then pick the top-K most similar users for a lurker
//! and show that they come from the lurker's own cluster.

use personadb::collab::{Collab, JoinConfig};
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

    let collab = Collab::new(&gateway, &store, JoinConfig::default())?.with_max_parallel(4);
    collab.warm()?;

    let lurker = pop.users.iter().find(|u| u.lurker).expect("population has lurkers");
    println!("owner {} (cluster {}, {} records)", lurker.user_id, lurker.cluster,
        pop.records.iter().filter(|r| r.user_id == lurker.user_id).count());
    let join = collab.join(&lurker.user_id)?;
    for c in &join.collaborators {
        let cluster = pop.user(&c.user_id).map(|u| u.cluster).unwrap_or(usize::MAX);
        println!("  {}  psi={:.4}  cluster {cluster}", c.user_id, c.psi);
    }
    println!("collaborative database: {} entries", join.entries.len());
    Ok(())
}
