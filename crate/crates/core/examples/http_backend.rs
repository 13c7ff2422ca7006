//! The HTTP backend against a stand-in transport: two rate-limit responses, then
//! success. With `PERSONADB_API_KEY` set and `--live`, the same calls go to the
//! configured endpoint instead.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use personadb::gateway::http::{
    HttpAnalyzer, HttpClient, HttpConfig, HttpEmbedder, HttpResponse, HttpTransport,
};
use personadb::gateway::{AnalyzerRequest, EmbedRequest, Gateway};
use personadb::store::EmbeddingCache;

struct Flaky {
    calls: AtomicUsize,
}

impl HttpTransport for Flaky {
    fn post_json(&self, url: &str, _bearer: Option<&str>, _body: &str) -> Result<HttpResponse, String> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < 2 {
            return Ok(HttpResponse { status: 429, body: "{}".into() });
        }
        let body = if url.ends_with("embeddings") {
            r#"{"data":[{"embedding":[0.6,0.8,0.0]}]}"#
        } else {
            r#"{"choices":[{"finish_reason":"stop","message":{"content":"Intensity: 2\nPolarity: Positive"}}]}"#
        };
        Ok(HttpResponse { status: 200, body: body.into() })
    }
}

fn main() -> personadb::Result<()> {
    let live = std::env::args().any(|a| a == "--live");
    let client = if live {
        HttpClient::from_env(HttpConfig::default())
    } else {
        let cfg = HttpConfig {
            dims: 3,
            ..HttpConfig::default()
        };
        let transport = Arc::new(Flaky { calls: AtomicUsize::new(0) });
        HttpClient::new(cfg, Some("demo".into()), transport).with_sleep(|_| {})
    };
    let dims = client.config().dims;
    let client = Arc::new(client);
    let gateway = Gateway::new(
        Box::new(HttpAnalyzer::new(client.clone())),
        Box::new(HttpEmbedder::new(client)),
        EmbeddingCache::in_memory(dims),
    )?;

    let answer = gateway.analyze(&AnalyzerRequest::new("predict_full", "How will this user react?"))?;
    println!("analyzer: {answer:?}");
    let v = gateway.embed(&EmbedRequest::new("retrieval", "solar subsidies"))?;
    println!("embedding: {} dims, norm {:.3}", v.dims, v.norm());
    let again = gateway.embed(&EmbedRequest::new("retrieval", "solar subsidies"))?;
    assert_eq!(v, again);
    for e in gateway.journal().entries() {
        println!("journal: {}", serde_json::to_string(&e.event)?);
    }
    Ok(())
}
