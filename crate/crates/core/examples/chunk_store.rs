//! Durable chunk log: append, supersede, tombstone and reopen.

use std::sync::Arc;

use memverse::chunk_store::{ChunkStore, ChunkStoreOptions, NewChunk, NoReferences};
use memverse::clock::SystemClock;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let clock = Arc::new(SystemClock);

    let store = ChunkStore::open(dir.path(), ChunkStoreOptions::default(), clock.clone())?;
    let a = store.put_chunk(NewChunk::text("Alice moved to Lisbon.", "s1", 0))?;
    let b = store.put_chunk(NewChunk::text("Bob likes chess.", "s1", 1))?;
    println!("stored {a} ({}) and {b}", &a.digest[..12]);

    let corrected = store.supersede(&a, "Alice moved to Porto.".into())?;
    println!("{a} superseded by {corrected}");

    store.tombstone(&b, &NoReferences)?;
    println!("{b} tombstoned; live = {}", store.live_count());
    drop(store);

    let reopened = ChunkStore::open(dir.path(), ChunkStoreOptions::default(), clock)?;
    for chunk in reopened.list_session("s1") {
        println!(
            "after reopen: {} turn {}: {}",
            chunk.id, chunk.turn_index, chunk.content
        );
    }
    Ok(())
}
