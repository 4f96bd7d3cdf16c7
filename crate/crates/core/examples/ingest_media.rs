//! Captioning image, audio and video references into text chunks.

use std::sync::Arc;

use memverse::chunk_store::{ChunkStore, MediaRef, Modality};
use memverse::clock::SystemClock;
use memverse::ingest::Ingestor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let clock = Arc::new(SystemClock);
    let store = ChunkStore::in_memory(clock.clone());
    let ingestor = Ingestor::with_mocks(clock);

    let media = [
        MediaRef::new("file:///photos/beach_sunset.jpg", Modality::Image),
        MediaRef::new("file:///audio/standup_meeting.wav", Modality::Audio),
        MediaRef::new("file:///video/cooking_demo.mp4", Modality::Video).with_meta("duration_s", "90"),
    ];
    for (turn, m) in media.into_iter().enumerate() {
        let id = ingestor.ingest_media(&store, m, "trip", turn as u64)?;
        let chunk = store.get_chunk(&id)?;
        println!(
            "{id} [{}]\n  {}",
            chunk.media[0].modality,
            chunk.content.replace('\n', "\n  ")
        );
    }
    Ok(())
}
