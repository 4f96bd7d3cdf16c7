//! Bounded short-term window with oldest-first eviction.

use memverse::chunk_store::ChunkId;
use memverse::clock::Timestamp;
use memverse::stm::{StmWindow, Turn};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut window = StmWindow::new(3)?;
    for i in 0..5u64 {
        let turn = Turn {
            chunk_id: ChunkId {
                sequence: i,
                digest: format!("d{i}"),
            },
            query_text: format!("turn number {i}"),
            timestamp: Timestamp::from_millis(i as i64 * 1000),
        };
        if let Some(evicted) = window.push(turn)? {
            println!("evicted {}", evicted.chunk_id);
        }
    }
    println!(
        "window ({}/{}):\n{}",
        window.len(),
        window.capacity(),
        window.window_text()
    );

    let dropped = window.resize(1)?;
    println!("resized to 1, dropped {} turns", dropped.len());
    Ok(())
}
