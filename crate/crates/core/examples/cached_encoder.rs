//! Build a cached text encoder, save it as PBEM plus index, and read it
//! back. This is the layout an external exporter produces.

use anyhow::Result;
use promptbound::{CachedEncoder, TextEncoder, TokenId, ToyEncoder};

fn main() -> Result<()> {
    let toy = ToyEncoder::new(10, 6, 1);
    let mut cache = CachedEncoder::new(6);
    for a in 0..10u32 {
        cache.insert(vec![TokenId(a)], toy.encode(&[TokenId(a)])?)?;
        for b in 0..10u32 {
            let key = vec![TokenId(a), TokenId(b)];
            cache.insert(key.clone(), toy.encode(&key)?)?;
        }
    }
    let dir = tempfile::tempdir()?;
    let (pbem, index) = (dir.path().join("text.pbem"), dir.path().join("text.idx"));
    cache.save(&pbem, &index)?;
    let back = CachedEncoder::load(&pbem, &index)?;
    println!("{} cached prompts", back.len());
    println!("[3, 4] -> {:?}", back.encode(&[TokenId(3), TokenId(4)])?);
    match back.encode(&[TokenId(1), TokenId(2), TokenId(3)]) {
        Err(e) => println!("uncached prompt: {e} (exit code {})", e.exit_code()),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
