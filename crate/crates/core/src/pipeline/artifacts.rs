//! Container round-trips for the pipeline's typed artifacts: parameter
//! stores, normalization statistics, and conversation corpora. Arrays go
//! into the binary container as-is; small structured metadata rides along
//! as JSON-encoded byte entries, so a stage's whole output is one file.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, ParamStore};
use crate::error::{Error, Result};
use crate::pipeline::container::ArrayContainer;
use crate::synthdata::{DyadSample, ListenSegment, NormStats, Turn};

/// Store every parameter under `prefix` (e.g. `params.`).
pub fn put_store(c: &mut ArrayContainer, prefix: &str, store: &ParamStore<f64>) -> Result<()> {
    for (name, value) in store.iter() {
        c.put_array(&format!("{prefix}{name}"), value)?;
    }
    Ok(())
}

/// Rebuild a parameter store from every entry under `prefix`.
pub fn get_store(c: &ArrayContainer, prefix: &str) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    let names: Vec<String> = c
        .names()
        .filter(|n| n.starts_with(prefix))
        .map(|n| n.to_string())
        .collect();
    for name in &names {
        store.insert(&name[prefix.len()..], c.get_array::<f64>(name)?)?;
    }
    if store.is_empty() {
        return Err(Error::Format(format!("no parameters under prefix '{prefix}'")));
    }
    Ok(store)
}

/// Store per-channel normalization statistics under `prefix`.
pub fn put_stats(c: &mut ArrayContainer, prefix: &str, stats: &NormStats) -> Result<()> {
    let n = stats.mean.len();
    c.put_array(&format!("{prefix}mean"), &Array::<f64>::new(vec![n], stats.mean.clone())?)?;
    c.put_array(&format!("{prefix}std"), &Array::<f64>::new(vec![n], stats.std.clone())?)?;
    Ok(())
}

pub fn get_stats(c: &ArrayContainer, prefix: &str) -> Result<NormStats> {
    Ok(NormStats {
        mean: c.get_array::<f64>(&format!("{prefix}mean"))?.data().to_vec(),
        std: c.get_array::<f64>(&format!("{prefix}std"))?.data().to_vec(),
    })
}

/// The non-array part of one conversation.
#[derive(Serialize, Deserialize)]
struct DyadMeta {
    turns: Vec<Turn>,
    listen_segments: Vec<ListenSegment>,
    text_prompt: Option<u32>,
}

fn put_json<T: Serialize>(c: &mut ArrayContainer, name: &str, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    c.put_u8(name, vec![bytes.len()], bytes)
}

fn get_json<T: for<'de> Deserialize<'de>>(c: &ArrayContainer, name: &str) -> Result<T> {
    let (_, bytes) = c.get_u8(name)?;
    Ok(serde_json::from_slice(bytes)?)
}

fn put_vad(c: &mut ArrayContainer, name: &str, vad: &[bool]) -> Result<()> {
    c.put_u8(name, vec![vad.len()], vad.iter().map(|&b| b as u8).collect())
}

fn get_vad(c: &ArrayContainer, name: &str) -> Result<Vec<bool>> {
    let (_, bytes) = c.get_u8(name)?;
    Ok(bytes.iter().map(|&b| b != 0).collect())
}

/// Store a corpus under `prefix` (entries `prefix0000.actor_motion`, ...).
pub fn put_corpus(c: &mut ArrayContainer, prefix: &str, dyads: &[DyadSample]) -> Result<()> {
    put_json(c, &format!("{prefix}count"), &dyads.len())?;
    for (i, d) in dyads.iter().enumerate() {
        let p = format!("{prefix}{i:04}.");
        c.put_array(&format!("{p}actor_motion"), &d.actor_motion)?;
        c.put_array(&format!("{p}partner_motion"), &d.partner_motion)?;
        c.put_array(&format!("{p}actor_audio"), &d.actor_audio)?;
        c.put_array(&format!("{p}partner_audio"), &d.partner_audio)?;
        put_vad(c, &format!("{p}actor_vad"), &d.actor_vad)?;
        put_vad(c, &format!("{p}partner_vad"), &d.partner_vad)?;
        let meta = DyadMeta {
            turns: d.turns.clone(),
            listen_segments: d.listen_segments.clone(),
            text_prompt: d.text_prompt,
        };
        put_json(c, &format!("{p}meta"), &meta)?;
    }
    Ok(())
}

pub fn get_corpus(c: &ArrayContainer, prefix: &str) -> Result<Vec<DyadSample>> {
    let count: usize = get_json(c, &format!("{prefix}count"))?;
    let mut dyads = Vec::with_capacity(count);
    for i in 0..count {
        let p = format!("{prefix}{i:04}.");
        let meta: DyadMeta = get_json(c, &format!("{p}meta"))?;
        dyads.push(DyadSample {
            actor_motion: c.get_array(&format!("{p}actor_motion"))?,
            partner_motion: c.get_array(&format!("{p}partner_motion"))?,
            actor_audio: c.get_array(&format!("{p}actor_audio"))?,
            partner_audio: c.get_array(&format!("{p}partner_audio"))?,
            actor_vad: get_vad(c, &format!("{p}actor_vad"))?,
            partner_vad: get_vad(c, &format!("{p}partner_vad"))?,
            turns: meta.turns,
            listen_segments: meta.listen_segments,
            text_prompt: meta.text_prompt,
        });
    }
    Ok(dyads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::synthdata::{generate_dyad, DyadConfig};

    #[test]
    fn store_roundtrip_is_bit_identical() {
        let mut rng = Stream::derive(3, &["artifacts", "store"], &[0]);
        let mut store = ParamStore::<f64>::new();
        store.insert_weight("a.w", vec![3, 4], 0.5, &mut rng).unwrap();
        store.insert_zeros("b.bias", vec![4]).unwrap();

        let mut c = ArrayContainer::new();
        put_store(&mut c, "params.", &store).unwrap();
        put_stats(&mut c, "stats.", &NormStats { mean: vec![1.0, 2.0], std: vec![3.0, 4.0] })
            .unwrap();

        let back = get_store(&c, "params.").unwrap();
        assert_eq!(back.len(), store.len());
        for (name, value) in store.iter() {
            assert_eq!(back.get(name).unwrap().data(), value.data());
        }
        // The stats entries do not leak into the parameter prefix.
        assert!(!back.contains("stats.mean"));
        let stats = get_stats(&c, "stats.").unwrap();
        assert_eq!(stats.mean, vec![1.0, 2.0]);
        assert_eq!(stats.std, vec![3.0, 4.0]);

        assert!(matches!(get_store(&c, "nothing."), Err(Error::Format(_))));
    }

    #[test]
    fn corpus_roundtrip_preserves_every_field() {
        let cfg = DyadConfig { frames: 48, seg_min: 8, seg_max: 16, ..DyadConfig::default() };
        let dyads: Vec<DyadSample> =
            (0..3).map(|i| generate_dyad(&cfg, i).unwrap()).collect();

        let mut c = ArrayContainer::new();
        put_corpus(&mut c, "train.", &dyads).unwrap();
        let back = get_corpus(&c, "train.").unwrap();

        assert_eq!(back.len(), dyads.len());
        for (a, b) in dyads.iter().zip(&back) {
            assert_eq!(a.actor_motion.data(), b.actor_motion.data());
            assert_eq!(a.partner_motion.data(), b.partner_motion.data());
            assert_eq!(a.actor_audio.data(), b.actor_audio.data());
            assert_eq!(a.partner_audio.data(), b.partner_audio.data());
            assert_eq!(a.actor_vad, b.actor_vad);
            assert_eq!(a.partner_vad, b.partner_vad);
            assert_eq!(a.turns, b.turns);
            assert_eq!(a.listen_segments, b.listen_segments);
            assert_eq!(a.text_prompt, b.text_prompt);
        }
    }
}
