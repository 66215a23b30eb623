//! RVQ token grids and the interleaving patterns over them.
//!
//! A [`TokenGrid`] holds K codebook layers × T frames of token ids, layer 0
//! being the coarsest. Two interleavings serialise a grid for language
//! modelling:
//!
//! * the **delay** pattern right-shifts layer k by k steps, giving a
//!   K × (K+T−1) grid padded with PAD sentinels, so one step predicts one
//!   token per layer;
//! * the **flatten** pattern concatenates the layers frame-major into a
//!   single sequence of length K·T.
//!
//! Sentinel ids sit above the vocabulary: PAD = vocab, BOS = vocab + 1, so
//! embedding tables allocate vocab + 2 rows.
//!
//! # On-disk format
//!
//! A grid serialises to the byte-exact layout
//! `"TG01" | k_layers:u32le | t_frames:u32le | vocab:u32le | tokens:u32le×(K·T)`
//! with an optional `<file>.json` provenance sidecar. A corpus file is
//! `"TGC1" | count:u64le` followed by `class_id:u32le | grid-bytes` records.

use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"TG01";
pub const CORPUS_MAGIC: &[u8; 4] = b"TGC1";

/// K × T grid of RVQ token indices. Layer 0 is the coarsest. All entries are
/// real tokens (< vocab); sentinels appear only in [`DelayedGrid`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    k_layers: usize,
    t_frames: usize,
    vocab: u32,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(k_layers: usize, t_frames: usize, vocab: u32, tokens: Vec<u32>) -> Result<TokenGrid> {
        if k_layers == 0 || t_frames == 0 || vocab == 0 {
            return Err(Error::contract("TokenGrid needs K >= 1, T >= 1, vocab >= 1"));
        }
        if tokens.len() != k_layers * t_frames {
            return Err(Error::contract(format!(
                "token count {} does not match K*T = {}",
                tokens.len(),
                k_layers * t_frames
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
            return Err(Error::contract(format!(
                "token {bad} out of vocabulary range [0, {vocab})"
            )));
        }
        Ok(TokenGrid {
            k_layers,
            t_frames,
            vocab,
            tokens,
        })
    }

    pub fn k_layers(&self) -> usize {
        self.k_layers
    }

    pub fn t_frames(&self) -> usize {
        self.t_frames
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    /// PAD sentinel id for this vocabulary.
    pub fn pad_id(&self) -> u32 {
        self.vocab
    }

    /// BOS sentinel id for this vocabulary.
    pub fn bos_id(&self) -> u32 {
        self.vocab + 1
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn layer(&self, k: usize) -> &[u32] {
        &self.tokens[k * self.t_frames..(k + 1) * self.t_frames]
    }

    pub fn get(&self, k: usize, t: usize) -> u32 {
        self.tokens[k * self.t_frames + t]
    }
}

/// Sentinel ids for a vocabulary: PAD = vocab, BOS = vocab + 1.
pub fn pad_id(vocab: u32) -> u32 {
    vocab
}

pub fn bos_id(vocab: u32) -> u32 {
    vocab + 1
}

/// Embedding tables over a vocabulary allocate `vocab + 2` rows (PAD, BOS).
pub fn table_rows(vocab: u32) -> usize {
    vocab as usize + 2
}

/// A delay-interleaved grid: K × (K+T−1), where row k holds exactly k
/// leading PADs, the T real tokens of layer k, then K−1−k trailing PADs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DelayedGrid {
    k_layers: usize,
    original_t: usize,
    vocab: u32,
    tokens: Vec<u32>,
}

impl DelayedGrid {
    pub fn k_layers(&self) -> usize {
        self.k_layers
    }

    /// Frame count of the grid this pattern was applied to.
    pub fn original_t(&self) -> usize {
        self.original_t
    }

    /// Total width K + T − 1.
    pub fn width(&self) -> usize {
        self.k_layers + self.original_t - 1
    }

    pub fn vocab(&self) -> u32 {
        self.vocab
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn get(&self, k: usize, col: usize) -> u32 {
        self.tokens[k * self.width() + col]
    }

    /// Column `col` as a K-vector (with PADs where the pattern placed them).
    pub fn column(&self, col: usize) -> Vec<u32> {
        (0..self.k_layers).map(|k| self.get(k, col)).collect()
    }

    /// All columns as K-vectors, the model-input view of the pattern.
    pub fn columns(&self) -> Vec<Vec<u32>> {
        (0..self.width()).map(|c| self.column(c)).collect()
    }

    /// Rows holding a real token at this column: k with k ≤ col < k+T.
    pub fn live_rows(&self, col: usize) -> std::ops::Range<usize> {
        let lo = (col + 1).saturating_sub(self.original_t);
        let hi = (col + 1).min(self.k_layers);
        lo..hi
    }

    /// Build an all-PAD delayed grid to be filled column by column during
    /// generation.
    pub fn empty(k_layers: usize, t_frames: usize, vocab: u32) -> DelayedGrid {
        let width = k_layers + t_frames - 1;
        DelayedGrid {
            k_layers,
            original_t: t_frames,
            vocab,
            tokens: vec![pad_id(vocab); k_layers * width],
        }
    }

    pub fn set(&mut self, k: usize, col: usize, token: u32) {
        let w = self.width();
        self.tokens[k * w + col] = token;
    }
}

/// Right-shift layer k by k steps (0-indexed, coarsest layer unshifted).
/// Row k of the result occupies columns k..k+T−1; width is K+T−1.
pub fn delay_apply(g: &TokenGrid) -> DelayedGrid {
    let (k_layers, t) = (g.k_layers, g.t_frames);
    let width = k_layers + t - 1;
    let pad = g.pad_id();
    let mut tokens = vec![pad; k_layers * width];
    for k in 0..k_layers {
        for col in 0..t {
            tokens[k * width + k + col] = g.get(k, col);
        }
    }
    DelayedGrid {
        k_layers,
        original_t: t,
        vocab: g.vocab,
        tokens,
    }
}

/// Exact inverse of [`delay_apply`]. Rejects grids whose sentinel placement
/// does not match the pattern.
pub fn delay_invert(d: &DelayedGrid) -> Result<TokenGrid> {
    let (k_layers, t, width) = (d.k_layers, d.original_t, d.width());
    let pad = d.pad_id();
    let mut tokens = vec![0u32; k_layers * t];
    for k in 0..k_layers {
        for col in 0..width {
            let tok = d.tokens[k * width + col];
            let in_band = col >= k && col < k + t;
            if in_band {
                if tok >= d.vocab {
                    return Err(Error::contract(format!(
                        "sentinel {tok} inside the data band at row {k}, column {col}"
                    )));
                }
                tokens[k * t + (col - k)] = tok;
            } else if tok != pad {
                return Err(Error::contract(format!(
                    "expected PAD outside the data band at row {k}, column {col}, found {tok}"
                )));
            }
        }
    }
    TokenGrid::new(k_layers, t, d.vocab, tokens)
}

/// Concatenate all layers frame-major into one sequence
/// x₁¹, x₁², …, x₁ᴷ, x₂¹, … of length K·T.
pub fn flatten_apply(g: &TokenGrid) -> Vec<u32> {
    let mut out = Vec::with_capacity(g.k_layers * g.t_frames);
    for t in 0..g.t_frames {
        for k in 0..g.k_layers {
            out.push(g.get(k, t));
        }
    }
    out
}

/// Inverse of [`flatten_apply`] given the layer count.
pub fn flatten_invert(seq: &[u32], k_layers: usize, vocab: u32) -> Result<TokenGrid> {
    if k_layers == 0 || seq.len() % k_layers != 0 {
        return Err(Error::contract(format!(
            "sequence length {} is not a multiple of K = {k_layers}",
            seq.len()
        )));
    }
    let t = seq.len() / k_layers;
    let mut tokens = vec![0u32; k_layers * t];
    for (i, &tok) in seq.iter().enumerate() {
        let (frame, layer) = (i / k_layers, i % k_layers);
        tokens[layer * t + frame] = tok;
    }
    TokenGrid::new(k_layers, t, vocab, tokens)
}

/// Split into the coarse row (layer 0) and the fine layers (1..K).
/// Requires K ≥ 2.
pub fn split_coarse_fine(g: &TokenGrid) -> Result<(Vec<u32>, TokenGrid)> {
    if g.k_layers < 2 {
        return Err(Error::contract(
            "split_coarse_fine requires K >= 2 for a nonempty fine part",
        ));
    }
    let coarse = g.layer(0).to_vec();
    let fine = TokenGrid::new(
        g.k_layers - 1,
        g.t_frames,
        g.vocab,
        g.tokens[g.t_frames..].to_vec(),
    )?;
    Ok((coarse, fine))
}

/// Reassemble a full grid from a coarse row and its fine layers.
pub fn recombine(coarse: &[u32], fine: &TokenGrid) -> Result<TokenGrid> {
    if coarse.len() != fine.t_frames {
        return Err(Error::contract(format!(
            "coarse length {} does not match fine frame count {}",
            coarse.len(),
            fine.t_frames
        )));
    }
    let mut tokens = Vec::with_capacity((fine.k_layers + 1) * fine.t_frames);
    tokens.extend_from_slice(coarse);
    tokens.extend_from_slice(&fine.tokens);
    TokenGrid::new(fine.k_layers + 1, fine.t_frames, fine.vocab, tokens)
}

// ── on-disk format ─────────────────────────────────────────────────────────

pub fn grid_to_bytes(g: &TokenGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * g.tokens.len());
    out.extend_from_slice(GRID_MAGIC);
    out.extend_from_slice(&(g.k_layers as u32).to_le_bytes());
    out.extend_from_slice(&(g.t_frames as u32).to_le_bytes());
    out.extend_from_slice(&g.vocab.to_le_bytes());
    for &t in &g.tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn grid_from_reader(r: &mut impl Read) -> Result<TokenGrid> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != GRID_MAGIC {
        return Err(Error::format(format!("bad grid magic {magic:?}")));
    }
    let k = read_u32(r)? as usize;
    let t = read_u32(r)? as usize;
    let vocab = read_u32(r)?;
    if k == 0 || t == 0 || k.checked_mul(t).is_none() {
        return Err(Error::format(format!("bad grid header: K={k}, T={t}")));
    }
    let mut tokens = Vec::with_capacity(k * t);
    for _ in 0..k * t {
        tokens.push(read_u32(r)?);
    }
    TokenGrid::new(k, t, vocab, tokens)
}

pub fn grid_from_bytes(bytes: &[u8]) -> Result<TokenGrid> {
    grid_from_reader(&mut std::io::Cursor::new(bytes))
}

/// Write a grid plus a `<path>.json` provenance sidecar.
pub fn write_grid(path: &Path, g: &TokenGrid, provenance: &serde_json::Value) -> Result<()> {
    std::fs::write(path, grid_to_bytes(g))?;
    let sidecar = path.with_extension(format!(
        "{}json",
        path.extension()
            .map(|e| format!("{}.", e.to_string_lossy()))
            .unwrap_or_default()
    ));
    std::fs::write(&sidecar, serde_json::to_string_pretty(provenance)?)?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<TokenGrid> {
    let bytes = std::fs::read(path)?;
    grid_from_bytes(&bytes)
}

/// Write a labelled corpus: `"TGC1" | count:u64le` then
/// `class_id:u32le | grid` records.
pub fn write_corpus(path: &Path, records: &[(TokenGrid, u32)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CORPUS_MAGIC)?;
    w.write_all(&(records.len() as u64).to_le_bytes())?;
    for (grid, class) in records {
        w.write_all(&class.to_le_bytes())?;
        w.write_all(&grid_to_bytes(grid))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Vec<(TokenGrid, u32)>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CORPUS_MAGIC {
        return Err(Error::format(format!("bad corpus magic {magic:?}")));
    }
    let mut count_buf = [0u8; 8];
    r.read_exact(&mut count_buf)?;
    let count = u64::from_le_bytes(count_buf);
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let class = read_u32(&mut r)?;
        let grid = grid_from_reader(&mut r)?;
        records.push((grid, class));
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_grid(rng: &mut rand_chacha::ChaCha8Rng, k: usize, t: usize, vocab: u32) -> TokenGrid {
        let tokens = (0..k * t).map(|_| rng.gen_range(0..vocab)).collect();
        TokenGrid::new(k, t, vocab, tokens).unwrap()
    }

    #[test]
    fn rejects_out_of_vocab_tokens() {
        assert!(TokenGrid::new(1, 2, 4, vec![0, 4]).is_err());
        assert!(TokenGrid::new(1, 2, 4, vec![0, 3]).is_ok());
    }

    #[test]
    fn delay_single_layer_is_identity_layout() {
        let g = TokenGrid::new(1, 4, 8, vec![1, 2, 3, 4]).unwrap();
        let d = delay_apply(&g);
        assert_eq!(d.width(), 4);
        assert_eq!(d.tokens(), g.tokens());
    }

    #[test]
    fn delay_two_by_three_explicit_layout() {
        // rows [a1 a2 a3], [b1 b2 b3] → [[a1 a2 a3 P], [P b1 b2 b3]], width 4.
        let g = TokenGrid::new(2, 3, 10, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let d = delay_apply(&g);
        assert_eq!(d.width(), 4); // K + T − 1
        let pad = d.pad_id();
        assert_eq!(d.tokens(), &[1, 2, 3, pad, pad, 4, 5, 6]);
    }

    #[test]
    fn delay_three_by_one_is_antidiagonal() {
        let g = TokenGrid::new(3, 1, 10, vec![7, 8, 9]).unwrap();
        let d = delay_apply(&g);
        assert_eq!(d.width(), 3);
        let p = d.pad_id();
        assert_eq!(d.tokens(), &[7, p, p, p, 8, p, p, p, 9]);
    }

    #[test]
    fn delay_roundtrip_exhaustive_small() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for k in 1..=9 {
            for t in [1usize, 2, 5, 32] {
                let g = random_grid(&mut rng, k, t, 16);
                let back = delay_invert(&delay_apply(&g)).unwrap();
                assert_eq!(back, g, "K={k} T={t}");
            }
        }
    }

    #[test]
    fn delay_invert_rejects_malformed_sentinels() {
        let g = TokenGrid::new(2, 3, 10, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let mut d = delay_apply(&g);
        // PAD inside the data band.
        d.set(0, 1, d.pad_id());
        assert!(delay_invert(&d).is_err());

        let mut d = delay_apply(&g);
        // Real token where a PAD belongs.
        d.set(1, 0, 3);
        assert!(delay_invert(&d).is_err());
    }

    #[test]
    fn live_rows_cover_exactly_the_data_band() {
        let g = TokenGrid::new(3, 4, 8, (0..12).map(|i| i % 8).collect()).unwrap();
        let d = delay_apply(&g);
        for col in 0..d.width() {
            let live = d.live_rows(col);
            for k in 0..3 {
                let expect = col >= k && col < k + 4;
                assert_eq!(live.contains(&k), expect, "col {col} row {k}");
            }
        }
    }

    #[test]
    fn flatten_orders_frame_major_layer_inner() {
        // [[a1 a2], [b1 b2]] → [a1, b1, a2, b2]
        let g = TokenGrid::new(2, 2, 8, vec![1, 2, 3, 4]).unwrap();
        assert_eq!(flatten_apply(&g), vec![1, 3, 2, 4]);
    }

    #[test]
    fn flatten_single_layer_is_the_row() {
        let g = TokenGrid::new(1, 3, 8, vec![5, 6, 7]).unwrap();
        assert_eq!(flatten_apply(&g), vec![5, 6, 7]);
    }

    #[test]
    fn split_and_recombine() {
        let g = TokenGrid::new(3, 2, 8, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let (coarse, fine) = split_coarse_fine(&g).unwrap();
        assert_eq!(coarse, vec![1, 2]);
        assert_eq!(fine.k_layers(), 2);
        assert_eq!(recombine(&coarse, &fine).unwrap(), g);

        let g2 = TokenGrid::new(2, 2, 8, vec![1, 2, 3, 4]).unwrap();
        let (_, fine2) = split_coarse_fine(&g2).unwrap();
        assert_eq!(fine2.k_layers(), 1);

        let g1 = TokenGrid::new(1, 2, 8, vec![1, 2]).unwrap();
        assert!(split_coarse_fine(&g1).is_err());
    }

    #[test]
    fn split_nine_layers_gives_eight_fine() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let g = random_grid(&mut rng, 9, 5, 32);
        let (_, fine) = split_coarse_fine(&g).unwrap();
        assert_eq!(fine.k_layers(), 8);
    }

    #[test]
    fn grid_bytes_layout_is_exact() {
        let g = TokenGrid::new(1, 2, 4, vec![3, 1]).unwrap();
        let bytes = grid_to_bytes(&g);
        let expect: Vec<u8> = [
            b"TG01".to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u32.to_le_bytes().to_vec(),
            4u32.to_le_bytes().to_vec(),
            3u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(bytes, expect);
        assert_eq!(grid_from_bytes(&bytes).unwrap(), g);
    }

    #[test]
    fn corpus_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tgc");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let records: Vec<(TokenGrid, u32)> = (0..5)
            .map(|i| (random_grid(&mut rng, 4, 6, 16), i as u32))
            .collect();
        write_corpus(&path, &records).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), records);
    }

    proptest! {
        #[test]
        fn delay_roundtrip_property(k in 1usize..=9, t in 1usize..=64, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, k, t, 64);
            let d = delay_apply(&g);
            prop_assert_eq!(d.width(), k + t - 1);
            prop_assert_eq!(delay_invert(&d).unwrap(), g);
        }

        #[test]
        fn flatten_bijection_property(k in 1usize..=9, t in 1usize..=32, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = random_grid(&mut rng, k, t, 64);
            let seq = flatten_apply(&g);
            prop_assert_eq!(seq.len(), k * t);
            prop_assert_eq!(flatten_invert(&seq, k, 64).unwrap(), g);
        }
    }
}
