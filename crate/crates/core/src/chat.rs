//! Deterministic stand-in for a language model: the mean token of a grid is
//! matched against a codebook of captioned vectors.

use std::path::Path;

use crate::cstf::{Container, Record};
use crate::encoder::{Level, TokenGrid};
use crate::error::{Error, Result};

pub const CODEBOOK_RECORD: &str = "codebook.vectors";
pub const TOKENS_RECORD: &str = "tokens";

/// A token grid as a container: `tokens [T, D]` (f32), `tokens.grid`
/// (rows, cols) and `tokens.level` (0 view, 1 object, 2 scene).
pub fn tokens_to_container(grid: &TokenGrid) -> Container {
    let mut c = Container::new();
    let data = grid.data.iter().map(|&v| v as f32).collect();
    c.push(Record::f32(TOKENS_RECORD, &[grid.count, grid.dim], data));
    c.push(Record::u32("tokens.grid", &[2], vec![grid.grid.0 as u32, grid.grid.1 as u32]));
    let level = Level::ALL.iter().position(|&l| l == grid.level).unwrap() as u32;
    c.push(Record::scalar_u32("tokens.level", level));
    c
}

pub fn tokens_from_container(c: &Container) -> Result<TokenGrid> {
    let (data, dims) = c.f32_any(TOKENS_RECORD)?;
    let [count, dim] = dims[..] else {
        return Err(Error::Format(format!("{TOKENS_RECORD} must have rank 2")));
    };
    let (g, _) = c.u32_any("tokens.grid")?;
    let [rows, cols] = g[..] else {
        return Err(Error::Format("tokens.grid must hold two values".into()));
    };
    if rows as usize * cols as usize != count {
        return Err(Error::Shape(format!("{rows}x{cols} grid for {count} tokens")));
    }
    let level = *Level::ALL
        .get(c.scalar_u32("tokens.level")? as usize)
        .ok_or_else(|| Error::Format("unknown token level".into()))?;
    TokenGrid::from_vec(
        level,
        rows as usize,
        cols as usize,
        dim,
        data.iter().map(|&v| v as f64).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookEntry {
    pub vector: Vec<f32>,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub entries: Vec<CodebookEntry>,
}

impl Codebook {
    pub fn new(dim: usize, entries: Vec<CodebookEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("codebook is empty".into()));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::Shape(format!(
                    "codebook entry {i} has {} values, expected {dim}",
                    e.vector.len()
                )));
            }
            if let Some(j) = e.vector.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data {
                    index: i * dim + j,
                    message: "non-finite codebook value".into(),
                });
            }
        }
        Ok(Self { dim, entries })
    }

    /// Vectors from a `[K, D]` record and captions from a JSON array.
    pub fn from_parts(c: &Container, captions_json: &str) -> Result<Self> {
        let (data, dims) = c.f32_any(CODEBOOK_RECORD)?;
        let [k, d] = dims[..] else {
            return Err(Error::Format(format!("{CODEBOOK_RECORD} must have rank 2")));
        };
        let captions: Vec<String> = serde_json::from_str(captions_json)
            .map_err(|e| Error::Format(format!("codebook captions: {e}")))?;
        if captions.len() != k {
            return Err(Error::Shape(format!("{k} codebook vectors but {} captions", captions.len())));
        }
        let entries = captions
            .into_iter()
            .enumerate()
            .map(|(i, caption)| CodebookEntry {
                vector: data[i * d..(i + 1) * d].to_vec(),
                caption,
            })
            .collect();
        Self::new(d, entries)
    }

    pub fn load(vectors: impl AsRef<Path>, captions: impl AsRef<Path>) -> Result<Self> {
        let c = Container::load(vectors)?;
        Self::from_parts(&c, &std::fs::read_to_string(captions)?)
    }

    pub fn save(&self, vectors: impl AsRef<Path>, captions: impl AsRef<Path>) -> Result<()> {
        let mut c = Container::new();
        let data = self.entries.iter().flat_map(|e| e.vector.iter().copied()).collect();
        c.push(Record::f32(CODEBOOK_RECORD, &[self.entries.len(), self.dim], data));
        c.save(vectors)?;
        let caps: Vec<&str> = self.entries.iter().map(|e| e.caption.as_str()).collect();
        std::fs::write(captions, serde_json::to_string_pretty(&caps).unwrap())?;
        Ok(())
    }
}

fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let y = y as f64;
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MockAnswer {
    pub text: String,
    pub entry: usize,
    pub similarity: f64,
}

/// Answers with the caption of the entry closest in cosine similarity to
/// the mean token. Ties go to the lower index. The question is ignored.
pub fn mock_chat(tokens: &TokenGrid, _question: &str, codebook: &Codebook) -> Result<MockAnswer> {
    if tokens.dim != codebook.dim {
        return Err(Error::Shape(format!(
            "tokens have dimension {}, codebook {}",
            tokens.dim, codebook.dim
        )));
    }
    let mean = tokens.mean_token();
    let mut best = (0, f64::NEG_INFINITY);
    for (i, e) in codebook.entries.iter().enumerate() {
        let s = cosine(&mean, &e.vector);
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(MockAnswer {
        text: format!("[{}] {}", tokens.level.name(), codebook.entries[best.0].caption),
        entry: best.0,
        similarity: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Level;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn entry(v: Vec<f32>, c: &str) -> CodebookEntry {
        CodebookEntry {
            vector: v,
            caption: c.into(),
        }
    }

    fn grid(level: Level, rows: Vec<Vec<f64>>) -> TokenGrid {
        let d = rows[0].len();
        let n = rows.len();
        TokenGrid::from_vec(level, n, 1, d, rows.concat()).unwrap()
    }

    #[test]
    fn single_entry_always_wins() {
        let cb = Codebook::new(2, vec![entry(vec![1.0, 0.0], "a red mug")]).unwrap();
        let g = grid(Level::Object, vec![vec![-3.0, 1.0], vec![0.5, 9.0]]);
        assert_eq!(mock_chat(&g, "what?", &cb).unwrap().text, "[object] a red mug");
    }

    #[test]
    fn replicated_entry_has_unit_cosine() {
        let cb = Codebook::new(
            3,
            vec![entry(vec![1.0, 2.0, 3.0], "x"), entry(vec![-1.0, 0.5, 2.0], "y")],
        )
        .unwrap();
        let g = grid(Level::View, vec![vec![-1.0, 0.5, 2.0]; 4]);
        let a = mock_chat(&g, "", &cb).unwrap();
        assert_eq!((a.entry, a.text.as_str()), (1, "[view] y"));
        assert!((a.similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let cb = Codebook::new(2, vec![entry(vec![1.0, 0.0], "first"), entry(vec![2.0, 0.0], "second")]).unwrap();
        let g = grid(Level::Scene, vec![vec![1.0, 0.0]]);
        assert_eq!(mock_chat(&g, "", &cb).unwrap().entry, 0);
    }

    #[test]
    fn orthogonal_codebook_matches_brute_force() {
        let d = 6;
        let entries: Vec<CodebookEntry> = (0..d)
            .map(|i| {
                let mut v = vec![0.0; d];
                v[i] = (i + 1) as f32;
                entry(v, &format!("axis {i}"))
            })
            .collect();
        let cb = Codebook::new(d, entries).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> = (0..5).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let g = grid(Level::View, rows.clone());
            let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect();
            // cosine with a positive axis is the normalized coordinate
            let want = (0..d).fold(0, |b, j| if mean[j] > mean[b] { j } else { b });
            assert_eq!(mock_chat(&g, "", &cb).unwrap().entry, want);
        }
    }

    #[test]
    fn token_container_round_trips() {
        let g = TokenGrid::from_vec(Level::Object, 2, 3, 2, (0..12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let c = Container::from_bytes(&tokens_to_container(&g).to_bytes()).unwrap();
        assert_eq!(tokens_from_container(&c).unwrap(), g);
    }

    #[test]
    fn codebook_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cb = Codebook::new(2, vec![entry(vec![0.25, -1.0], "lamp"), entry(vec![3.0, 1.0], "chair")]).unwrap();
        let (v, c) = (dir.path().join("cb.cstf"), dir.path().join("cb.json"));
        cb.save(&v, &c).unwrap();
        assert_eq!(Codebook::load(&v, &c).unwrap(), cb);
        assert!(matches!(Codebook::new(2, vec![]), Err(Error::Config(_))));
    }
}
