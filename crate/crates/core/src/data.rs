//! Assay data: DMS parsing, mutation notation, one-hot encoding and the
//! `EMB1` embedding store.
//!
//! Mutation positions are 1-based on disk (`A23T`) and 0-based in memory.
//! All conversion between the two happens in this module.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Canonical amino-acid ordering used for one-hot columns and logits.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const VOCAB_SIZE: usize = 20;

pub fn aa_index(c: u8) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c)
}

pub fn residue(index: usize) -> char {
    ALPHABET[index] as char
}

/// Validate that `seq` only uses the 20 canonical residues.
pub fn check_sequence(seq: &str) -> Result<()> {
    match seq.bytes().find(|&c| aa_index(c).is_none()) {
        Some(c) => Err(Error::UnknownResidue(c as char)),
        None => Ok(()),
    }
}

/// A single substitution, 0-based in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Mutation {
    pub position: usize,
    pub from: u8,
    pub to: u8,
}

impl Mutation {
    /// Parse one token such as `A23T` (1-based position).
    pub fn parse(token: &str) -> Result<Self> {
        let bad = |reason: &str| Error::MutantToken {
            token: token.to_string(),
            reason: reason.to_string(),
        };
        let bytes = token.as_bytes();
        if bytes.len() < 3 || !token.is_ascii() {
            return Err(bad("expected <from><position><to>"));
        }
        let from = bytes[0];
        let to = bytes[bytes.len() - 1];
        if aa_index(from).is_none() || aa_index(to).is_none() {
            return Err(bad("unknown residue"));
        }
        let pos: usize = token[1..token.len() - 1]
            .parse()
            .map_err(|_| bad("position is not a positive integer"))?;
        if pos == 0 {
            return Err(bad("positions are 1-based"));
        }
        if from == to {
            return Err(bad("from and to residues are identical"));
        }
        Ok(Mutation {
            position: pos - 1,
            from,
            to,
        })
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}{}{}",
            self.from as char,
            self.position + 1,
            self.to as char
        )
    }
}

/// Parse a full mutant field (`WT`, `A1C` or `A1C:D3A`) against `wildtype`.
pub fn parse_mutant(field: &str, wildtype: &str) -> Result<Vec<Mutation>> {
    let field = field.trim();
    if field == "WT" || field.is_empty() {
        return Ok(Vec::new());
    }
    let wt = wildtype.as_bytes();
    let mut seen = HashSet::new();
    let mut muts = Vec::new();
    for token in field.split(':') {
        let m = Mutation::parse(token.trim())?;
        if m.position >= wt.len() {
            return Err(Error::MutantToken {
                token: token.to_string(),
                reason: format!("position beyond wildtype length {}", wt.len()),
            });
        }
        if wt[m.position] != m.from {
            return Err(Error::WildtypeMismatch {
                position: m.position + 1,
                expected: wt[m.position] as char,
                found: m.from as char,
            });
        }
        if !seen.insert(m.position) {
            return Err(Error::MutantToken {
                token: field.to_string(),
                reason: "position mutated twice".into(),
            });
        }
        muts.push(m);
    }
    Ok(muts)
}

/// Render mutations in 1-based notation; the empty set renders as `WT`.
pub fn format_mutant(muts: &[Mutation]) -> String {
    if muts.is_empty() {
        return "WT".to_string();
    }
    muts.iter()
        .map(|m| m.to_string())
        .collect::<Vec<_>>()
        .join(":")
}

pub fn apply_mutations(wildtype: &str, muts: &[Mutation]) -> String {
    let mut seq = wildtype.as_bytes().to_vec();
    for m in muts {
        seq[m.position] = m.to;
    }
    String::from_utf8(seq).expect("residues are ascii")
}

/// Mutations that turn `wildtype` into `sequence`, in position order.
pub fn diff_mutations(wildtype: &str, sequence: &str) -> Result<Vec<Mutation>> {
    if wildtype.len() != sequence.len() {
        return Err(Error::Shape(format!(
            "sequence length {} differs from wildtype length {}",
            sequence.len(),
            wildtype.len()
        )));
    }
    Ok(wildtype
        .bytes()
        .zip(sequence.bytes())
        .enumerate()
        .filter(|(_, (a, b))| a != b)
        .map(|(position, (from, to))| Mutation { position, from, to })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmsRecord {
    pub sequence: String,
    pub mutations: Vec<Mutation>,
    pub fitness: f64,
}

impl DmsRecord {
    pub fn mutant(&self) -> String {
        format_mutant(&self.mutations)
    }

    pub fn mutation_count(&self) -> usize {
        self.mutations.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DmsDataset {
    pub wildtype: String,
    pub records: Vec<DmsRecord>,
    pub wildtype_fitness: f64,
}

impl DmsDataset {
    /// Build a dataset, checking every record against the wildtype.
    pub fn new(wildtype: String, records: Vec<DmsRecord>, wildtype_fitness: f64) -> Result<Self> {
        check_sequence(&wildtype)?;
        let wt = wildtype.as_bytes();
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            for m in &r.mutations {
                if m.position >= wt.len() || wt[m.position] != m.from || m.from == m.to {
                    return Err(Error::WildtypeMismatch {
                        position: m.position + 1,
                        expected: wt.get(m.position).copied().unwrap_or(b'?') as char,
                        found: m.from as char,
                    });
                }
            }
            if apply_mutations(&wildtype, &r.mutations) != r.sequence {
                return Err(Error::InvalidArgument(format!(
                    "record `{}` does not reproduce its sequence",
                    r.mutant()
                )));
            }
            if !r.fitness.is_finite() {
                return Err(Error::BadScore {
                    mutant: r.mutant(),
                    value: r.fitness.to_string(),
                });
            }
            if !seen.insert(r.sequence.as_str()) {
                return Err(Error::DuplicateSequence(r.mutant()));
            }
        }
        Ok(DmsDataset {
            wildtype,
            records,
            wildtype_fitness,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Sorted set of positions touched by any record (the assay positions).
    pub fn mutated_positions(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .records
            .iter()
            .flat_map(|r| r.mutations.iter().map(|m| m.position))
            .collect();
        set.into_iter().collect()
    }

    pub fn fitness(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.fitness).collect()
    }

    /// Serialize in the `mutant,sequence,DMS_score` layout accepted by [`parse_dms`].
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["mutant", "sequence", "DMS_score"])?;
        for r in &self.records {
            w.write_record([r.mutant(), r.sequence.clone(), format_score(r.fitness)])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Shortest decimal that round-trips the f64.
pub fn format_score(x: f64) -> String {
    format!("{x:?}")
}

/// Parse a DMS CSV with header columns `mutant,sequence,DMS_score`.
///
/// Extra columns are ignored. The `sequence` column may be empty, in which
/// case it is derived from the mutant field; when present it must match.
pub fn parse_dms(csv_text: &str, wildtype: &str) -> Result<DmsDataset> {
    check_sequence(wildtype)?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(csv_text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Csv(format!("missing column `{name}`")))
    };
    let (i_mut, i_seq, i_score) = (col("mutant")?, col("sequence")?, col("DMS_score")?);

    let mut records = Vec::new();
    let mut wildtype_fitness = 0.0;
    for row in rdr.records() {
        let row = row?;
        let field = row.get(i_mut).unwrap_or("");
        let score_text = row.get(i_score).unwrap_or("");
        let fitness: f64 = score_text
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| Error::BadScore {
                mutant: field.to_string(),
                value: score_text.to_string(),
            })?;
        let mutations = parse_mutant(field, wildtype)?;
        let sequence = apply_mutations(wildtype, &mutations);
        let given = row.get(i_seq).unwrap_or("");
        if !given.is_empty() && given != sequence {
            return Err(Error::InvalidArgument(format!(
                "sequence column for `{field}` disagrees with its mutations"
            )));
        }
        if mutations.is_empty() {
            wildtype_fitness = fitness;
        }
        records.push(DmsRecord {
            sequence,
            mutations,
            fitness,
        });
    }
    DmsDataset::new(wildtype.to_string(), records, wildtype_fitness)
}

/// L×20 one-hot encoding in [`ALPHABET`] order.
pub fn one_hot(sequence: &str) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((sequence.len(), VOCAB_SIZE));
    for (i, c) in sequence.bytes().enumerate() {
        let j = aa_index(c).ok_or(Error::UnknownResidue(c as char))?;
        out[[i, j]] = 1.0;
    }
    Ok(out)
}

/// Residue indices of a sequence (the sparse form of [`one_hot`]).
pub fn encode_indices(sequence: &str) -> Result<Vec<usize>> {
    sequence
        .bytes()
        .map(|c| aa_index(c).ok_or(Error::UnknownResidue(c as char)))
        .collect()
}

// ---------------------------------------------------------------------------
// EMB1 store
// ---------------------------------------------------------------------------

pub const STORE_MAGIC: &[u8; 4] = b"EMB1";
pub const STORE_VERSION: u16 = 1;
const FLAG_LOGITS: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StoreEntry {
    /// L × d_model
    pub embedding: Array2<f64>,
    /// L × V
    pub logits: Option<Array2<f64>>,
}

/// Named embeddings (and optionally logits) sharing one `d_model`.
///
/// Values are held at f32 precision: [`EmbeddingStore::insert`] rounds
/// through f32 so that a store survives a write/read cycle bit-exactly.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingStore {
    entries: BTreeMap<String, StoreEntry>,
}

fn quantize(m: &Array2<f64>) -> Array2<f64> {
    m.mapv(|v| v as f32 as f64)
}

impl EmbeddingStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn d_model(&self) -> Option<usize> {
        self.entries.values().next().map(|e| e.embedding.ncols())
    }

    pub fn has_logits(&self) -> bool {
        self.entries.values().next().is_some_and(|e| e.logits.is_some())
    }

    pub fn get(&self, id: &str) -> Option<&StoreEntry> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &StoreEntry)> {
        self.entries.iter()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        embedding: Array2<f64>,
        logits: Option<Array2<f64>>,
    ) -> Result<()> {
        let id = id.into();
        if id.len() > u16::MAX as usize {
            return Err(Error::InvalidArgument("store id too long".into()));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::InvalidArgument(format!("duplicate store id `{id}`")));
        }
        let (l, d) = embedding.dim();
        if l == 0 || d == 0 {
            return Err(Error::Shape(format!("empty embedding for `{id}`")));
        }
        if embedding.iter().any(|v| !(*v as f32).is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding for `{id}`")));
        }
        if let Some(first) = self.entries.values().next() {
            if first.embedding.ncols() != d {
                return Err(Error::Shape(format!(
                    "d_model {d} for `{id}` differs from store d_model {}",
                    first.embedding.ncols()
                )));
            }
            if first.logits.is_some() != logits.is_some() {
                return Err(Error::Shape(
                    "either every entry carries logits or none does".into(),
                ));
            }
            if let (Some(a), Some(b)) = (&first.logits, &logits) {
                if a.ncols() != b.ncols() {
                    return Err(Error::Shape("vocabulary size differs across entries".into()));
                }
            }
        }
        if let Some(lg) = &logits {
            if lg.nrows() != l {
                return Err(Error::Shape(format!("logits rows differ from L for `{id}`")));
            }
            if lg.iter().any(|v| !(*v as f32).is_finite()) {
                return Err(Error::Numeric(format!("non-finite logits for `{id}`")));
            }
        }
        self.entries.insert(
            id,
            StoreEntry {
                embedding: quantize(&embedding),
                logits: logits.as_ref().map(quantize),
            },
        );
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        let flags = if self.has_logits() { FLAG_LOGITS } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, e) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            write_matrix(&mut out, &e.embedding);
            if let Some(lg) = &e.logits {
                out.extend_from_slice(&(lg.ncols() as u32).to_le_bytes());
                for v in lg.iter() {
                    out.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != STORE_MAGIC {
            return Err(Error::Format("magic mismatch (expected EMB1)".into()));
        }
        let version = r.u16()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let flags = r.u16()?;
        let n = r.u32()? as usize;
        let mut store = EmbeddingStore::new();
        for _ in 0..n {
            let id_len = r.u16()? as usize;
            let id = std::str::from_utf8(r.take(id_len)?)
                .map_err(|_| Error::Format("id is not utf-8".into()))?
                .to_string();
            let l = r.u32()? as usize;
            let d = r.u32()? as usize;
            let embedding = r.matrix(l, d)?;
            let logits = if flags & FLAG_LOGITS != 0 {
                let v = r.u32()? as usize;
                Some(r.matrix(l, v)?)
            } else {
                None
            };
            store.insert(id, embedding, logits)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(store)
    }
}

fn write_matrix(out: &mut Vec<u8>, m: &Array2<f64>) {
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    for v in m.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated payload".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("matrix size overflow".into()))?;
        let raw = self.take(n)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
    }
}

pub fn write_store(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingStore::from_bytes(&bytes)
}
