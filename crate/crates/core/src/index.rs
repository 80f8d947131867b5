//! Per-database column embedding store with exact cosine top-k.

use crate::embedding::{embed_texts, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::hnsupcon::ProjectionHead;
use crate::scalar::{dot, Scalar};
use crate::schema::{render_column_document, ColumnRef, DatabaseSchema};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

pub const INDEX_MAGIC: &[u8; 8] = b"LSQLIDX1";

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<T> {
    pub column: ColumnRef,
    pub vector: EmbeddingVector<T>,
    pub document: String,
}

/// Immutable once built: entries follow schema column order.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemaIndex<T> {
    db_id: String,
    dim: usize,
    entries: Vec<IndexEntry<T>>,
    fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredColumn<T> {
    pub column: ColumnRef,
    pub score: T,
}

/// Hash of a projection head's weights, or `identity` when absent.
pub fn head_fingerprint<T: Scalar>(head: Option<&ProjectionHead<T>>) -> String {
    match head {
        None => "none".into(),
        Some(h) => {
            let mut hasher = Sha256::new();
            hasher.update((h.dim() as u64).to_le_bytes());
            for w in h.weight() {
                hasher.update(w.as_f64().to_le_bytes());
            }
            hex16(&hasher.finalize())
        }
    }
}

fn hex16(bytes: &[u8]) -> String {
    bytes[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Fingerprint recorded in an index built with `provider` and `head`.
pub fn index_fingerprint<T: Scalar>(
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
) -> String {
    format!("{}+head:{}", provider.fingerprint(), head_fingerprint(head))
}

/// Rounds to the nearest `f32` so that persisted indexes round-trip exactly.
fn quantize<T: Scalar>(v: EmbeddingVector<T>) -> EmbeddingVector<T> {
    EmbeddingVector::from_unit(
        v.values()
            .iter()
            .map(|x| T::of(x.as_f64() as f32 as f64))
            .collect(),
    )
}

pub fn build_index<T: Scalar>(
    schema: &DatabaseSchema,
    provider: &dyn EmbeddingProvider,
    head: Option<&ProjectionHead<T>>,
) -> Result<SchemaIndex<T>> {
    if schema.columns.is_empty() {
        return Err(Error::Validation(format!(
            "schema {} has no columns",
            schema.db_id
        )));
    }
    let docs: Vec<String> = schema.columns.iter().map(render_column_document).collect();
    let vectors = embed_texts::<T>(provider, &docs)?;
    let entries = schema
        .columns
        .iter()
        .zip(vectors)
        .zip(docs)
        .map(|((col, v), document)| {
            let v = match head {
                Some(h) => h.apply(&v)?,
                None => v,
            };
            Ok(IndexEntry {
                column: col.column_ref(),
                vector: quantize(v),
                document,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SchemaIndex {
        db_id: schema.db_id.clone(),
        dim: provider.dim(),
        entries,
        fingerprint: index_fingerprint(provider, head),
    })
}

/// Descending score, then ascending schema position.
fn rank_order<T: Scalar>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Heap entry ordered so that the *worst* ranked candidate is the maximum.
struct Worst<T>(T, usize);

impl<T: Scalar> PartialEq for Worst<T> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<T: Scalar> Eq for Worst<T> {}
impl<T: Scalar> PartialOrd for Worst<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T: Scalar> Ord for Worst<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order((self.0, self.1), (other.0, other.1))
    }
}

fn score<T: Scalar>(entry: &IndexEntry<T>, query: &EmbeddingVector<T>) -> T {
    dot(entry.vector.values(), query.values())
        .max(-T::one())
        .min(T::one())
}

fn check_query<T: Scalar>(
    entries: &[IndexEntry<T>],
    query: &EmbeddingVector<T>,
    k: usize,
) -> Result<()> {
    if k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if let Some(e) = entries.first() {
        if e.vector.dim() != query.dim() {
            return Err(Error::Contract(format!(
                "query dimension {} does not match index dimension {}",
                query.dim(),
                e.vector.dim()
            )));
        }
    }
    Ok(())
}

impl<T: Scalar> SchemaIndex<T> {
    /// Index over caller-supplied entries, kept in the given order.
    pub fn from_entries(
        db_id: impl Into<String>,
        fingerprint: impl Into<String>,
        entries: Vec<IndexEntry<T>>,
    ) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.vector.dim());
        if let Some(e) = entries.iter().find(|e| e.vector.dim() != dim) {
            return Err(Error::Contract(format!(
                "entry {} has dimension {}, expected {dim}",
                e.column,
                e.vector.dim()
            )));
        }
        let entries = entries
            .into_iter()
            .map(|e| IndexEntry {
                vector: quantize(e.vector),
                ..e
            })
            .collect();
        Ok(Self {
            db_id: db_id.into(),
            dim,
            entries,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn db_id(&self) -> &str {
        &self.db_id
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The `k` highest-cosine columns (fewer if the index is smaller), keeping
    /// a bounded heap instead of sorting every score.
    pub fn top_k(&self, query: &EmbeddingVector<T>, k: usize) -> Result<Vec<ScoredColumn<T>>> {
        check_query(&self.entries, query, k)?;
        let mut heap: BinaryHeap<Worst<T>> = BinaryHeap::with_capacity(k + 1);
        for (i, e) in self.entries.iter().enumerate() {
            let cand = Worst(score(e, query), i);
            if heap.len() < k {
                heap.push(cand);
            } else if let Some(worst) = heap.peek() {
                if cand < *worst {
                    heap.pop();
                    heap.push(cand);
                }
            }
        }
        Ok(heap
            .into_sorted_vec()
            .into_iter()
            .map(|Worst(s, i)| ScoredColumn {
                column: self.entries[i].column.clone(),
                score: s,
            })
            .collect())
    }

    pub fn persist(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut body = Vec::with_capacity(self.entries.len() * (self.dim * 4 + 64));
        for e in &self.entries {
            for v in e.vector.values() {
                body.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        for e in &self.entries {
            put_str16(&mut body, &e.column.table);
            put_str16(&mut body, &e.column.column);
            body.extend_from_slice(&(e.document.len() as u32).to_le_bytes());
            body.extend_from_slice(e.document.as_bytes());
        }
        let mut out = Vec::with_capacity(body.len() + 128);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        put_str16(&mut out, &self.fingerprint);
        put_str16(&mut out, &self.db_id);
        out.extend_from_slice(&checksum(&body).to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and compares the stored fingerprint with `expected`; the flag is
    /// `true` when the index is stale.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &str) -> Result<(Self, bool)> {
        let idx = Self::load(path.as_ref())?;
        let stale = idx.fingerprint != expected;
        if stale {
            log::warn!(
                "index {} is stale: built with {}, expected {}",
                path.as_ref().display(),
                idx.fingerprint,
                expected
            );
        }
        Ok((idx, stale))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r
            .take(8)
            .map_err(|_| Error::Format("file too short for an index header".into()))?;
        if magic != INDEX_MAGIC {
            return Err(if magic.starts_with(b"LSQLIDX") {
                Error::Format(format!(
                    "unsupported index version {:?}",
                    char::from(magic[7])
                ))
            } else {
                Error::Format("not an index file".into())
            });
        }
        let header = (|| -> std::result::Result<_, Eof> {
            let dim = r.u32()? as usize;
            let count = r.u32()? as usize;
            let fingerprint = r.str16()?;
            let db_id = r.str16()?;
            let sum = r.u64()?;
            let len = r.u64()? as usize;
            Ok((dim, count, fingerprint, db_id, sum, len))
        })()
        .map_err(|_| Error::Checksum("truncated index header".into()))?;
        let (dim, count, fingerprint, db_id, sum, len) = header;
        let body = &bytes[r.pos..];
        if body.len() != len || checksum(body) != sum {
            return Err(Error::Checksum(format!(
                "index body is {} bytes (expected {len}) or corrupted",
                body.len()
            )));
        }
        let mut b = Reader { buf: body, pos: 0 };
        let corrupt = |_| Error::Format("index body is inconsistent with its header".into());
        let mut vectors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut v = Vec::with_capacity(dim);
            for _ in 0..dim {
                v.push(T::of(f32::from_le_bytes(
                    b.take(4).map_err(corrupt)?.try_into().expect("4 bytes"),
                ) as f64));
            }
            vectors.push(EmbeddingVector::from_unit(v));
        }
        let mut entries = Vec::with_capacity(count);
        for vector in vectors {
            let table = b.str16().map_err(corrupt)?;
            let column = b.str16().map_err(corrupt)?;
            let n = b.u32().map_err(corrupt)? as usize;
            let document = String::from_utf8(b.take(n).map_err(corrupt)?.to_vec())
                .map_err(|_| Error::Format("document is not UTF-8".into()))?;
            entries.push(IndexEntry {
                column: ColumnRef::new(&db_id, table, column),
                vector,
                document,
            });
        }
        Ok(Self {
            db_id,
            dim,
            entries,
            fingerprint,
        })
    }
}

/// Exhaustive reference ranking: score everything, stable-sort, truncate.
pub fn brute_force_top_k<T: Scalar>(
    entries: &[IndexEntry<T>],
    query: &EmbeddingVector<T>,
    k: usize,
) -> Result<Vec<ScoredColumn<T>>> {
    check_query(entries, query, k)?;
    let mut scored: Vec<(T, usize)> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| (score(e, query), i))
        .collect();
    scored.sort_by(|a, b| rank_order(*a, *b));
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(s, i)| ScoredColumn {
            column: entries[i].column.clone(),
            score: s,
        })
        .collect())
}

fn checksum(body: &[u8]) -> u64 {
    let digest = Sha256::digest(body);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn put_str16(out: &mut Vec<u8>, s: &str) {
    let bytes = s.as_bytes();
    let n = bytes.len().min(u16::MAX as usize);
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&bytes[..n]);
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

#[derive(Debug)]
struct Eof;

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], Eof> {
        let end = self.pos.checked_add(n).ok_or(Eof)?;
        let s = self.buf.get(self.pos..end).ok_or(Eof)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, Eof> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> std::result::Result<u64, Eof> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn str16(&mut self) -> std::result::Result<String, Eof> {
        let n = u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")) as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Eof)
    }
}

#[cfg(test)]
pub(crate) fn index_from_vectors<T: Scalar>(
    db_id: &str,
    vectors: Vec<EmbeddingVector<T>>,
) -> SchemaIndex<T> {
    let entries = vectors
        .into_iter()
        .enumerate()
        .map(|(i, v)| IndexEntry {
            column: ColumnRef::new(db_id, "t", format!("c{i}")),
            vector: v,
            document: format!("table:t\ncolumn:c{i}"),
        })
        .collect();
    SchemaIndex::from_entries(db_id, "test", entries).expect("uniform dimension")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{normalize, HashingEmbedder};
    use crate::schema::ColumnRecord;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema(n: usize) -> DatabaseSchema {
        DatabaseSchema {
            db_id: "d".into(),
            columns: (0..n)
                .map(|i| {
                    ColumnRecord::new(
                        "d",
                        &format!("table{}", i % 3),
                        &format!("col{i} name{i}"),
                        "text",
                    )
                })
                .collect(),
            foreign_key_edges: vec![],
        }
    }

    #[test]
    fn build_is_one_entry_per_column_in_order() {
        let s = schema(7);
        let p = HashingEmbedder::new(64);
        let idx = build_index::<f64>(&s, &p, None).unwrap();
        assert_eq!(idx.len(), 7);
        for (e, c) in idx.entries().iter().zip(&s.columns) {
            assert_eq!(e.column, c.column_ref());
        }
        let again = build_index::<f64>(&s, &p, None).unwrap();
        assert_eq!(idx, again);
        let with_identity =
            build_index(&s, &p, Some(&ProjectionHead::<f64>::identity(64))).unwrap();
        for (a, b) in idx.entries().iter().zip(with_identity.entries()) {
            assert_eq!(a.vector, b.vector);
        }
        assert_ne!(idx.fingerprint(), with_identity.fingerprint());
        let mut w = ProjectionHead::<f64>::identity(64).weight().to_vec();
        for (i, x) in w.iter_mut().enumerate() {
            *x += 0.01 * (i % 7) as f64;
        }
        let head = ProjectionHead::from_weight(64, w).unwrap();
        let projected = build_index(&s, &p, Some(&head)).unwrap();
        assert!(idx
            .entries()
            .iter()
            .zip(projected.entries())
            .any(|(a, b)| a.vector != b.vector));
    }

    #[test]
    fn empty_schema_rejected() {
        let p = HashingEmbedder::new(8);
        assert!(matches!(
            build_index::<f64>(&schema(0), &p, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn hand_arithmetic_ranking() {
        let vs = vec![
            normalize(&[1.0f64, 0.0]).unwrap(),
            normalize(&[0.0, 1.0]).unwrap(),
            normalize(&[0.6, 0.8]).unwrap(),
        ];
        let idx = index_from_vectors("d", vs);
        let q = normalize(&[1.0f64, 0.0]).unwrap();
        let top = idx.top_k(&q, 2).unwrap();
        assert_eq!(top[0].column.column, "c0");
        assert_eq!(top[0].score, 1.0);
        assert_eq!(top[1].column.column, "c2");
        assert!((top[1].score - 0.6).abs() < 1e-7);
        assert_eq!(idx.top_k(&q, 25).unwrap().len(), 3);
        assert!(matches!(idx.top_k(&q, 0), Err(Error::Validation(_))));
        let bad = normalize(&[1.0f64, 0.0, 0.0]).unwrap();
        assert!(matches!(idx.top_k(&bad, 2), Err(Error::Contract(_))));
        assert!(matches!(
            brute_force_top_k(idx.entries(), &bad, 2),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ties_break_by_schema_order() {
        let v = normalize(&[1.0f64, 1.0]).unwrap();
        let idx = index_from_vectors("d", vec![v.clone(), v.clone(), v.clone()]);
        let top = idx.top_k(&v, 2).unwrap();
        assert_eq!(top[0].column.column, "c0");
        assert_eq!(top[1].column.column, "c1");
    }

    #[test]
    fn persistence_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.idx");
        let idx = build_index::<f64>(&schema(9), &HashingEmbedder::new(16), None).unwrap();
        idx.persist(&path).unwrap();
        let back = SchemaIndex::<f64>::load(&path).unwrap();
        assert_eq!(idx, back);
        let (_, stale) = SchemaIndex::<f64>::load_expecting(&path, idx.fingerprint()).unwrap();
        assert!(!stale);
        let (_, stale) = SchemaIndex::<f64>::load_expecting(&path, "other-model").unwrap();
        assert!(stale);

        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(
            SchemaIndex::<f64>::from_bytes(&bytes[..bytes.len() - 5]),
            Err(Error::Checksum(_))
        ));
        assert!(matches!(
            SchemaIndex::<f64>::from_bytes(&bytes[..20]),
            Err(Error::Checksum(_))
        ));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0xff;
        assert!(matches!(
            SchemaIndex::<f64>::from_bytes(&flipped),
            Err(Error::Checksum(_))
        ));
        let mut v2 = bytes.clone();
        v2[7] = b'2';
        assert!(matches!(
            SchemaIndex::<f64>::from_bytes(&v2),
            Err(Error::Format(_))
        ));
        assert_eq!(&bytes[..8], INDEX_MAGIC);
    }

    fn random_instance(
        seed: u64,
        n: usize,
        dim: usize,
    ) -> (SchemaIndex<f64>, EmbeddingVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng| {
            let raw: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2i32..=2) as f64).collect();
            normalize(&raw).unwrap_or_else(|_| normalize(&vec![1.0; dim]).unwrap())
        };
        let vs = (0..n).map(|_| draw(&mut rng)).collect();
        let q = draw(&mut rng);
        (index_from_vectors("d", vs), q)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn top_k_equals_brute_force(seed in any::<u64>(), n in 1usize..200, k in 1usize..40, dim in prop_oneof![Just(4usize), Just(16)]) {
            let (idx, q) = random_instance(seed, n, dim);
            let fast = idx.top_k(&q, k).unwrap();
            let slow = brute_force_top_k(idx.entries(), &q, k).unwrap();
            prop_assert_eq!(&fast, &slow);
            prop_assert_eq!(fast.len(), k.min(n));
            for w in fast.windows(2) {
                prop_assert!(w[0].score >= w[1].score);
            }
        }

        #[test]
        fn persisted_index_round_trips(seed in any::<u64>(), n in 1usize..30) {
            let (idx, _) = random_instance(seed, n, 8);
            prop_assert_eq!(SchemaIndex::<f64>::from_bytes(&idx.to_bytes()).unwrap(), idx);
        }
    }
}
