//! Interaction logs: CSV ingestion, windowing, student-level splitting and
//! batch assembly.
//!
//! The canonical CSV has the header `student_id,question_id,concept_ids,correct`
//! with `concept_ids` joined by `;`. Rows of one student are in chronological
//! order; students may interleave.

use std::collections::HashMap;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

/// Question id stored at padded (mask = 0) steps.
pub const PAD_ID: u32 = u32::MAX;

pub const CSV_COLUMNS: [&str; 4] = ["student_id", "question_id", "concept_ids", "correct"];

/// Version tag written into every persisted sequence file.
pub const SEQUENCE_FORMAT_VERSION: u32 = 1;
pub const SEQUENCE_FORMAT: &str = "dgkt.sequences";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub student_id: String,
    pub question_id: u32,
    pub concept_ids: Vec<u32>,
    pub correct: u8,
    pub position: u32,
}

/// Binary concept-by-question incidence, stored column-wise: the sorted
/// concept list of every question.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QMatrix {
    n_concepts: usize,
    columns: Vec<Vec<u32>>,
}

impl QMatrix {
    pub fn new(n_concepts: usize, mut columns: Vec<Vec<u32>>) -> Result<Self> {
        for (q, col) in columns.iter_mut().enumerate() {
            col.sort_unstable();
            col.dedup();
            if let Some(&c) = col.iter().find(|&&c| c as usize >= n_concepts) {
                return Err(Error::Shape(format!(
                    "question {q} references concept {c} but n_concepts = {n_concepts}"
                )));
            }
        }
        Ok(Self {
            n_concepts,
            columns,
        })
    }

    /// Builds from a dense `n_c x n_q` 0/1 matrix given row by row.
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self> {
        let n_c = rows.len();
        let n_q = rows.first().map_or(0, Vec::len);
        let mut columns = vec![Vec::new(); n_q];
        for (c, row) in rows.iter().enumerate() {
            if row.len() != n_q {
                return Err(Error::Shape("ragged dense q-matrix".into()));
            }
            for (q, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => columns[q].push(c as u32),
                    other => {
                        return Err(Error::Shape(format!("q-matrix entry {other} is not 0/1")))
                    }
                }
            }
        }
        Self::new(n_c, columns)
    }

    pub fn n_concepts(&self) -> usize {
        self.n_concepts
    }

    pub fn n_questions(&self) -> usize {
        self.columns.len()
    }

    pub fn concepts(&self, q: usize) -> &[u32] {
        &self.columns[q]
    }

    pub fn get(&self, concept: usize, question: usize) -> bool {
        self.columns[question].binary_search(&(concept as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let mut rows = vec![vec![0u8; self.columns.len()]; self.n_concepts];
        for (q, col) in self.columns.iter().enumerate() {
            for &c in col {
                rows[c as usize][q] = 1;
            }
        }
        rows
    }

    /// Whether two questions share at least one concept.
    pub fn share_concept(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.columns[a], &self.columns[b]);
        let (mut i, mut j) = (0, 0);
        while i < x.len() && j < y.len() {
            match x[i].cmp(&y[j]) {
                std::cmp::Ordering::Equal => return true,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: u32,
    pub n_questions: usize,
    pub n_concepts: usize,
    pub q_matrix: QMatrix,
}

impl DomainSpec {
    pub fn new(domain_id: u32, q_matrix: QMatrix) -> Self {
        Self {
            domain_id,
            n_questions: q_matrix.n_questions(),
            n_concepts: q_matrix.n_concepts(),
            q_matrix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_matrix.n_questions() != self.n_questions
            || self.q_matrix.n_concepts() != self.n_concepts
        {
            return Err(Error::Shape(format!(
                "domain {} declares {}x{} but q-matrix is {}x{}",
                self.domain_id,
                self.n_concepts,
                self.n_questions,
                self.q_matrix.n_concepts(),
                self.q_matrix.n_questions()
            )));
        }
        if let Some(q) = (0..self.n_questions).find(|&q| self.q_matrix.concepts(q).is_empty()) {
            return Err(Error::Shape(format!(
                "question {q} of domain {} has no concept",
                self.domain_id
            )));
        }
        Ok(())
    }
}

/// One fixed-length window of a student's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub student_id: String,
    pub domain_id: u32,
    pub questions: Vec<u32>,
    pub responses: Vec<u8>,
    pub mask: Vec<u8>,
}

impl InteractionSequence {
    pub fn window_length(&self) -> usize {
        self.questions.len()
    }

    /// Number of real (unpadded) steps.
    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m == 1).count()
    }

    /// Checks the structural invariants: equal lengths, prefix-of-ones mask,
    /// padding ids at masked steps.
    pub fn check(&self) -> Result<()> {
        let t = self.questions.len();
        if self.responses.len() != t || self.mask.len() != t {
            return Err(Error::Shape("sequence vectors differ in length".into()));
        }
        let n = self.valid_len();
        if self.mask[n..].iter().any(|&m| m != 0) {
            return Err(Error::Shape("mask is not a prefix of ones".into()));
        }
        if self.questions[n..].iter().any(|&q| q != PAD_ID)
            || self.responses[n..].iter().any(|&r| r != 0)
        {
            return Err(Error::Shape("padded steps must hold the padding id".into()));
        }
        if self.responses[..n].iter().any(|&r| r > 1) {
            return Err(Error::Shape("response outside {0,1}".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
    pub split_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct SequenceFile {
    format: String,
    format_version: u32,
    split: String,
    split_seed: u64,
    sequences: Vec<InteractionSequence>,
}

impl DatasetSplit {
    /// Writes `train.json` and `test.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (name, seqs) in [("train", &self.train), ("test", &self.test)] {
            let file = SequenceFile {
                format: SEQUENCE_FORMAT.into(),
                format_version: SEQUENCE_FORMAT_VERSION,
                split: name.into(),
                split_seed: self.split_seed,
                sequences: seqs.clone(),
            };
            fs::write(dir.join(format!("{name}.json")), serde_json::to_vec(&file)?)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let read = |name: &str| -> Result<SequenceFile> {
            let file: SequenceFile =
                serde_json::from_slice(&fs::read(dir.join(format!("{name}.json")))?)?;
            if file.format != SEQUENCE_FORMAT {
                return Err(Error::InvalidArgument(format!(
                    "{name}.json is not a sequence file (format `{}`)",
                    file.format
                )));
            }
            if file.format_version != SEQUENCE_FORMAT_VERSION {
                return Err(Error::FormatVersion {
                    what: format!("{name}.json"),
                    found: file.format_version,
                    expected: SEQUENCE_FORMAT_VERSION,
                });
            }
            Ok(file)
        };
        let train = read("train")?;
        let test = read("test")?;
        Ok(Self {
            train: train.sequences,
            test: test.sequences,
            split_seed: train.split_seed,
        })
    }
}

struct Vocab {
    ids: HashMap<String, u32>,
}

impl Vocab {
    fn new() -> Self {
        Self {
            ids: HashMap::new(),
        }
    }

    fn id(&mut self, token: &str) -> u32 {
        let next = self.ids.len() as u32;
        *self.ids.entry(token.to_owned()).or_insert(next)
    }

    fn len(&self) -> usize {
        self.ids.len()
    }
}

/// Parses a canonical CSV file. Question and concept tokens are compacted to
/// dense 0-based ids in order of first appearance. Questions observed without
/// any concept share one extra "orphan" concept appended to the vocabulary.
pub fn ingest_csv(path: &Path, domain_id: u32) -> Result<(DomainSpec, Vec<Interaction>)> {
    let file = fs::File::open(path)?;
    ingest_reader(file, domain_id)
}

pub fn ingest_reader<R: Read>(reader: R, domain_id: u32) -> Result<(DomainSpec, Vec<Interaction>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::Empty("no header row".into()));
    }
    for h in headers.iter() {
        if !CSV_COLUMNS.contains(&h) {
            return Err(Error::UnknownColumn(h.to_owned()));
        }
    }
    let mut col = [0usize; 4];
    for (slot, name) in col.iter_mut().zip(CSV_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_owned()))?;
    }

    let mut questions = Vocab::new();
    let mut concepts = Vocab::new();
    let mut q_concepts: Vec<Vec<u32>> = Vec::new();
    let mut orphan_questions: Vec<u32> = Vec::new();
    // (student, question, concepts-or-empty, correct)
    let mut rows: Vec<(String, u32, Vec<u32>, u8)> = Vec::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        let student = record[col[0]].to_owned();
        if student.is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty student_id".into(),
            });
        }
        let q_tok = &record[col[1]];
        if q_tok.is_empty() {
            return Err(Error::MalformedRow {
                line,
                message: "empty question_id".into(),
            });
        }
        let correct = match &record[col[3]] {
            "0" => 0u8,
            "1" => 1u8,
            other => {
                return Err(Error::InvalidResponse {
                    line,
                    value: other.to_owned(),
                })
            }
        };
        let q = questions.id(q_tok);
        if q as usize == q_concepts.len() {
            q_concepts.push(Vec::new());
        }
        let mut cs = Vec::new();
        for tok in record[col[2]].split(';').map(str::trim) {
            if tok.is_empty() {
                continue;
            }
            cs.push(concepts.id(tok));
        }
        cs.sort_unstable();
        cs.dedup();
        q_concepts[q as usize].extend_from_slice(&cs);
        rows.push((student, q, cs, correct));
    }
    if rows.is_empty() {
        return Err(Error::Empty("no interaction rows".into()));
    }

    let mut n_concepts = concepts.len();
    for (q, cs) in q_concepts.iter_mut().enumerate() {
        cs.sort_unstable();
        cs.dedup();
        if cs.is_empty() {
            orphan_questions.push(q as u32);
        }
    }
    if !orphan_questions.is_empty() {
        let orphan = n_concepts as u32;
        n_concepts += 1;
        for &q in &orphan_questions {
            q_concepts[q as usize].push(orphan);
        }
    }

    // group per student in order of first appearance, file order within
    let mut order: Vec<String> = Vec::new();
    let mut per_student: HashMap<String, Vec<Interaction>> = HashMap::new();
    for (student, q, cs, correct) in rows {
        let entry = per_student.entry(student.clone()).or_insert_with(|| {
            order.push(student.clone());
            Vec::new()
        });
        let concept_ids = if cs.is_empty() {
            q_concepts[q as usize].clone()
        } else {
            cs
        };
        entry.push(Interaction {
            student_id: student,
            question_id: q,
            concept_ids,
            correct,
            position: entry.len() as u32,
        });
    }
    let interactions = order
        .iter()
        .flat_map(|s| per_student.remove(s).unwrap())
        .collect();

    let q_matrix = QMatrix::new(n_concepts, q_concepts)?;
    let spec = DomainSpec::new(domain_id, q_matrix);
    spec.validate()?;
    Ok((spec, interactions))
}

/// Writes interactions in the canonical CSV layout, ids as decimal tokens.
pub fn write_csv<W: std::io::Write>(writer: W, interactions: &[Interaction]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_COLUMNS)?;
    for it in interactions {
        let concepts = it
            .concept_ids
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(";");
        wtr.write_record([
            it.student_id.as_str(),
            &it.question_id.to_string(),
            &concepts,
            &it.correct.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Groups interactions per student (first-appearance order), drops students
/// with fewer than `min_total` interactions and cuts the rest into
/// consecutive windows. The last partial window is right-padded.
pub fn window_and_filter(
    interactions: &[Interaction],
    domain_id: u32,
    window_length: usize,
    min_total: usize,
) -> Result<Vec<InteractionSequence>> {
    if window_length < 2 {
        return Err(Error::InvalidArgument(format!(
            "window_length must be at least 2, got {window_length}"
        )));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for it in interactions {
        groups
            .entry(it.student_id.as_str())
            .or_insert_with(|| {
                order.push(it.student_id.as_str());
                Vec::new()
            })
            .push(it);
    }
    let mut out = Vec::new();
    for student in order {
        let history = &groups[student];
        if history.len() < min_total {
            continue;
        }
        for chunk in history.chunks(window_length) {
            let mut questions = vec![PAD_ID; window_length];
            let mut responses = vec![0u8; window_length];
            let mut mask = vec![0u8; window_length];
            for (t, it) in chunk.iter().enumerate() {
                questions[t] = it.question_id;
                responses[t] = it.correct;
                mask[t] = 1;
            }
            out.push(InteractionSequence {
                student_id: student.to_owned(),
                domain_id,
                questions,
                responses,
                mask,
            });
        }
    }
    Ok(out)
}

/// Student-disjoint split. `round(ratio * n_students)` students (at least one
/// on each side) go to train; the assignment is a seeded shuffle.
pub fn split_by_student(
    sequences: &[InteractionSequence],
    ratio: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside [0,1]")));
    }
    let mut students: Vec<&str> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for s in sequences {
        if seen.insert(s.student_id.as_str()) {
            students.push(s.student_id.as_str());
        }
    }
    if students.len() < 2 {
        return Err(Error::CannotSplit(format!(
            "need at least 2 distinct students, found {}",
            students.len()
        )));
    }
    let n = students.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let mut rng = seeded(seed, stream::SPLIT);
    students.shuffle(&mut rng);
    let train_set: std::collections::HashSet<&str> = students[..n_train].iter().copied().collect();
    let (train, test): (Vec<_>, Vec<_>) = sequences
        .iter()
        .cloned()
        .partition(|s| train_set.contains(s.student_id.as_str()));
    Ok(DatasetSplit {
        train,
        test,
        split_seed: seed,
    })
}

/// A group of sequences processed together.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sequences: Vec<InteractionSequence>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Deterministic batch source over a split's training sequences.
///
/// Unlimited mode reshuffles every epoch and keeps the remainder batch.
/// Limited mode (`limit_batches = k`) fixes one seeded selection of exactly
/// `k * batch_size` sequences, drops any remainder, and yields the same
/// batches every epoch.
#[derive(Clone, Debug)]
pub struct Batcher {
    sequences: Arc<Vec<InteractionSequence>>,
    batch_size: usize,
    seed: u64,
    fixed: Option<Vec<Vec<usize>>>,
}

pub fn make_batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
    limit_batches: Option<usize>,
) -> Result<Batcher> {
    Batcher::new(split.train.clone(), batch_size, seed, limit_batches)
}

impl Batcher {
    pub fn new(
        sequences: Vec<InteractionSequence>,
        batch_size: usize,
        seed: u64,
        limit_batches: Option<usize>,
    ) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if sequences.is_empty() {
            return Err(Error::Empty("no sequences to batch".into()));
        }
        let mut batcher = Self {
            sequences: Arc::new(sequences),
            batch_size,
            seed,
            fixed: None,
        };
        if let Some(k) = limit_batches {
            if k == 0 {
                return Err(Error::InvalidArgument("limit_batches must be at least 1".into()));
            }
            let order = batcher.shuffled(0);
            let full = (order.len() / batch_size).min(k);
            if full == 0 {
                return Err(Error::Empty(format!(
                    "{} sequences cannot fill one batch of {batch_size}",
                    order.len()
                )));
            }
            batcher.fixed = Some(
                order[..full * batch_size]
                    .chunks(batch_size)
                    .map(<[usize]>::to_vec)
                    .collect(),
            );
        }
        Ok(batcher)
    }

    fn shuffled(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.sequences.len()).collect();
        let mut rng = seeded(self.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream::BATCHES);
        idx.shuffle(&mut rng);
        idx
    }

    pub fn sequences(&self) -> &[InteractionSequence] {
        &self.sequences
    }

    pub fn is_limited(&self) -> bool {
        self.fixed.is_some()
    }

    /// Batch index lists for one epoch.
    pub fn epoch_indices(&self, epoch: u64) -> Vec<Vec<usize>> {
        match &self.fixed {
            Some(fixed) => fixed.clone(),
            None => self
                .shuffled(epoch)
                .chunks(self.batch_size)
                .map(<[usize]>::to_vec)
                .collect(),
        }
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
        self.epoch_indices(epoch).into_iter().map(move |idx| Batch {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
        })
    }

    /// Endless stream of batches: epoch 0's batches, then epoch 1's, ...
    pub fn cycle(&self) -> BatchCycle {
        BatchCycle {
            batcher: self.clone(),
            epoch: 0,
            pending: Vec::new(),
        }
    }
}

pub struct BatchCycle {
    batcher: Batcher,
    epoch: u64,
    pending: Vec<Vec<usize>>,
}

impl Iterator for BatchCycle {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pending.is_empty() {
            self.pending = self.batcher.epoch_indices(self.epoch);
            self.pending.reverse();
            self.epoch += 1;
        }
        let idx = self.pending.pop()?;
        Some(Batch {
            sequences: idx
                .iter()
                .map(|&i| self.batcher.sequences[i].clone())
                .collect(),
        })
    }
}
