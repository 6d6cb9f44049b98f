//! Question representations: concept means, prototype means, and the
//! prototype-anchored target representation.
//!
//! The graph builders ([`mean_rows`], [`anchor_to_prototypes`]) are what the
//! model uses; the single-question functions evaluate the same builders on a
//! throwaway graph.

use std::sync::Arc;

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, RowMix, Var};
use crate::data::{DomainSpec, QMatrix, PAD_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptTable {
    pub embeddings: Mat,
    pub domain_id: u32,
    pub trainable: bool,
}

/// Pooled prototypes with the cluster label of every source concept.
/// Concepts are indexed in concatenation order: all concepts of the first
/// source domain, then the second, and so on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub embeddings: Mat,
    pub labels: Vec<usize>,
    /// `(domain_id, first concept index, concept count)` per source domain.
    pub domains: Vec<(u32, usize, usize)>,
}

impl PrototypeTable {
    pub fn k(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn n_concepts(&self) -> usize {
        self.labels.len()
    }

    /// Binary `k x n_e` assignment matrix.
    pub fn assignment(&self) -> Vec<Vec<u8>> {
        let mut a = vec![vec![0u8; self.labels.len()]; self.k()];
        for (j, &c) in self.labels.iter().enumerate() {
            a[c][j] = 1;
        }
        a
    }

    /// Columns of the assignment matrix belonging to one source domain.
    pub fn domain_assignment(&self, domain_id: u32) -> Result<Vec<Vec<u8>>> {
        let &(_, start, len) = self
            .domains
            .iter()
            .find(|(d, _, _)| *d == domain_id)
            .ok_or_else(|| Error::InvalidArgument(format!("domain {domain_id} not clustered")))?;
        Ok(self
            .assignment()
            .into_iter()
            .map(|row| row[start..start + len].to_vec())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConceptTable {
    pub embeddings: Mat,
    /// Prototype that seeded each row.
    pub init_choices: Vec<usize>,
    pub lambda: f64,
}

/// Row recipes averaging the table rows listed by `columns` for each
/// question. Padding ids yield an empty (zero) row.
pub fn mean_recipes(questions: &[u32], columns: &QMatrix) -> Result<RowMix> {
    questions
        .iter()
        .map(|&q| {
            if q == PAD_ID {
                return Ok(Vec::new());
            }
            let q = q as usize;
            if q >= columns.n_questions() {
                return Err(Error::InvalidArgument(format!(
                    "question {q} outside vocabulary of {}",
                    columns.n_questions()
                )));
            }
            let cs = columns.concepts(q);
            if cs.is_empty() {
                return Err(Error::Shape(format!("question {q} has an all-zero column")));
            }
            let w = 1.0 / cs.len() as f64;
            Ok(cs.iter().map(|&c| (c as usize, w)).collect())
        })
        .collect()
}

/// Mean embedding of each question's concepts (or prototypes), one row per
/// entry of `questions`.
pub fn mean_rows(g: &mut Graph, table: Var, questions: &[u32], columns: &QMatrix) -> Result<Var> {
    let recipes = mean_recipes(questions, columns)?;
    if columns.n_concepts() != g.value(table).nrows() {
        return Err(Error::Shape(format!(
            "table has {} rows but the incidence matrix has {} concepts",
            g.value(table).nrows(),
            columns.n_concepts()
        )));
    }
    Ok(g.mix_rows(table, Arc::new(recipes)))
}

/// Index of the prototype closest to `e` in Euclidean distance; ties go to
/// the lowest index.
pub fn nearest_prototype(e: ArrayView1<f64>, prototypes: &Mat) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, p) in prototypes.outer_iter().enumerate() {
        let d: f64 = p.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// `(1 - lambda) * nearest_prototype + lambda * e_q` for every row of `e_q`
/// flagged in `active`; inactive rows are zero. The nearest prototype is
/// chosen on the current values and carries no gradient itself.
pub fn anchor_to_prototypes(
    g: &mut Graph,
    e_q: Var,
    prototypes: Var,
    lambda: f64,
    active: &[bool],
) -> Var {
    let protos = g.value(prototypes);
    let eq = g.value(e_q);
    let recipes: RowMix = eq
        .outer_iter()
        .zip(active)
        .map(|(row, &on)| {
            if on {
                vec![(nearest_prototype(row, protos), 1.0 - lambda)]
            } else {
                Vec::new()
            }
        })
        .collect();
    let anchored = g.mix_rows(prototypes, Arc::new(recipes));
    let own = g.scale(e_q, lambda);
    g.add(anchored, own)
}

fn single_row(g: &Graph, v: Var) -> Array1<f64> {
    g.value(v).row(0).to_owned()
}

/// Mean of the embeddings of the question's concepts.
pub fn question_embedding(q: usize, domain: &DomainSpec, table: &ConceptTable) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let t = g.constant(table.embeddings.clone());
    let v = mean_rows(&mut g, t, &[q as u32], &domain.q_matrix)?;
    Ok(single_row(&g, v))
}

/// `(e_q, 0)` when correct, `(0, e_q)` otherwise.
pub fn question_response_embedding(e_q: ArrayView1<f64>, r: u8) -> Result<Array1<f64>> {
    let d = e_q.len();
    let mut out = Array1::zeros(2 * d);
    match r {
        1 => out.slice_mut(ndarray::s![..d]).assign(&e_q),
        0 => out.slice_mut(ndarray::s![d..]).assign(&e_q),
        other => {
            return Err(Error::InvalidArgument(format!(
                "response {other} is not 0 or 1"
            )))
        }
    }
    Ok(out)
}

/// `binarize(A_s · Q_s)`: question q is linked to prototype i when any of its
/// concepts is assigned to i. `assignment` is the `k x n_c` block of the
/// assignment matrix belonging to this domain.
pub fn proto_q_matrix(assignment: &[Vec<u8>], q_matrix: &QMatrix) -> Result<QMatrix> {
    let k = assignment.len();
    let n_c = q_matrix.n_concepts();
    if assignment.iter().any(|row| row.len() != n_c) {
        return Err(Error::Shape(format!(
            "assignment block must be {k} x {n_c}"
        )));
    }
    let mut label_sets: Vec<Vec<u32>> = vec![Vec::new(); n_c];
    for (i, row) in assignment.iter().enumerate() {
        for (c, &a) in row.iter().enumerate() {
            if a != 0 {
                label_sets[c].push(i as u32);
            }
        }
    }
    let columns = (0..q_matrix.n_questions())
        .map(|q| {
            let mut protos: Vec<u32> = q_matrix
                .concepts(q)
                .iter()
                .flat_map(|&c| label_sets[c as usize].iter().copied())
                .collect();
            protos.sort_unstable();
            protos.dedup();
            protos
        })
        .collect();
    QMatrix::new(k, columns)
}

/// Mean of the prototypes linked to question `q` by `proto_q`.
pub fn prototype_question_embedding(
    q: usize,
    proto_q: &QMatrix,
    protos: &PrototypeTable,
) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let t = g.constant(protos.embeddings.clone());
    let v = mean_rows(&mut g, t, &[q as u32], proto_q)?;
    Ok(single_row(&g, v))
}

/// Target question representation: concept mean over the target table,
/// pulled toward its nearest prototype by `1 - lambda`.
pub fn target_question_embedding(
    q: usize,
    domain: &DomainSpec,
    target: &TargetConceptTable,
    protos: &PrototypeTable,
) -> Result<Array1<f64>> {
    let mut g = Graph::new();
    let t = g.constant(target.embeddings.clone());
    let p = g.constant(protos.embeddings.clone());
    let e_q = mean_rows(&mut g, t, &[q as u32], &domain.q_matrix)?;
    let v = anchor_to_prototypes(&mut g, e_q, p, target.lambda, &[true]);
    Ok(single_row(&g, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn domain(rows: &[Vec<u8>]) -> DomainSpec {
        DomainSpec::new(0, QMatrix::from_dense(rows).unwrap())
    }

    #[test]
    fn singleton_and_pair_means() {
        let dom = domain(&[vec![1, 1], vec![0, 1], vec![0, 0]]);
        let table = ConceptTable {
            embeddings: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [5.0, 5.0, 5.0]],
            domain_id: 0,
            trainable: true,
        };
        assert_eq!(question_embedding(0, &dom, &table).unwrap(), array![1.0, 0.0, 0.0]);
        assert_eq!(question_embedding(1, &dom, &table).unwrap(), array![0.5, 0.5, 0.0]);
    }

    #[test]
    fn all_zero_column_is_an_error() {
        let q = QMatrix::new(2, vec![vec![0], vec![]]).unwrap();
        let dom = DomainSpec::new(0, q);
        let table = ConceptTable {
            embeddings: Mat::zeros((2, 2)),
            domain_id: 0,
            trainable: false,
        };
        assert!(question_embedding(1, &dom, &table).is_err());
    }

    #[test]
    fn response_embedding_layout() {
        let v = array![1.0, -2.0];
        assert_eq!(
            question_response_embedding(v.view(), 1).unwrap(),
            array![1.0, -2.0, 0.0, 0.0]
        );
        assert_eq!(
            question_response_embedding(v.view(), 0).unwrap(),
            array![0.0, 0.0, 1.0, -2.0]
        );
        assert!(question_response_embedding(v.view(), 2).is_err());
    }

    #[test]
    fn proto_q_examples() {
        // identity assignment reproduces Q
        let q = QMatrix::from_dense(&[vec![1, 0, 1], vec![0, 1, 1]]).unwrap();
        let ident = vec![vec![1, 0], vec![0, 1]];
        assert_eq!(proto_q_matrix(&ident, &q).unwrap(), q);
        // both concepts of question 2 in cluster 0: product gives 2, output 1
        let merged = vec![vec![1, 1], vec![0, 0]];
        let pq = proto_q_matrix(&merged, &q).unwrap();
        assert_eq!(pq.to_dense(), vec![vec![1, 1, 1], vec![0, 0, 0]]);
        assert!(proto_q_matrix(&[vec![1, 0, 0]], &q).is_err());
    }

    #[test]
    fn collapsed_concepts_are_not_double_counted() {
        let q = QMatrix::from_dense(&[vec![1], vec![1]]).unwrap();
        let protos = PrototypeTable {
            embeddings: array![[2.0, 0.0], [0.0, 4.0]],
            labels: vec![1, 1],
            domains: vec![(0, 0, 2)],
        };
        let pq = proto_q_matrix(&protos.domain_assignment(0).unwrap(), &q).unwrap();
        assert_eq!(
            prototype_question_embedding(0, &pq, &protos).unwrap(),
            array![0.0, 4.0]
        );
    }

    #[test]
    fn lambda_endpoints_and_tie_rule() {
        let dom = domain(&[vec![1]]);
        let protos = PrototypeTable {
            embeddings: array![[1.0, 0.0], [-1.0, 0.0]],
            labels: vec![0],
            domains: vec![],
        };
        // e_q = (0, 1) is equidistant from both prototypes
        let mut target = TargetConceptTable {
            embeddings: array![[0.0, 1.0]],
            init_choices: vec![0],
            lambda: 0.7,
        };
        let out = target_question_embedding(0, &dom, &target, &protos).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15 && (out[1] - 0.7).abs() < 1e-15);
        target.lambda = 1.0;
        assert_eq!(
            target_question_embedding(0, &dom, &target, &protos).unwrap(),
            array![0.0, 1.0]
        );
        target.lambda = 0.0;
        assert_eq!(
            target_question_embedding(0, &dom, &target, &protos).unwrap(),
            array![1.0, 0.0]
        );
    }
}
