//! Dense embedding math on the unit sphere.
//!
//! Visual and text embeddings live in a shared `D`-dimensional space. A
//! classifier head scores an embedding against each class weight with a
//! temperature-scaled dot product and turns the scores into probabilities
//! with a softmax. The zero-shot head is built from averaged text
//! embeddings alone.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Norms at or below this value cannot be normalized.
pub const NORM_EPS: f64 = 1e-12;

/// Temperature used when neither a manifest nor the config provides one.
pub const DEFAULT_TEMPERATURE: f64 = 0.01;

/// Tolerance on unit norm for rows stored in tables and prototype sets.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// Returns `v / ‖v‖`.
pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = v.dot(&v).sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite("vector"));
    }
    if norm <= NORM_EPS {
        return Err(Error::NormTooSmall(norm));
    }
    Ok(v.mapv(|x| x / norm))
}

/// Normalizes every row of `m`, failing on the first degenerate row.
pub fn l2_normalize_rows(m: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = m.to_owned();
    for mut row in out.rows_mut() {
        let normalized = l2_normalize(row.view())?;
        row.assign(&normalized);
    }
    Ok(out)
}

fn check_unit_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidTable(format!(
                "{what} row {i} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

/// L2-normalized visual embeddings with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    vectors: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl EmbeddingTable {
    /// Builds a table, validating unit norms and label range.
    pub fn new(vectors: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if vectors.ncols() == 0 {
            return Err(Error::InvalidTable("embedding dimension must be positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidTable("at least one class is required".into()));
        }
        if vectors.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: vectors.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        check_unit_rows(vectors.view(), "embedding")?;
        Ok(Self {
            vectors,
            labels,
            num_classes,
        })
    }

    /// Normalizes the rows first, then validates as [`EmbeddingTable::new`].
    pub fn from_unnormalized(
        vectors: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let vectors = l2_normalize_rows(vectors.view())?;
        Self::new(vectors, labels, num_classes)
    }

    pub fn empty(dim: usize, num_classes: usize) -> Result<Self> {
        Self::new(Array2::zeros((0, dim)), Vec::new(), num_classes)
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn vectors(&self) -> ArrayView2<'_, f64> {
        self.vectors.view()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.vectors.row(i)
    }

    /// Number of rows carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row indices grouped by label, each group in ascending order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups
    }

    /// A new table holding the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> EmbeddingTable {
        EmbeddingTable {
            vectors: self.vectors.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Per-class text embeddings, their averaged prototypes and the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct TextPrototypeSet {
    per_class: Vec<Array2<f64>>,
    prototypes: Array2<f64>,
    temperature: f64,
}

impl TextPrototypeSet {
    /// `per_class[c]` is a `J_c × D` matrix of unit-norm text embeddings.
    ///
    /// Prototypes are the per-class means, re-normalized when `renormalize`
    /// is set.
    pub fn new(per_class: Vec<Array2<f64>>, temperature: f64, renormalize: bool) -> Result<Self> {
        if per_class.is_empty() {
            return Err(Error::InvalidTable("at least one class is required".into()));
        }
        check_temperature(temperature)?;
        let dim = per_class[0].ncols();
        if dim == 0 {
            return Err(Error::InvalidTable("embedding dimension must be positive".into()));
        }
        let mut prototypes = Array2::zeros((per_class.len(), dim));
        for (c, texts) in per_class.iter().enumerate() {
            if texts.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: texts.ncols(),
                });
            }
            if texts.nrows() == 0 {
                return Err(Error::EmptyClassTexts(c));
            }
            check_unit_rows(texts.view(), "text")?;
            let mean = texts.sum_axis(Axis(0)) / texts.nrows() as f64;
            let proto = if renormalize {
                l2_normalize(mean.view())?
            } else {
                mean
            };
            prototypes.row_mut(c).assign(&proto);
        }
        Ok(Self {
            per_class,
            prototypes,
            temperature,
        })
    }

    /// One text embedding per class (`J = 1`); rows must already be unit norm.
    pub fn from_prototypes(prototypes: Array2<f64>, temperature: f64) -> Result<Self> {
        let per_class = prototypes
            .rows()
            .into_iter()
            .map(|r| r.insert_axis(Axis(0)).to_owned())
            .collect();
        Self::new(per_class, temperature, true)
    }

    pub fn prototypes(&self) -> ArrayView2<'_, f64> {
        self.prototypes.view()
    }

    pub fn per_class_texts(&self) -> &[Array2<f64>] {
        &self.per_class
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        self.temperature = temperature;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.prototypes.ncols()
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Class weight matrix `W` (one row per class) and temperature.
///
/// Rows are not required to be unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    weights: Array2<f64>,
    temperature: f64,
}

impl ClassifierHead {
    pub fn new(weights: Array2<f64>, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        if weights.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("classifier weights"));
        }
        Ok(Self {
            weights,
            temperature,
        })
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn into_weights(self) -> Array2<f64> {
        self.weights
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn num_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits for a batch of embeddings, `N × C`.
    pub fn logits(&self, vectors: ArrayView2<f64>) -> Result<Array2<f64>> {
        if vectors.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: vectors.ncols(),
            });
        }
        Ok(vectors.dot(&self.weights.t()) / self.temperature)
    }
}

/// `v⊤w_c / τ` for every class.
pub fn cosine_logits(v: ArrayView1<f64>, head: &ClassifierHead) -> Result<Array1<f64>> {
    if v.len() != head.dim() {
        return Err(Error::DimensionMismatch {
            expected: head.dim(),
            got: v.len(),
        });
    }
    Ok(head.weights.dot(&v) / head.temperature)
}

/// Max-subtracted softmax.
pub fn softmax(logits: ArrayView1<f64>) -> Result<Array1<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.to_owned();
    softmax_in_place(out.view_mut());
    Ok(out)
}

pub(crate) fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    row.mapv_inplace(|x| (x - max).exp());
    let sum = row.sum();
    row.mapv_inplace(|x| x / sum);
}

/// Row-wise softmax of an `N × C` logit matrix.
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.clone();
    for row in out.rows_mut() {
        softmax_in_place(row);
    }
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Zero-shot head: the text prototypes themselves.
pub fn build_zeroshot_head(texts: &TextPrototypeSet) -> Result<ClassifierHead> {
    ClassifierHead::new(texts.prototypes.clone(), texts.temperature)
}

/// Probabilities and hard labels for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_logits(logits: &Array2<f64>) -> Result<Self> {
        let labels = logits.rows().into_iter().map(argmax).collect();
        let probabilities = softmax_rows(logits)?;
        Ok(Self {
            probabilities,
            labels,
        })
    }
}

pub fn predict(table: &EmbeddingTable, head: &ClassifierHead) -> Result<Prediction> {
    let logits = head.logits(table.vectors())?;
    Prediction::from_logits(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_abs_diff_eq!(v, array![0.6, 0.8], epsilon = 1e-15);
        assert_eq!(l2_normalize(array![1.0, 0.0].view()).unwrap(), array![1.0, 0.0]);
        assert!(matches!(
            l2_normalize(array![0.0, 0.0].view()),
            Err(Error::NormTooSmall(_))
        ));
    }

    fn head(rows: Array2<f64>, tau: f64) -> ClassifierHead {
        ClassifierHead::new(rows, tau).unwrap()
    }

    #[test]
    fn cosine_logit_examples() {
        let h = head(array![[1.0, 0.0], [0.0, 1.0]], 1.0);
        assert_eq!(cosine_logits(array![1.0, 0.0].view(), &h).unwrap(), array![1.0, 0.0]);

        let h = head(array![[1.0, 0.0]], 0.01);
        let l = cosine_logits(array![1.0, 0.0].view(), &h).unwrap();
        assert_abs_diff_eq!(l[0], 100.0, epsilon = 1e-12);

        let h = head(array![[0.8, 0.6]], 1.0);
        let l = cosine_logits(array![0.6, 0.8].view(), &h).unwrap();
        assert_abs_diff_eq!(l[0], 0.96, epsilon = 1e-15);

        assert!(matches!(
            cosine_logits(array![1.0, 0.0, 0.0].view(), &h),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(array![0.0, 0.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(p, Array::from_elem(3, 1.0 / 3.0), epsilon = 1e-15);

        let p = softmax(array![1000.0, 0.0].view()).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-12);

        let p = softmax(array![2f64.ln(), 0.0].view()).unwrap();
        assert_abs_diff_eq!(p, array![2.0 / 3.0, 1.0 / 3.0], epsilon = 1e-15);

        assert!(softmax(array![f64::NAN, 0.0].view()).is_err());
    }

    #[test]
    fn zeroshot_head_examples() {
        let t = array![[0.6, 0.8], [1.0, 0.0]];
        let texts = TextPrototypeSet::from_prototypes(t.clone(), 0.01).unwrap();
        let h = build_zeroshot_head(&texts).unwrap();
        assert_abs_diff_eq!(h.weights().to_owned(), t, epsilon = 1e-15);
        assert_eq!(h.temperature(), 0.01);

        let texts =
            TextPrototypeSet::new(vec![array![[1.0, 0.0], [0.0, 1.0]]], 1.0, true).unwrap();
        let h = build_zeroshot_head(&texts).unwrap();
        let s = 0.5f64.sqrt();
        assert_abs_diff_eq!(h.weights().row(0).to_owned(), array![s, s], epsilon = 1e-15);

        let err = TextPrototypeSet::new(vec![array![[1.0, 0.0], [-1.0, 0.0]]], 1.0, true);
        assert!(matches!(err, Err(Error::NormTooSmall(_))));

        let err = TextPrototypeSet::new(vec![Array2::zeros((0, 2))], 1.0, true);
        assert!(matches!(err, Err(Error::EmptyClassTexts(0))));
    }

    #[test]
    fn prototypes_without_renormalization_keep_the_raw_mean() {
        let texts =
            TextPrototypeSet::new(vec![array![[1.0, 0.0], [0.0, 1.0]]], 1.0, false).unwrap();
        assert_eq!(texts.prototypes().row(0).to_owned(), array![0.5, 0.5]);
    }

    #[test]
    fn predict_examples() {
        let h = head(array![[1.0, 0.0], [0.0, 1.0]], 0.01);
        let table =
            EmbeddingTable::new(array![[0.0, 1.0], [1.0, 0.0]], vec![1, 0], 2).unwrap();
        let p = predict(&table, &h).unwrap();
        assert_eq!(p.labels, vec![1, 0]);

        let empty = EmbeddingTable::empty(2, 2).unwrap();
        let p = predict(&empty, &h).unwrap();
        assert!(p.labels.is_empty());
        assert_eq!(p.probabilities.dim(), (0, 2));

        let tie = head(array![[1.0, 0.0], [1.0, 0.0]], 1.0);
        let table = EmbeddingTable::new(array![[1.0, 0.0]], vec![1], 2).unwrap();
        assert_eq!(predict(&table, &tie).unwrap().labels, vec![0]);
    }

    #[test]
    fn table_validation() {
        assert!(EmbeddingTable::new(array![[1.0, 1.0]], vec![0], 1).is_err());
        assert!(matches!(
            EmbeddingTable::new(array![[1.0, 0.0]], vec![3], 2),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        let t = EmbeddingTable::from_unnormalized(array![[3.0, 4.0]], vec![0], 1).unwrap();
        assert_abs_diff_eq!(t.row(0).to_owned(), array![0.6, 0.8], epsilon = 1e-15);
    }

    #[test]
    fn zeroshot_prediction_is_bit_stable() {
        let texts = TextPrototypeSet::from_prototypes(
            array![[0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.8, 0.0, 0.6]],
            0.01,
        )
        .unwrap();
        let table = EmbeddingTable::from_unnormalized(
            array![[1.0, 0.2, 0.1], [0.1, 1.0, 0.3], [0.3, 0.1, 1.0]],
            vec![0, 1, 2],
            3,
        )
        .unwrap();
        let h = build_zeroshot_head(&texts).unwrap();
        let a = predict(&table, &h).unwrap();
        let b = predict(&table, &build_zeroshot_head(&texts).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let p = softmax(Array1::from(z).view()).unwrap();
            prop_assert!((p.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }

        #[test]
        fn softmax_is_shift_invariant(
            z in prop::collection::vec(-50.0f64..50.0, 1..12),
            a in -100.0f64..100.0,
        ) {
            let z = Array1::from(z);
            let p = softmax(z.view()).unwrap();
            let q = softmax((&z + a).view()).unwrap();
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn argmax_ignores_positive_head_scaling(
            w in prop::collection::vec(-1.0f64..1.0, 12),
            v in prop::collection::vec(-1.0f64..1.0, 3),
            s in 0.01f64..100.0,
        ) {
            let w = Array2::from_shape_vec((4, 3), w).unwrap();
            let v = Array1::from(v);
            prop_assume!(v.dot(&v) > 1e-6);
            let v = l2_normalize(v.view()).unwrap();
            let a = cosine_logits(v.view(), &head(w.clone(), 0.01)).unwrap();
            let b = cosine_logits(v.view(), &head(w * s, 0.01)).unwrap();
            // Exclude near-ties where rounding alone can flip the winner.
            let mut sorted = a.to_vec();
            sorted.sort_by(|x, y| y.total_cmp(x));
            prop_assume!(sorted[0] - sorted[1] > 1e-9);
            prop_assert_eq!(argmax(a.view()), argmax(b.view()));
        }
    }
}
