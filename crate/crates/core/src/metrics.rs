//! Raw per-layer metrics over adjacent residual-stream boundaries: cosine
//! dissimilarity plus one of two transformation-magnitude measures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::tensor::{dot, flatten_tokens, TokenMatrix};

/// Rows whose L2 norm falls below this are treated as zero vectors.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    /// Mean over tokens of the squared L2 norm of the update.
    Mssd,
    /// Mean over all elements of the absolute update.
    Masd,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Mssd => "mssd",
            MetricKind::Masd => "masd",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mssd" => Ok(MetricKind::Mssd),
            "masd" => Ok(MetricKind::Masd),
            other => Err(Error::Value(format!(
                "unknown metric {other:?} (expected mssd or masd)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawLayerMetrics {
    pub layer_index: usize,
    /// Cosine dissimilarity in `[0, 2]`.
    pub l_sim: f64,
    /// Transformation magnitude, `>= 0`.
    pub l_diff: f64,
    pub metric_kind: MetricKind,
    pub degenerate_token_count: usize,
}

fn check_pair(h_in: &TokenMatrix, h_out: &TokenMatrix) -> Result<()> {
    if !h_in.same_shape(h_out) {
        return Err(Error::Shape(format!(
            "hidden states differ in shape: {}x{} vs {}x{}",
            h_in.rows(),
            h_in.cols(),
            h_out.rows(),
            h_out.cols()
        )));
    }
    if h_in.rows() == 0 {
        return Err(Error::EmptyInput("no tokens".into()));
    }
    Ok(())
}

/// `1 - mean_j cos(in_j, out_j)`, together with the number of tokens where
/// either vector is (numerically) zero. Those tokens contribute `cos = 0`.
pub fn cosine_dissimilarity(h_in: &TokenMatrix, h_out: &TokenMatrix) -> Result<(f64, usize)> {
    check_pair(h_in, h_out)?;
    let mut cos_sum = 0.0f64;
    let mut degenerate = 0usize;
    for j in 0..h_in.rows() {
        let (a, b) = (h_in.row(j), h_out.row(j));
        let sa = dot(a, a);
        let sb = dot(b, b);
        if sa.sqrt() < DEGENERATE_NORM || sb.sqrt() < DEGENERATE_NORM {
            degenerate += 1;
            continue;
        }
        // sqrt(sa * sb) keeps cos(x, x) == 1 exactly.
        let cos = dot(a, b) / (sa * sb).sqrt();
        cos_sum += cos.clamp(-1.0, 1.0);
    }
    let l_sim = 1.0 - cos_sum / h_in.rows() as f64;
    Ok((l_sim.clamp(0.0, 2.0), degenerate))
}

pub fn mssd(h_in: &TokenMatrix, h_out: &TokenMatrix) -> Result<f64> {
    check_pair(h_in, h_out)?;
    let total: f64 = h_in
        .data()
        .iter()
        .zip(h_out.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(total / h_in.rows() as f64)
}

pub fn masd(h_in: &TokenMatrix, h_out: &TokenMatrix) -> Result<f64> {
    check_pair(h_in, h_out)?;
    if h_in.cols() == 0 {
        return Err(Error::EmptyInput("zero hidden width".into()));
    }
    let total: f64 = h_in
        .data()
        .iter()
        .zip(h_out.data())
        .map(|(a, b)| (b - a).abs())
        .sum();
    Ok(total / (h_in.rows() * h_in.cols()) as f64)
}

pub fn difference(kind: MetricKind, h_in: &TokenMatrix, h_out: &TokenMatrix) -> Result<f64> {
    match kind {
        MetricKind::Mssd => mssd(h_in, h_out),
        MetricKind::Masd => masd(h_in, h_out),
    }
}

/// Metrics for layer `i`, computed from boundaries `i` and `i + 1`.
pub fn layer_raw_metrics(
    boundaries: &BoundarySet,
    i: usize,
    kind: MetricKind,
) -> Result<RawLayerMetrics> {
    let layers = boundaries.layer_count();
    if i >= layers {
        return Err(Error::LayerIndex { index: i, layers });
    }
    let h_in = flatten_tokens(&boundaries.boundaries()[i])?;
    let h_out = flatten_tokens(&boundaries.boundaries()[i + 1])?;
    let (l_sim, degenerate_token_count) = cosine_dissimilarity(&h_in, &h_out)?;
    let l_diff = difference(kind, &h_in, &h_out)?;
    Ok(RawLayerMetrics {
        layer_index: i,
        l_sim,
        l_diff,
        metric_kind: kind,
        degenerate_token_count,
    })
}

/// Metrics for every layer, in layer order.
pub fn all_layer_metrics(boundaries: &BoundarySet, kind: MetricKind) -> Result<Vec<RawLayerMetrics>> {
    (0..boundaries.layer_count())
        .map(|i| layer_raw_metrics(boundaries, i, kind))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorF;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> TokenMatrix {
        TokenMatrix::new(rows, cols, data).unwrap()
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TokenMatrix {
        mat(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    fn scaled(m: &TokenMatrix, c: f64) -> TokenMatrix {
        mat(m.rows(), m.cols(), m.data().iter().map(|v| v * c).collect())
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn cosine_identical_antiparallel_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_mat(5, 6, &mut rng);
        assert_eq!(cosine_dissimilarity(&a, &a).unwrap(), (0.0, 0));
        assert_eq!(cosine_dissimilarity(&a, &scaled(&a, -1.0)).unwrap(), (2.0, 0));
        let x = mat(2, 2, vec![1.0, 0.0, 0.0, 3.0]);
        let y = mat(2, 2, vec![0.0, 2.0, -1.0, 0.0]);
        assert_eq!(cosine_dissimilarity(&x, &y).unwrap(), (1.0, 0));
    }

    #[test]
    fn cosine_matches_per_token_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_mat(16, 8, &mut rng);
        let b = random_mat(16, 8, &mut rng);
        let mut sum = 0.0;
        for j in 0..16 {
            let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..8 {
                d += a.row(j)[k] * b.row(j)[k];
                na += a.row(j)[k] * a.row(j)[k];
                nb += b.row(j)[k] * b.row(j)[k];
            }
            sum += d / (na.sqrt() * nb.sqrt());
        }
        let expected = 1.0 - sum / 16.0;
        let (got, deg) = cosine_dissimilarity(&a, &b).unwrap();
        assert_eq!(deg, 0);
        assert!((got - expected).abs() <= 1e-12);
    }

    #[test]
    fn cosine_counts_degenerate_rows() {
        let a = mat(3, 2, vec![0.0, 0.0, 1.0, 1.0, 1e-13, 0.0]);
        let b = mat(3, 2, vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let (l_sim, deg) = cosine_dissimilarity(&a, &b).unwrap();
        assert_eq!(deg, 2);
        // rows 0 and 2 contribute cos = 0, row 1 contributes 1
        assert!((l_sim - (1.0 - 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn shape_and_empty_errors() {
        let a = mat(1, 2, vec![1.0, 2.0]);
        let b = mat(2, 1, vec![1.0, 2.0]);
        assert!(matches!(cosine_dissimilarity(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(mssd(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(masd(&a, &b), Err(Error::Shape(_))));
        let e = mat(0, 3, vec![]);
        assert!(matches!(cosine_dissimilarity(&e, &e), Err(Error::EmptyInput(_))));
        let w = mat(2, 0, vec![]);
        assert!(matches!(masd(&w, &w), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn mssd_examples() {
        let a = mat(1, 2, vec![1.0, 1.0]);
        assert_eq!(mssd(&a, &a).unwrap(), 0.0);
        let b = mat(1, 2, vec![4.0, 5.0]);
        assert_eq!(mssd(&a, &b).unwrap(), 25.0);
    }

    #[test]
    fn masd_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for rows in [1, 3, 10] {
            let a = random_mat(rows, 4, &mut rng);
            let b = mat(rows, 4, a.data().iter().map(|v| v + 1.0).collect());
            assert!((masd(&a, &b).unwrap() - 1.0).abs() < 1e-15);
            assert_eq!(masd(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn difference_metrics_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_mat(32, 16, &mut rng);
        let b = random_mat(32, 16, &mut rng);
        let (mut sq, mut ab) = (0.0, 0.0);
        for j in 0..32 {
            for d in 0..16 {
                let delta = b.row(j)[d] - a.row(j)[d];
                sq += delta * delta;
                ab += delta.abs();
            }
        }
        assert!(rel(mssd(&a, &b).unwrap(), sq / 32.0) <= 1e-10);
        assert!(rel(masd(&a, &b).unwrap(), ab / (32.0 * 16.0)) <= 1e-10);
    }

    fn boundary_set(tensors: Vec<Vec<f64>>, dims: [usize; 3]) -> BoundarySet {
        let ts = tensors
            .into_iter()
            .map(|d| TensorF::new(dims.to_vec(), d).unwrap())
            .collect();
        BoundarySet::new(ts, "test", "test").unwrap()
    }

    #[test]
    fn identity_and_scaling_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(0.5..1.5)).collect();
        let doubled: Vec<f64> = base.iter().map(|v| v * 2.0).collect();
        let set = boundary_set(vec![base.clone(), base, doubled], [2, 3, 4]);
        for kind in [MetricKind::Mssd, MetricKind::Masd] {
            let id = layer_raw_metrics(&set, 0, kind).unwrap();
            assert_eq!((id.l_sim, id.l_diff), (0.0, 0.0));
            let sc = layer_raw_metrics(&set, 1, kind).unwrap();
            assert_eq!(sc.l_sim, 0.0);
            assert!(sc.l_diff > 0.0);
        }
        assert!(matches!(
            layer_raw_metrics(&set, 2, MetricKind::Mssd),
            Err(Error::LayerIndex { index: 2, layers: 2 })
        ));
    }

    #[test]
    fn layer_metrics_compose_the_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tensors: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..2 * 5 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let set = boundary_set(tensors.clone(), [2, 5, 3]);
        for i in 0..3 {
            let a = mat(10, 3, tensors[i].clone());
            let b = mat(10, 3, tensors[i + 1].clone());
            let m = layer_raw_metrics(&set, i, MetricKind::Masd).unwrap();
            assert_eq!(m.l_sim, cosine_dissimilarity(&a, &b).unwrap().0);
            assert_eq!(m.l_diff, masd(&a, &b).unwrap());
            let m = layer_raw_metrics(&set, i, MetricKind::Mssd).unwrap();
            assert_eq!(m.l_diff, mssd(&a, &b).unwrap());
        }
    }

    #[test]
    fn metric_kind_parses() {
        assert_eq!("MSSD".parse::<MetricKind>().unwrap(), MetricKind::Mssd);
        assert_eq!("masd".parse::<MetricKind>().unwrap(), MetricKind::Masd);
        assert!("l1".parse::<MetricKind>().is_err());
    }

    proptest! {
        #[test]
        fn scale_covariance(seed in any::<u64>(), c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(6, 5, &mut rng);
            let b = random_mat(6, 5, &mut rng);
            let (ca, cb) = (scaled(&a, c), scaled(&b, c));
            let base = cosine_dissimilarity(&a, &b).unwrap().0;
            prop_assert!((cosine_dissimilarity(&ca, &cb).unwrap().0 - base).abs() <= 1e-12);
            prop_assert!(rel(mssd(&ca, &cb).unwrap(), c * c * mssd(&a, &b).unwrap()) <= 1e-10);
            prop_assert!(rel(masd(&ca, &cb).unwrap(), c * masd(&a, &b).unwrap()) <= 1e-10);
        }

        #[test]
        fn symmetric_arguments(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(4, 7, &mut rng);
            let b = random_mat(4, 7, &mut rng);
            prop_assert_eq!(mssd(&a, &b).unwrap(), mssd(&b, &a).unwrap());
            prop_assert_eq!(masd(&a, &b).unwrap(), masd(&b, &a).unwrap());
            let (x, _) = cosine_dissimilarity(&a, &b).unwrap();
            let (y, _) = cosine_dissimilarity(&b, &a).unwrap();
            prop_assert_eq!(x, y);
        }

        #[test]
        fn l_sim_in_range(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mat(8, 3, &mut rng);
            let b = random_mat(8, 3, &mut rng);
            let (s, _) = cosine_dissimilarity(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&s));
        }
    }
}
