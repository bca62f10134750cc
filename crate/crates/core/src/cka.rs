//! Linear centered kernel alignment between two sets of activations.
//!
//! Both inputs are features×samples matrices over the same samples. Scores
//! lie in `[0, 1]`; 1 means the representations agree up to an orthogonal
//! transform and an isotropic scale.

use crate::error::{Error, Result};
use crate::tensor::{center_columns, matmul, Tensor};

/// Relative floor under which a self-HSIC counts as zero variance.
const DEGENERATE_RATIO: f64 = 1e-24;

/// Activations of one fragment, features×samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMatrix {
    values: Tensor,
    pub fragment_id: String,
}

impl ActivationMatrix {
    pub fn new(values: Tensor, fragment_id: impl Into<String>) -> Result<Self> {
        let (_, n) = values.as_matrix_dims()?;
        if n < 2 {
            return Err(Error::dim(format!(
                "activation matrices need at least 2 samples, got {n}"
            )));
        }
        Ok(Self {
            values,
            fragment_id: fragment_id.into(),
        })
    }

    /// From samples-first activations of any rank; every non-sample axis is
    /// flattened into the feature axis.
    pub fn from_batch(batch: &Tensor, fragment_id: impl Into<String>) -> Result<Self> {
        Self::new(batch.samples_to_columns(), fragment_id)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn features(&self) -> usize {
        self.values.rows()
    }

    pub fn samples(&self) -> usize {
        self.values.cols()
    }

    /// Samples-space Gram matrix `XᵀX` (n×n).
    pub fn gram(&self) -> Result<Tensor> {
        matmul(&self.values.transpose()?, &self.values)
    }

    /// Splits the sample axis into consecutive batches of `size`; the last
    /// batch takes the remainder.
    pub fn batches(&self, size: usize) -> Result<Vec<Self>> {
        let n = self.samples();
        if size < 2 {
            return Err(Error::Config("minibatches need at least 2 samples".into()));
        }
        let cols = self.values.transpose()?;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + size).min(n);
            out.push(Self::new(
                cols.sample_range(start, end)?.transpose()?,
                self.fragment_id.clone(),
            )?);
            start = end;
        }
        Ok(out)
    }
}

/// `tr(K H M H) / (n−1)²` for two n×n Gram matrices.
pub fn hsic(k_gram: &Tensor, m_gram: &Tensor) -> Result<f64> {
    let n = check_gram(k_gram, "K")?;
    let n2 = check_gram(m_gram, "M")?;
    if n != n2 {
        return Err(Error::dim(format!("Gram sizes differ: {n} vs {n2}")));
    }
    if n < 2 {
        return Err(Error::dim("HSIC needs at least 2 samples"));
    }
    let kc = double_center(k_gram, n);
    let mc = double_center(m_gram, n);
    // tr(HKH · HMH) with both factors symmetric reduces to a Frobenius product.
    let tr: f64 = kc.iter().zip(&mc).map(|(a, b)| a * b).sum();
    let d = (n - 1) as f64;
    Ok(tr / (d * d))
}

fn check_gram(g: &Tensor, name: &str) -> Result<usize> {
    let (r, c) = g.as_matrix_dims()?;
    if r != c {
        return Err(Error::dim(format!("Gram matrix {name} is {r}×{c}, not square")));
    }
    let scale = g.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    for i in 0..r {
        for j in i + 1..r {
            if (g.at2(i, j) - g.at2(j, i)).abs() > 1e-9 * scale {
                return Err(Error::dim(format!(
                    "Gram matrix {name} is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(r)
}

/// `H G H`: subtract row and column means, add back the grand mean.
fn double_center(g: &Tensor, n: usize) -> Vec<f64> {
    let d = g.data();
    let nf = n as f64;
    let row_mean: Vec<f64> = d.chunks(n).map(|r| r.iter().sum::<f64>() / nf).collect();
    let col_mean: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| d[i * n + j]).sum::<f64>() / nf)
        .collect();
    let grand = row_mean.iter().sum::<f64>() / nf;
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(d[i * n + j] - row_mean[i] - col_mean[j] + grand);
        }
    }
    out
}

/// The three HSIC terms CKA is assembled from: (K,M), (K,K), (M,M).
#[derive(Clone, Copy, Debug, PartialEq)]
struct HsicTerms {
    cross: f64,
    xx: f64,
    yy: f64,
}

fn hsic_terms(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<HsicTerms> {
    if x.samples() != y.samples() {
        return Err(Error::dim(format!(
            "CKA needs equal sample counts, got {} and {}",
            x.samples(),
            y.samples()
        )));
    }
    let xc = center_columns(x.values())?;
    let yc = center_columns(y.values())?;
    let k = matmul(&xc.transpose()?, &xc)?;
    let m = matmul(&yc.transpose()?, &yc)?;
    Ok(HsicTerms {
        cross: hsic(&k, &m)?,
        xx: hsic(&k, &k)?,
        yy: hsic(&m, &m)?,
    })
}

fn combine(t: HsicTerms, x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    for (v, side) in [(t.xx, x), (t.yy, y)] {
        let scale = side.values().data().iter().map(|a| a * a).sum::<f64>();
        let n1 = (side.samples() - 1) as f64;
        if v <= DEGENERATE_RATIO * (scale / n1) * (scale / n1) || v <= 0.0 {
            return Err(Error::Degenerate(format!(
                "activations of '{}' do not vary across samples",
                side.fragment_id
            )));
        }
    }
    Ok(t.cross / (t.xx * t.yy).sqrt())
}

/// Linear CKA: `HSIC(K, M) / sqrt(HSIC(K, K) · HSIC(M, M))` with `K = XᵀX`
/// and `M = YᵀY`.
///
/// Fails with [`Error::Degenerate`] when either input is constant across
/// samples.
pub fn cka_linear(x: &ActivationMatrix, y: &ActivationMatrix) -> Result<f64> {
    cka_minibatch(std::slice::from_ref(x), std::slice::from_ref(y))
}

/// Minibatch CKA: each HSIC term is averaged over the batches before the
/// ratio is formed.
pub fn cka_minibatch(x_batches: &[ActivationMatrix], y_batches: &[ActivationMatrix]) -> Result<f64> {
    if x_batches.is_empty() || x_batches.len() != y_batches.len() {
        return Err(Error::dim(format!(
            "mismatched minibatch partitions: {} vs {} batches",
            x_batches.len(),
            y_batches.len()
        )));
    }
    let mut sum = HsicTerms {
        cross: 0.0,
        xx: 0.0,
        yy: 0.0,
    };
    for (xb, yb) in x_batches.iter().zip(y_batches) {
        let t = hsic_terms(xb, yb)?;
        sum.cross += t.cross;
        sum.xx += t.xx;
        sum.yy += t.yy;
    }
    let b = x_batches.len() as f64;
    let mean = HsicTerms {
        cross: sum.cross / b,
        xx: sum.xx / b,
        yy: sum.yy / b,
    };
    combine(mean, &x_batches[0], &y_batches[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, p: usize, n: usize) -> ActivationMatrix {
        let t = Tensor::new(
            vec![p, n],
            (0..p * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        ActivationMatrix::new(t, "r").unwrap()
    }

    /// Centered trace by explicit double loops over H, K, M.
    fn hsic_double_loop(k: &Tensor, m: &Tensor) -> f64 {
        let n = k.rows();
        let h = |i: usize, j: usize| (i == j) as u8 as f64 - 1.0 / n as f64;
        let mut kh = vec![0.0; n * n];
        let mut mh = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    kh[i * n + j] += k.at2(i, l) * h(l, j);
                    mh[i * n + j] += m.at2(i, l) * h(l, j);
                }
            }
        }
        let mut tr = 0.0;
        for i in 0..n {
            for j in 0..n {
                tr += kh[i * n + j] * mh[j * n + i];
            }
        }
        tr / ((n - 1) as f64).powi(2)
    }

    #[test]
    fn hsic_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = random(&mut rng, 6, 16);
        let y = random(&mut rng, 4, 16);
        let (k, m) = (x.gram().unwrap(), y.gram().unwrap());
        let got = hsic(&k, &m).unwrap();
        let want = hsic_double_loop(&k, &m);
        assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
    }

    #[test]
    fn hsic_of_constant_vector_is_zero() {
        let c = Tensor::new(vec![3, 5], vec![2.0; 15]).unwrap();
        let g = ActivationMatrix::new(c, "c").unwrap().gram().unwrap();
        assert!(hsic(&g, &g).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn hsic_self_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..10 {
            let g = random(&mut rng, 3, 9).gram().unwrap();
            assert!(hsic(&g, &g).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn hsic_rejects_bad_grams() {
        let a = Tensor::zeros(&[3, 3]);
        let b = Tensor::zeros(&[4, 4]);
        assert!(hsic(&a, &b).is_err());
        let asym = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(hsic(&asym, &asym).is_err());
        assert!(hsic(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn cka_self_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random(&mut rng, 8, 32);
        assert!((cka_linear(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        let y = random(&mut rng, 5, 32);
        let c = cka_linear(&x, &y).unwrap();
        assert!(c > 0.0 && c < 1.0);
        assert!((c - cka_linear(&y, &x).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn cka_constant_input_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x = random(&mut rng, 4, 10);
        let c = ActivationMatrix::new(Tensor::new(vec![2, 10], vec![0.3; 20]).unwrap(), "dead").unwrap();
        match cka_linear(&x, &c) {
            Err(Error::Degenerate(m)) => assert!(m.contains("dead")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cka_sample_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        assert!(matches!(
            cka_linear(&random(&mut rng, 2, 5), &random(&mut rng, 2, 6)),
            Err(Error::Dimension(_))
        ));
        assert!(ActivationMatrix::new(Tensor::zeros(&[3, 1]), "x").is_err());
    }

    #[test]
    fn minibatch_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let x = random(&mut rng, 4, 512);
        let noise = random(&mut rng, 3, 512);
        let b = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let mixed = matmul(&b, x.values()).unwrap();
        let y = Tensor::new(
            vec![3, 512],
            mixed.data().iter().zip(noise.values().data()).map(|(m, e)| m + 0.5 * e).collect(),
        )
        .unwrap();
        let y = ActivationMatrix::new(y, "y").unwrap();
        let one = cka_minibatch(std::slice::from_ref(&x), std::slice::from_ref(&y)).unwrap();
        assert_eq!(one.to_bits(), cka_linear(&x, &y).unwrap().to_bits());

        let xb = x.batches(128).unwrap();
        let yb = y.batches(128).unwrap();
        assert_eq!(xb.len(), 4);
        assert!((cka_minibatch(&xb, &xb).unwrap() - 1.0).abs() <= 1e-9);
        let approx = cka_minibatch(&xb, &yb).unwrap();
        assert!((approx - cka_linear(&x, &y).unwrap()).abs() <= 0.05);

        assert!(cka_minibatch(&xb, &yb[..3]).is_err());
    }
}
