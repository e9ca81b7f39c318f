//! Deviation scores and Gaussian-CDF instance weights.
//!
//! `ρ(i) = v_i·f_i − (1/R) Σ_r c^V_{r,s1(i)} · c^F_{r,s2(i)}` compares how well an
//! instance's two modalities agree with how well their assigned prototypes
//! agree. Low `ρ` marks a likely deviate positive. The weight is
//! `w_i = Φ((ρ_i − (μ + δσ)) / (σ√κ))`, the CDF of `N(μ + δσ, κσ²)`, with
//! `μ, σ` the population mean and standard deviation of `ρ`.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::clustering::PrototypeSet;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecalibrationParams {
    /// Shift of the CDF centre, in units of σ.
    pub delta: f64,
    /// Variance scale of the CDF, in units of σ².
    pub kappa: f64,
}

impl Default for RecalibrationParams {
    fn default() -> Self {
        Self {
            delta: -1.0,
            kappa: 0.1,
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Deviation score of one instance; `s1`/`s2` are its voice/face
/// assignments in each of the `R` paired clusterings.
pub fn deviation(
    v: &[f64],
    f: &[f64],
    voice_protos: &PrototypeSet,
    face_protos: &PrototypeSet,
    instance: usize,
) -> Result<f64> {
    let r = voice_protos.num_clusterings();
    if r == 0 || face_protos.num_clusterings() != r {
        return Err(Error::State(format!(
            "deviation needs paired clusterings, have {} voice and {} face",
            r,
            face_protos.num_clusterings()
        )));
    }
    let mut proto_sim = 0.0;
    for (cv, cf) in voice_protos.clusterings().iter().zip(face_protos.clusterings()) {
        let (s1, s2) = match (cv.assignments.get(instance), cf.assignments.get(instance)) {
            (Some(&a), Some(&b)) => (a, b),
            _ => {
                return Err(Error::State(format!(
                    "instance {instance} has no prototype assignment"
                )))
            }
        };
        proto_sim += dot(cv.centroids.row(s1), cf.centroids.row(s2));
    }
    Ok(dot(v, f) - proto_sim / r as f64)
}

/// `Φ((ρ − (μ + δσ)) / (σ√κ))`, floored at the smallest positive double.
/// A non-positive σ disables weighting and returns 1.
pub fn recalibration_weight(rho: f64, mu: f64, sigma: f64, params: RecalibrationParams) -> f64 {
    if !(sigma > 0.0) || !(params.kappa > 0.0) {
        return 1.0;
    }
    let z = (rho - (mu + params.delta * sigma)) / (sigma * params.kappa.sqrt());
    normal_cdf(z).max(f64::MIN_POSITIVE)
}

/// `Σ w_i L_i / Σ w_i`.
pub fn weighted_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} losses, {} weights",
            losses.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!("weight sum {total} is not positive")));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / total)
}

/// Per-instance gradient coefficients `w_i / Σ w`.
pub fn loss_coefficients(weights: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric(format!("weight sum {total} is not positive")));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Deviation scores and weights of the whole training set, frozen for an epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct RecalibrationState {
    pub params: RecalibrationParams,
    pub mu: f64,
    pub sigma: f64,
    pub rho: Vec<f64>,
    pub weights: Vec<f64>,
}

impl RecalibrationState {
    /// Score every instance from memory snapshots and the current prototypes.
    pub fn compute(
        voice_memory: &Matrix,
        face_memory: &Matrix,
        voice_protos: &PrototypeSet,
        face_protos: &PrototypeSet,
        params: RecalibrationParams,
    ) -> Result<Self> {
        if voice_memory.shape() != face_memory.shape() {
            return Err(Error::Shape("voice and face memories differ in shape".into()));
        }
        let rho = (0..voice_memory.rows())
            .map(|i| deviation(voice_memory.row(i), face_memory.row(i), voice_protos, face_protos, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_rho(rho, params))
    }

    pub fn from_rho(rho: Vec<f64>, params: RecalibrationParams) -> Self {
        let n = rho.len() as f64;
        let mu = rho.iter().sum::<f64>() / n;
        let sigma = (rho.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / n).sqrt();
        let weights = rho
            .iter()
            .map(|&r| recalibration_weight(r, mu, sigma, params))
            .collect();
        Self {
            params,
            mu,
            sigma,
            rho,
            weights,
        }
    }

    pub fn mean_weight(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        c.put_f64(
            format!("{prefix}.stats"),
            vec![self.params.delta, self.params.kappa, self.mu, self.sigma],
        );
        c.put_f64(format!("{prefix}.rho"), self.rho.clone());
        c.put_f64(format!("{prefix}.weights"), self.weights.clone());
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let s = c.f64s(&format!("{prefix}.stats"))?;
        let [delta, kappa, mu, sigma] = s[..] else {
            return Err(Error::Load(format!("{prefix}.stats: expected 4 values")));
        };
        Ok(Self {
            params: RecalibrationParams { delta, kappa },
            mu,
            sigma,
            rho: c.f64s(&format!("{prefix}.rho"))?.to_vec(),
            weights: c.f64s(&format!("{prefix}.weights"))?.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::Clustering;
    use proptest::prelude::*;

    fn protos(centroids: &[[f64; 2]], assignments: Vec<usize>) -> Clustering {
        Clustering {
            centroids: Matrix::from_rows(centroids).unwrap(),
            assignments,
            inertia: 0.0,
        }
    }

    #[test]
    fn deviation_arithmetic() {
        // v·f = 0.9; prototype similarities 0.8 and 0.6 → ρ = 0.2
        let v = [1.0, 0.0];
        let f = [0.9, (1.0f64 - 0.81).sqrt()];
        let a = [1.0, 0.0];
        let pv = PrototypeSet::new(vec![protos(&[a], vec![0]), protos(&[a], vec![0])]);
        let pf = PrototypeSet::new(vec![
            protos(&[[0.8, 0.6]], vec![0]),
            protos(&[[0.6, 0.8]], vec![0]),
        ]);
        let rho = deviation(&v, &f, &pv, &pf, 0).unwrap();
        assert!((rho - 0.2).abs() < 1e-12);
    }

    #[test]
    fn deviation_zero_when_everything_coincides() {
        let x = [0.6, 0.8];
        let p = PrototypeSet::new(vec![protos(&[x], vec![0]); 3]);
        assert!(deviation(&x, &x, &p, &p, 0).unwrap().abs() < 1e-15);
        assert!(matches!(
            deviation(&x, &x, &PrototypeSet::default(), &p, 0),
            Err(Error::State(_))
        ));
        assert!(matches!(deviation(&x, &x, &p, &p, 4), Err(Error::State(_))));
    }

    #[test]
    fn weight_at_centre_and_saturation() {
        let p = RecalibrationParams::default();
        let (mu, sigma) = (0.3, 0.2);
        let w = recalibration_weight(mu + p.delta * sigma, mu, sigma, p);
        assert!((w - 0.5).abs() < 1e-9);
        let hi = recalibration_weight(mu + 10.0 * sigma, mu, sigma, p);
        assert!(hi > 1.0 - 1e-9);
        assert_eq!(recalibration_weight(-5.0, mu, 0.0, p), 1.0);
        assert!(recalibration_weight(-1e6, mu, sigma, p) > 0.0);
    }

    #[test]
    fn weight_at_known_cdf_point() {
        let w = recalibration_weight(0.0, 0.0, 1.0, RecalibrationParams::default());
        // Φ(1/√0.1) = Φ(3.16227766)
        assert!((w - 0.999217).abs() < 1e-5, "{w}");
    }

    #[test]
    fn weighted_loss_cases() {
        let l = [1.0, 2.0, 4.0];
        assert!((weighted_loss(&l, &[0.3; 3]).unwrap() - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(weighted_loss(&l, &[0.0, 1.0, 0.0]).unwrap(), 2.0);
        assert!(matches!(weighted_loss(&l, &[0.0; 3]), Err(Error::Numeric(_))));
        assert!(weighted_loss(&l, &[1.0]).is_err());
    }

    #[test]
    fn state_round_trip() {
        let s = RecalibrationState::from_rho(vec![0.1, -0.2, 0.4, 0.0], RecalibrationParams::default());
        let mut c = Container::new("r");
        s.write_to(&mut c, "recal");
        assert_eq!(RecalibrationState::read_from(&c, "recal").unwrap(), s);
    }

    proptest! {
        #[test]
        fn weight_is_monotone_in_rho(
            a in -3.0f64..3.0, b in -3.0f64..3.0,
            mu in -1.0f64..1.0, sigma in 0.01f64..2.0,
            delta in -2.0f64..1.0, kappa in 0.01f64..2.0,
        ) {
            let p = RecalibrationParams { delta, kappa };
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(recalibration_weight(lo, mu, sigma, p) <= recalibration_weight(hi, mu, sigma, p));
        }

        #[test]
        fn weights_are_standardization_invariant(
            rho in proptest::collection::vec(-1.0f64..1.0, 3..20),
            shift in -5.0f64..5.0, scale in 0.1f64..10.0,
        ) {
            let p = RecalibrationParams::default();
            let base = RecalibrationState::from_rho(rho.clone(), p);
            let moved = RecalibrationState::from_rho(rho.iter().map(|r| scale * r + shift).collect(), p);
            for (x, y) in base.weights.iter().zip(&moved.weights) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
