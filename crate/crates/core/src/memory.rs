//! Momentum-averaged instance feature memories, one row per training instance
//! and modality: `Mem ← normalize(m · Mem + (1 − m) · e)`.
//!
//! The first write for an instance copies the embedding in directly.

use crate::container::Container;
use crate::error::{Error, Result};
use crate::nn::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    voice: Matrix,
    face: Matrix,
    initialized: Vec<bool>,
    momentum: f64,
}

impl MemoryBank {
    pub fn new(num_instances: usize, dim: usize, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Argument(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Self {
            voice: Matrix::zeros(num_instances, dim),
            face: Matrix::zeros(num_instances, dim),
            initialized: vec![false; num_instances],
            momentum,
        })
    }

    pub fn len(&self) -> usize {
        self.initialized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initialized.is_empty()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn uninitialized(&self) -> usize {
        self.initialized.iter().filter(|&&b| !b).count()
    }

    pub fn voice_row(&self, i: usize) -> &[f64] {
        self.voice.row(i)
    }

    pub fn face_row(&self, i: usize) -> &[f64] {
        self.face.row(i)
    }

    /// Fold a batch of embeddings into the memories of `ids`.
    pub fn update(&mut self, ids: &[usize], v: &Matrix, f: &Matrix) -> Result<()> {
        if v.rows() != ids.len() || f.rows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} voice and {} face rows",
                ids.len(),
                v.rows(),
                f.rows()
            )));
        }
        if v.cols() != self.voice.cols() || f.cols() != self.face.cols() {
            return Err(Error::Shape("embedding width differs from memory width".into()));
        }
        let mut seen = vec![false; self.len()];
        for &id in ids {
            if id >= self.len() {
                return Err(Error::Argument(format!("instance {id} outside bank of {}", self.len())));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(Error::Argument(format!("instance {id} appears twice in one batch")));
            }
        }
        let m = self.momentum;
        for (row, &id) in ids.iter().enumerate() {
            let first = !self.initialized[id];
            for (bank, emb) in [(&mut self.voice, v), (&mut self.face, f)] {
                let mem = bank.row_mut(id);
                if first {
                    mem.copy_from_slice(emb.row(row));
                } else {
                    mem.iter_mut()
                        .zip(emb.row(row))
                        .for_each(|(a, &b)| *a = m * *a + (1.0 - m) * b);
                }
                let n = crate::nn::matrix::guarded_norm(mem);
                mem.iter_mut().for_each(|a| *a /= n);
            }
            self.initialized[id] = true;
        }
        Ok(())
    }

    /// Copies of both memory matrices. Fails while any instance is unseen.
    pub fn snapshot(&self) -> Result<(Matrix, Matrix)> {
        let missing = self.uninitialized();
        if missing > 0 {
            return Err(Error::State(format!(
                "{missing} instances have no memory yet"
            )));
        }
        Ok((self.voice.clone(), self.face.clone()))
    }

    pub fn write_to(&self, c: &mut Container, prefix: &str) {
        c.put_f64(format!("{prefix}.momentum"), vec![self.momentum]);
        c.put_matrix(format!("{prefix}.voice"), &self.voice);
        c.put_matrix(format!("{prefix}.face"), &self.face);
        c.put_u64(
            format!("{prefix}.initialized"),
            self.initialized.iter().map(|&b| b as u64).collect(),
        );
    }

    pub fn read_from(c: &Container, prefix: &str) -> Result<Self> {
        let voice = c.matrix(&format!("{prefix}.voice"))?;
        let face = c.matrix(&format!("{prefix}.face"))?;
        let initialized: Vec<bool> = c
            .u64s(&format!("{prefix}.initialized"))?
            .iter()
            .map(|&b| b != 0)
            .collect();
        if voice.shape() != face.shape() || voice.rows() != initialized.len() {
            return Err(Error::Load(format!("{prefix}: inconsistent memory shapes")));
        }
        Ok(Self {
            voice,
            face,
            initialized,
            momentum: c.f64s(&format!("{prefix}.momentum"))?[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::matrix::{dot, norm};

    fn row(x: &[f64]) -> Matrix {
        Matrix::from_vec(1, x.len(), x.to_vec()).unwrap()
    }

    #[test]
    fn half_momentum_bisects() {
        let mut bank = MemoryBank::new(1, 2, 0.5).unwrap();
        bank.update(&[0], &row(&[1.0, 0.0]), &row(&[1.0, 0.0])).unwrap();
        bank.update(&[0], &row(&[0.0, 1.0]), &row(&[0.0, 1.0])).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((bank.voice_row(0)[0] - h).abs() < 1e-15);
        assert!((bank.voice_row(0)[1] - h).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_copies() {
        let mut bank = MemoryBank::new(1, 2, 0.0).unwrap();
        bank.update(&[0], &row(&[1.0, 0.0]), &row(&[1.0, 0.0])).unwrap();
        bank.update(&[0], &row(&[0.6, 0.8]), &row(&[0.0, 1.0])).unwrap();
        assert_eq!(bank.voice_row(0), &[0.6, 0.8]);
        assert_eq!(bank.face_row(0), &[0.0, 1.0]);
    }

    #[test]
    fn repeated_update_moves_strictly_closer() {
        let mut bank = MemoryBank::new(1, 3, 0.5).unwrap();
        let start = [0.0, 0.0, 1.0];
        let target = [0.6, 0.8, 0.0];
        bank.update(&[0], &row(&start), &row(&start)).unwrap();
        let mut last = dot(bank.voice_row(0), &target);
        for _ in 0..5 {
            bank.update(&[0], &row(&target), &row(&target)).unwrap();
            let now = dot(bank.voice_row(0), &target);
            assert!(now > last);
            last = now;
        }
    }

    #[test]
    fn duplicate_and_out_of_range_ids() {
        let mut bank = MemoryBank::new(2, 2, 0.5).unwrap();
        let two = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert!(matches!(bank.update(&[1, 1], &two, &two), Err(Error::Argument(_))));
        assert!(matches!(bank.update(&[0, 2], &two, &two), Err(Error::Argument(_))));
        assert_eq!(bank.uninitialized(), 2);
        assert!(MemoryBank::new(2, 2, 1.0).is_err());
    }

    #[test]
    fn snapshot_requires_full_coverage_and_copies() {
        let mut bank = MemoryBank::new(3, 2, 0.5).unwrap();
        bank.update(&[0], &row(&[1.0, 0.0]), &row(&[0.0, 1.0])).unwrap();
        let err = bank.snapshot().unwrap_err();
        assert!(err.to_string().contains('2'), "{err}");
        let rest = Matrix::from_rows(&[[0.6, 0.8], [0.8, 0.6]]).unwrap();
        bank.update(&[2, 1], &rest, &rest).unwrap();
        let (mut v, f) = bank.snapshot().unwrap();
        // first visit bypasses momentum
        assert_eq!(v.row(2), &[0.6, 0.8]);
        assert_eq!(v.row(1), &[0.8, 0.6]);
        for r in v.row_iter().chain(f.row_iter()) {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        v.set(0, 0, 42.0);
        assert_eq!(bank.voice_row(0), &[1.0, 0.0]);
    }
}
