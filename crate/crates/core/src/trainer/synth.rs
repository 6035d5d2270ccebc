//! Seeded teacher/student regression tasks.

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, ToyModel};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_matrix, matmul, Matrix, SeededRng};

/// Shape of a synthetic task. The student's frozen bases are Gaussian with
/// stddev `1/√fan_in`; the hidden teacher adds a random rank-`delta_rank`
/// perturbation of relative size `delta_scale` to every base. Targets get
/// independent Gaussian noise of stddev `noise_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub delta_rank: usize,
    pub delta_scale: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub seed: u64,
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec {
            dims: vec![64, 64, 64],
            delta_rank: 4,
            delta_scale: 1.0,
            noise_std: 0.3,
            train_samples: 1000,
            validation_samples: 200,
            seed: 0,
        }
    }
}

/// Returns the student model (frozen bases only) and a dataset whose targets
/// come from the hidden teacher.
pub fn teacher_task(spec: &TeacherSpec) -> Result<(ToyModel, Dataset)> {
    if spec.dims.len() < 2 {
        return Err(Error::param("teacher task needs at least input and output widths"));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::param(format!(
            "noise_std must be non-negative, got {}",
            spec.noise_std
        )));
    }
    if spec.train_samples == 0 {
        return Err(Error::param("teacher task needs training samples"));
    }
    let mut rng = SeededRng::new(spec.seed);
    let mut student = Vec::new();
    let mut teacher = Vec::new();
    for w in spec.dims.windows(2) {
        let (k, d) = (w[0], w[1]);
        let base = gaussian_matrix(&mut rng, d, k, 1.0 / (k as f64).sqrt())?;
        let rank = spec.delta_rank.clamp(1, d.min(k));
        let u = gaussian_matrix(&mut rng, d, rank, 1.0)?;
        let v = gaussian_matrix(&mut rng, rank, k, 1.0)?;
        // each entry of u·v has variance `rank`; rescale to the base's stddev
        let delta = matmul(&u, &v)?.scale(spec.delta_scale / ((rank * k) as f64).sqrt())?;
        teacher.push(base.add(&delta)?);
        student.push(base);
    }
    let teacher = ToyModel::from_bases(teacher)?;
    let input_dim = spec.dims[0];
    let mut draw = |n: usize| -> Result<Vec<Sample>> {
        (0..n)
            .map(|_| {
                let input: Vec<f64> = (0..input_dim).map(|_| rng.standard_normal()).collect();
                let mut target = teacher.forward(&Matrix::column(&input)?)?.into_vec();
                if spec.noise_std > 0.0 {
                    target
                        .iter_mut()
                        .for_each(|t| *t += spec.noise_std * rng.standard_normal());
                }
                Ok(Sample { input, target })
            })
            .collect()
    };
    let train = draw(spec.train_samples)?;
    let validation = draw(spec.validation_samples)?;
    Ok((ToyModel::from_bases(student)?, Dataset { train, validation }))
}
