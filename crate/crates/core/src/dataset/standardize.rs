use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

const STD_FLOOR: f64 = 1e-8;

/// Per-feature z-scoring with statistics taken from training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation, floored at 1e-8.
    pub std: Vec<f64>,
    /// Columns with a single distinct value; these map to exactly 0.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit a standardizer on an empty dataset".into(),
            ));
        }
        let x = train.features();
        let n = x.nrows() as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        let mut constant = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            let first = col[0];
            mean.push(m);
            std.push(var.sqrt().max(STD_FLOOR));
            constant.push(col.iter().all(|&v| v == first));
        }
        Ok(Self {
            mean,
            std,
            constant,
        })
    }

    pub fn transform(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(x)?;
        let mut out = x.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if self.constant[j] {
                col.fill(0.0);
            } else {
                col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
            }
        }
        Ok(out)
    }

    pub fn inverse_transform(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_width(z)?;
        let mut out = z.clone();
        for (j, mut col) in out.axis_iter_mut(Axis(1)).enumerate() {
            if self.constant[j] {
                col.fill(self.mean[j]);
            } else {
                col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
            }
        }
        Ok(out)
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        Ok(ds.replace_features(self.transform(ds.features())?))
    }

    fn check_width(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "standardizer fitted on {} features, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    fn ds(x: Array2<f64>) -> Dataset {
        let n = x.nrows();
        Dataset::new(x, Array1::zeros(n)).unwrap()
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let train = ds(array![[0.1, 0.0], [0.1, 2.0], [0.1, 4.0]]);
        let s = Standardizer::fit(&train).unwrap();
        let z = s.transform(train.features()).unwrap();
        assert!(z.column(0).iter().all(|&v| v == 0.0));
        assert_eq!(s.std[0], STD_FLOOR);
    }

    #[test]
    fn two_point_column_maps_to_unit_values() {
        let s = Standardizer::fit(&ds(array![[0.0], [2.0]])).unwrap();
        let z = s.transform(&array![[0.0], [2.0]]).unwrap();
        assert_eq!(z, array![[-1.0], [1.0]]);
    }

    #[test]
    fn test_rows_use_training_statistics() {
        let s = Standardizer::fit(&ds(array![[0.0], [2.0]])).unwrap();
        let z = s.transform(&array![[10.0], [12.0]]).unwrap();
        assert_eq!(z, array![[9.0], [11.0]]);
    }

    #[test]
    fn training_columns_are_centered_and_scaled() {
        let x = Array2::from_shape_fn((50, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64 * (j + 1) as f64);
        let s = Standardizer::fit(&ds(x.clone())).unwrap();
        let z = s.transform(&x).unwrap();
        for col in z.axis_iter(Axis(1)) {
            let m = col.mean().unwrap();
            let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 50.0).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
        let back = s.inverse_transform(&z).unwrap();
        assert!((back - x).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn width_mismatch_and_empty_rejected() {
        let s = Standardizer::fit(&ds(array![[0.0], [2.0]])).unwrap();
        assert!(s.transform(&array![[0.0, 1.0]]).is_err());
        assert!(Standardizer::fit(&ds(Array2::zeros((0, 2)))).is_err());
    }
}
