use nalgebra::{Dim, Matrix, RawStorage};

pub fn max_diff<R: Dim, C: Dim, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
