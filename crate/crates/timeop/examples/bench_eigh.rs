use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use timeop::linalg::{eigh, HermitianOperator};

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &n in &[256usize, 512, 1024, 2048] {
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                m[(i, j)] = if i == j { Complex64::new(z.re, 0.0) } else { z };
                m[(j, i)] = m[(i, j)].conj();
            }
        }
        let op = HermitianOperator::new("bench", m.clone()).unwrap();
        let t0 = Instant::now();
        let (vals, basis) = eigh(&op);
        let dt = t0.elapsed().as_secs_f64();
        // reconstruction residual
        let mut recon = basis.clone();
        for (i, v) in vals.iter().enumerate() {
            let mut col = recon.column_mut(i);
            for z in col.iter_mut() { *z *= Complex64::new(*v, 0.0); }
        }
        let resid = (recon * basis.adjoint() - &m).norm() / m.norm();
        println!("n={n:5}  eigh {dt:8.2}s  relative reconstruction {resid:.2e}");
        let t1 = Instant::now();
        let _prod = &m * &m;
        println!("         matmul {:.2}s", t1.elapsed().as_secs_f64());
    }
}
