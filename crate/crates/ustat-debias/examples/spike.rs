use nalgebra::{DMatrix, DVector};
use std::time::Instant;

fn main() {
    let d = 177;
    let n = 1000;
    // random SPD
    let a = DMatrix::<f64>::from_fn(d, d, |i, j| ((i * 31 + j * 17) % 13) as f64 / 13.0);
    let spd = &a * a.transpose() + DMatrix::identity(d, d) * (d as f64);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..200 {
        let c = spd.clone().cholesky().unwrap();
        let x = c.solve(&DVector::from_element(d, 1.0));
        acc += x[0];
    }
    let per = t0.elapsed().as_secs_f64() / 200.0;
    println!("cholesky+solve d={d}: {:.3} ms each ({acc:.3})", per * 1e3);
    println!("jackknife rep estimate: {:.2} s", per * n as f64);

    // row-vector * matrix speed (DP inner step)
    let row = nalgebra::RowDVector::<f64>::from_element(d, 1.0);
    let t1 = Instant::now();
    let mut s = 0.0;
    for _ in 0..20000 {
        let r2 = &row * &spd;
        s += r2[0];
    }
    println!("rowvec*mat d={d}: {:.1} us each ({s:.1})", t1.elapsed().as_secs_f64() / 20000.0 * 1e6);

    // gemm d x d
    let t2 = Instant::now();
    for _ in 0..20 {
        let c = &spd * &spd;
        s += c[(0, 0)];
    }
    println!("mat*mat d={d}: {:.2} ms each ({s:.1})", t2.elapsed().as_secs_f64() / 20.0 * 1e3);
}
