extern crate blas_src;
// quick micro-breakdown of decoder step cost
use std::time::Instant;
use ndarray::Array2;

fn main() {
    // raw GEMM throughput at our sizes
    let a = Array2::<f64>::from_elem((178, 128), 0.5);
    let b = Array2::<f64>::from_elem((128, 128), 0.25);
    let t0 = Instant::now();
    let reps = 2000;
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 178.0 * 128.0 * 128.0 * reps as f64;
    println!("gemm 178x128x128: {:.2} GFLOP/s ({acc})", flops / dt / 1e9);

    // ffn-size gemm
    let b2 = Array2::<f64>::from_elem((128, 256), 0.25);
    let t0 = Instant::now();
    for _ in 0..reps {
        let c = a.dot(&b2);
        acc += c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 178.0 * 128.0 * 256.0 * reps as f64;
    println!("gemm 178x128x256: {:.2} GFLOP/s", flops / dt / 1e9);

    // allocation + zero cost at typical node size
    let t0 = Instant::now();
    let mut v = Vec::new();
    for _ in 0..10000 {
        let z = Array2::<f64>::zeros((178, 128));
        v.push(z[[0,0]]);
    }
    println!("alloc+zero 178x128: {:.1} us each ({})", t0.elapsed().as_secs_f64() * 1e6 / 10000.0, v.len());

    // transpose cost
    let t0 = Instant::now();
    for _ in 0..10000 {
        let t = a.t().to_owned();
        acc += t[[0,0]];
    }
    println!("transpose 178x128: {:.1} us each", t0.elapsed().as_secs_f64() * 1e6 / 10000.0);
}
