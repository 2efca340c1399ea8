// scratch micro-benchmarks (deleted before ship)
use ovcoser_core::autograd::{Arr, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn bench(name: &str, reps: usize, mut f: impl FnMut()) {
    let t0 = Instant::now();
    for _ in 0..reps { f(); }
    println!("{name}: {:.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1024usize;
    let dh = 8usize;
    let q = Arr::from_vec(&[n, dh], (0..n*dh).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let k = q.clone();
    let v = q.clone();
    let c = 16usize;
    let x = Arr::from_vec(&[n, c], (0..n*c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let w = Arr::from_vec(&[c, c], (0..c*c).map(|_| rng.gen_range(-1.0..1.0)).collect());

    bench("attn fwd (softmax_nt + pv)", 20, || {
        let t = Tape::new();
        let qv = t.param(q.clone());
        let kv = t.param(k.clone());
        let vv = t.param(v.clone());
        let p = t.scaled_softmax_nt(qv, kv, 0.35);
        let _o = t.matmul(p, vv);
    });
    bench("attn fwd+bwd", 20, || {
        let t = Tape::new();
        let qv = t.param(q.clone());
        let kv = t.param(k.clone());
        let vv = t.param(v.clone());
        let p = t.scaled_softmax_nt(qv, kv, 0.35);
        let o = t.matmul(p, vv);
        let loss = t.sum_all(o);
        let _g = t.backward(loss);
    });
    bench("proj matmul x*w fwd", 200, || {
        let t = Tape::new();
        let xv = t.param(x.clone());
        let wv = t.param(w.clone());
        let _ = t.matmul(xv, wv);
    });
    bench("to_tokens+to_chw", 200, || {
        let t = Tape::new();
        let xv = t.param(Arr::from_vec(&[c, 32, 32], x.data().to_vec()));
        let tok = t.to_tokens(xv);
        let _ = t.to_chw(tok, 32, 32);
    });
    bench("colnorm fwd", 200, || {
        let t = Tape::new();
        let xv = t.param(x.clone());
        let g = t.input(Arr::full(&[c], 1.0));
        let b = t.input(Arr::full(&[c], 0.0));
        let _ = t.colnorm_affine(xv, g, b, 1e-5);
    });
    // raw kernel costs
    let qd = q.data().to_vec();
    let mut out = vec![0.0; n*n];
    bench("raw mm_nt 1024x8x1024", 20, || {
        out.iter_mut().for_each(|v| *v = 0.0);
        ovcoser_core::autograd::kernels_mm_nt(&qd, &qd, n, dh, n, &mut out);
    });
    bench("raw softmax rows 1024x1024", 20, || {
        ovcoser_core::autograd::kernels_softmax(&mut out, n, n);
    });
    bench("alloc 8MB zeroed", 50, || {
        let v = vec![0.0f64; n*n];
        std::hint::black_box(&v);
    });
}
