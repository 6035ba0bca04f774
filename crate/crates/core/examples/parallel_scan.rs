//! Prefix composition of diagonal affine maps: the tree scan against the
//! left fold, its combine depth, and wall time on a few pool sizes.

use std::time::Instant;

use cdssm::pscan::{parallel_scan_in, scan_stats, sequential_scan_buffer, ScanBuffer, ScanElement};
use cdssm::rng::RandomStream;

fn main() -> cdssm::Result<()> {
    let mut rng = RandomStream::new(7, 0);
    let (k, d) = (1 << 16, 8);
    let elems: Vec<ScanElement> = (0..k)
        .map(|_| ScanElement::new((0..d).map(|_| rng.uniform_range(0.9, 1.0)).collect(), (0..d).map(|_| rng.normal()).collect()))
        .collect::<cdssm::Result<_>>()?;
    let buf = ScanBuffer::from_elements(&elems)?;

    let t = Instant::now();
    let seq = sequential_scan_buffer(&buf);
    println!("fold:      {:8.2} ms", t.elapsed().as_secs_f64() * 1e3);
    for workers in [1, 2, 4] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().expect("pool");
        let t = Instant::now();
        let par = parallel_scan_in(&pool, &buf)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let last = (par.element(k - 1).offset[0] - seq.element(k - 1).offset[0]).abs();
        println!("scan x{workers}:   {ms:8.2} ms   |last offset diff| {last:.1e}");
    }
    let st = scan_stats(k);
    println!("K = {k}: {} combines, depth {} (bound {})", st.combines, st.depth, 2 * 16 + 2);
    Ok(())
}
