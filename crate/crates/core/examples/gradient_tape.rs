//! Reverse-mode gradients of a small expression built on the tape, checked
//! against central differences.

use cdssm::nn::{Mat, Tape};

fn loss(tape: &mut Tape, x: Mat, w: Mat) -> (cdssm::nn::Var, cdssm::nn::Var) {
    let xv = tape.leaf(x);
    let wv = tape.leaf(w);
    let h = tape.matmul(xv, wv);
    let h = tape.tanh(h);
    let s = tape.softmax_rows(h, None);
    let l = tape.square(s);
    (tape.sum(l), wv)
}

fn main() -> cdssm::Result<()> {
    let x = Mat::from_row_slice(2, 3, &[0.1, -0.4, 0.7, 1.2, 0.3, -0.8]);
    let w = Mat::from_row_slice(3, 2, &[0.5, -0.2, 0.1, 0.9, -0.6, 0.3]);
    let mut tape = Tape::new();
    let (out, wv) = loss(&mut tape, x.clone(), w.clone());
    let grads = tape.backward(out)?;
    let g = grads.get(wv).expect("gradient of w");
    let eps = 1e-6;
    for i in 0..w.len() {
        let mut wp = w.clone();
        wp[i] += eps;
        let mut wm = w.clone();
        wm[i] -= eps;
        let mut tp = Tape::new();
        let (lp, _) = loss(&mut tp, x.clone(), wp);
        let mut tm = Tape::new();
        let (lm, _) = loss(&mut tm, x.clone(), wm);
        let fd = (tp.scalar_value(lp) - tm.scalar_value(lm)) / (2.0 * eps);
        println!("dL/dw[{i}]  tape {:+.8}  fd {fd:+.8}", g[i]);
    }
    Ok(())
}
