//! Builds a small graph on the tape, runs the backward pass and checks one
//! gradient entry against a central difference.

use flexkd::autograd::Tape;
use flexkd::Tensor;

fn loss(x: &Tensor, w: &Tensor) -> flexkd::Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone())?;
    let wv = tape.param(w.clone())?;
    let h = tape.matmul(xv, wv)?;
    let a = tape.tanh(h)?;
    let l = tape.softmax_cross_entropy(a, &[0, 1, 1])?;
    let grads = tape.backward(l)?;
    Ok((tape.value(l).item(), grads.wrt(wv, &tape)?.data().to_vec()))
}

fn main() -> flexkd::Result<()> {
    let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8])?;
    let w = Tensor::new(vec![2, 2], vec![0.1, -0.4, 0.7, 0.3])?;
    let (value, grad) = loss(&x, &w)?;
    println!("loss = {value:.6}");
    println!("dL/dW = {grad:?}");

    let h = 1e-5;
    let mut plus = w.clone();
    plus.data_mut()[0] += h;
    let mut minus = w.clone();
    minus.data_mut()[0] -= h;
    let numeric = (loss(&x, &plus)?.0 - loss(&x, &minus)?.0) / (2.0 * h);
    println!("dL/dW[0,0]: tape {:.8}, central difference {numeric:.8}", grad[0]);
    Ok(())
}
