//! The reverse-mode graph on its own: a two-layer network, its gradients,
//! and a central-difference check of one weight.

use hetlm::tensor::{Graph, Tensor};

fn loss(w1: &Tensor<f64>, w2: &Tensor<f64>, x: &Tensor<f64>) -> (f64, Option<hetlm::tensor::Gradients<f64>>) {
    let mut g = Graph::<f64>::new();
    let x = g.input(x.clone());
    let w1 = g.parameter("w1", w1.clone());
    let w2 = g.parameter("w2", w2.clone());
    let h = g.matmul(x, w1).unwrap();
    let h = g.gelu(h);
    let logits = g.matmul(h, w2).unwrap();
    let logp = g.log_softmax(logits);
    let picked = g.slice_cols(logp, 0, 1).unwrap();
    let mean = g.mean(picked);
    let loss = g.scale(mean, -1.0);
    let value = g.value(loss).item();
    (value, g.backward(loss).ok())
}

fn main() {
    let x = Tensor::new(vec![3, 2], vec![0.5, -1.0, 1.5, 0.2, -0.3, 0.8]).unwrap();
    let w1 = Tensor::new(vec![2, 4], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6, 0.7, -0.8]).unwrap();
    let w2 = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 - 6.0) / 10.0).collect()).unwrap();

    let (value, grads) = loss(&w1, &w2, &x);
    let grads = grads.unwrap();
    println!("loss {value:.6}");
    let analytic = grads.get("w1").unwrap().data()[2];

    let h = 1e-5;
    let mut up = w1.clone();
    up.data_mut()[2] += h;
    let mut down = w1.clone();
    down.data_mut()[2] -= h;
    let numeric = (loss(&up, &w2, &x).0 - loss(&down, &w2, &x).0) / (2.0 * h);
    println!("dL/dw1[0,2]: analytic {analytic:.8}, numeric {numeric:.8}");
}
