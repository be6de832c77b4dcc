use unifork::*;
use std::time::Instant;

fn main() {
    let mut rng = rng::substream(1, "x");
    let x256 = Tensor::randn(vec![82, 256], 1.0, &mut rng);
    let n = 2000;

    // raw gelu over a plain vec
    let xv: Vec<f64> = x256.data().to_vec();
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..n {
        let tanh: Vec<f64> = xv.iter().map(|&v| (0.7978845608028654 * (v + 0.044715*v*v*v)).tanh()).collect();
        let out: Vec<f64> = xv.iter().zip(&tanh).map(|(&v, &t)| 0.5*v*(1.0+t)).collect();
        acc += out[0];
    }
    println!("raw gelu pair: {:.1} us ({acc:.1})", t0.elapsed().as_secs_f64()*1e6/n as f64);

    // single pass
    let t0 = Instant::now();
    for _ in 0..n {
        let out: Vec<f64> = xv.iter().map(|&v| 0.5*v*(1.0+(0.7978845608028654 * (v + 0.044715*v*v*v)).tanh())).collect();
        acc += out[0];
    }
    println!("raw gelu single: {:.1} us", t0.elapsed().as_secs_f64()*1e6/n as f64);

    // graph input clone cost
    let store = ParamStore::new();
    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::inference(&store);
        let x = g.input(x256.clone());
        acc += g.value(x).data()[0];
    }
    println!("graph+input only: {:.1} us", t0.elapsed().as_secs_f64()*1e6/n as f64);

    // graph gelu with input staged once outside timing... cannot; time input+gelu then subtract
    let t0 = Instant::now();
    for _ in 0..n {
        let mut g = Graph::inference(&store);
        let x = g.input(x256.clone());
        let y = g.gelu(x);
        acc += g.value(y).data()[0];
    }
    println!("graph input+gelu: {:.1} us ({acc:.0})", t0.elapsed().as_secs_f64()*1e6/n as f64);
}
