use std::time::Instant;

use catt_tensor::{BatchNorm2d, Conv2d, Graph, Mode, ParamStore, Tensor};

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(32);
    let size: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(84);
    let ch: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(64);
    let mut store = ParamStore::<f32>::new();
    let mut blocks = Vec::new();
    let mut c_in = 1;
    for i in 0..4 {
        let conv = Conv2d::new(&mut store, &format!("b{i}.conv"), c_in, ch, 3, 1).unwrap();
        let bn = BatchNorm2d::new(&mut store, &format!("b{i}.bn"), ch).unwrap();
        blocks.push((conv, bn));
        c_in = ch;
    }
    let input = Tensor::from_fn(&[n, 1, size, size], |i| ((i * 7919) % 255) as f32 / 255.0);
    for _ in 0..3 {
        let t = Instant::now();
        let mut g = Graph::new();
        let mut x = g.constant(input.clone());
        for (conv, bn) in blocks.iter_mut() {
            x = conv.forward(&mut g, &store, x).unwrap();
            x = bn.forward(&mut g, &store, x, Mode::Train).unwrap();
            x = g.relu(x);
            x = g.maxpool2(x).unwrap();
        }
        let l = g.sum(x);
        let tf = t.elapsed();
        g.backward(l).unwrap();
        println!("n={n} fwd {:?} total {:?} per-image {:?}", tf, t.elapsed(), t.elapsed() / n as u32);
    }
}
