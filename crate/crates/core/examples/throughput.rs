//! Times forward and forward+backward passes of the full-size model.

use std::time::Instant;

use capsnet::model::{Decode, TrainSample};
use capsnet::{CapsNet, CapsNetConfig, Tensor};

fn main() -> capsnet::Result<()> {
    let model = CapsNet::<f32>::new(CapsNetConfig::default(), 0)?;
    let image = Tensor::from_fn(&[28, 28], |i| ((i * 31) % 17) as f32 / 16.0);
    let sample = TrainSample::single(image.clone(), 3);
    let n = 10;

    let t = Instant::now();
    for _ in 0..n {
        model.forward(&image, Decode::None)?;
    }
    println!("forward:          {:7.1} ms/example", t.elapsed().as_secs_f64() * 1e3 / n as f64);

    let t = Instant::now();
    for _ in 0..n {
        model.gradients(&sample)?;
    }
    println!("forward+backward: {:7.1} ms/example", t.elapsed().as_secs_f64() * 1e3 / n as f64);
    Ok(())
}
