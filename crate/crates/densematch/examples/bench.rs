use densematch::backbone::LevelPlan;
use densematch::model::{self, ModelConfig};
use densematch::params::ParameterStore;
use densematch::tensor::{Array, Tape};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::time::Instant;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut cfg = ModelConfig { plan: LevelPlan::desk(), ..Default::default() };
    cfg.agg.n_blocks = 1;
    let mut params = ParameterStore::new();
    model::register(&mut params, &cfg, &mut rng).unwrap();
    let n = 256;
    let img: Vec<f64> = (0..n * n * 3).map(|_| rng.random::<f64>()).collect();
    let i_s = Array::new(vec![n, n, 3], img.clone()).unwrap();
    let i_t = Array::new(vec![n, n, 3], img).unwrap();
    let gt = densematch::flow::FlowField::zeros(n, n);
    for step in 0..5 {
        let t1 = Instant::now();
        let mut tape = Tape::new();
        let vars = params.inject_all(&mut tape).unwrap();
        let out = model::forward(&mut tape, &vars, &cfg, &i_s, &i_t).unwrap();
        let loss = model::epe_loss(&mut tape, out.flow, &gt).unwrap();
        let _ = tape.backward(loss).unwrap();
        println!("step {step} fwd+bwd: {:?}", t1.elapsed());
    }
    for step in 0..3 {
        let t1 = Instant::now();
        let mut tape = Tape::inference();
        let vars = params.inject_all(&mut tape).unwrap();
        let _ = model::forward(&mut tape, &vars, &cfg, &i_s, &i_t).unwrap();
        println!("step {step} inference: {:?}", t1.elapsed());
    }
}
