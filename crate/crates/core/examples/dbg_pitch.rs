//! Trace input dependence through the pitch encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vasyn::grad::{Ctx, Graph, Pad, Tensor};
use vasyn::nets::*;

fn main() {
    let cfg = NetsConfig::toy();
    let mut params = vasyn::grad::Params::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    init_pitch_encoder(&cfg, &mut params, &mut rng);

    let mut probe = |label: &str, crop: &Tensor<f32>| {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval(&mut g, &params);
        let out = pitch_encoder_forward(&mut ctx, &cfg, crop).unwrap();
        let f0 = g.value(out.f0).data().to_vec();
        let probs = g.value(out.probs);
        let row0: Vec<f32> = probs.row(0)[..6].to_vec();
        println!("{label}: f0[0..4] = {:?}, probs[0][0..6] = {:?}", &f0[..4.min(f0.len())], row0);
    };
    let mut r2 = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::uniform(&[6, 160], 0.0f32, 0.3, &mut r2);
    let b = Tensor::uniform(&[6, 160], 0.0f32, 0.3, &mut r2);
    let zeros = Tensor::zeros(&[6, 160]);
    probe("crop A", &a);
    probe("crop B", &b);
    probe("zeros ", &zeros);

    // trace the conv trunk on one frame
    let mut g = Graph::new();
    let mut ctx = Ctx::eval(&mut g, &params);
    let x = ctx.g.leaf(compress_cqt(&a));
    let mut h = ctx.g.reshape(x, &[6, 160, 1]).unwrap();
    println!("input   mean abs {:.4}", mean_abs(ctx.g.value(h)));
    let w = ctx.p("pitch.stem.w").unwrap();
    let bsv = ctx.p("pitch.stem.b").unwrap();
    let y = ctx.g.conv1d(h, w, 1, 1, Pad::Same).unwrap();
    let y = ctx.g.add(y, bsv).unwrap();
    h = ctx.g.leaky_relu(y);
    println!("stem    mean abs {:.4} dims {:?}", mean_abs(ctx.g.value(h)), ctx.g.value(h).dims());
    for i in 0..4 {
        let rw = ctx.p(&format!("pitch.res{i}.w")).unwrap();
        let rb = ctx.p(&format!("pitch.res{i}.b")).unwrap();
        let r = ctx.g.conv1d(h, rw, 1, 1, Pad::Same).unwrap();
        let r = ctx.g.add(r, rb).unwrap();
        let r = ctx.g.leaky_relu(r);
        h = ctx.g.add(h, r).unwrap();
        let dw = ctx.p(&format!("pitch.down{i}.w")).unwrap();
        let db = ctx.p(&format!("pitch.down{i}.b")).unwrap();
        let d = ctx.g.conv1d(h, dw, 2, 1, Pad::Same).unwrap();
        let d = ctx.g.add(d, db).unwrap();
        h = ctx.g.leaky_relu(d);
        println!("stage{i}  mean abs {:.4} dims {:?}", mean_abs(ctx.g.value(h)), ctx.g.value(h).dims());
    }
    let flat = 160 / 16 * cfg.pitch_channels[3];
    let hf = ctx.g.reshape(h, &[6, flat]).unwrap();
    let pw = ctx.p("pitch.proj.w").unwrap();
    let pb = ctx.p("pitch.proj.b").unwrap();
    let hp = ctx.g.matmul(hf, pw).unwrap();
    let hp = ctx.g.add(hp, pb).unwrap();
    let hp = ctx.g.leaky_relu(hp);
    println!("proj    mean abs {:.4}", mean_abs(ctx.g.value(hp)));
}

fn mean_abs(t: &Tensor<f32>) -> f32 {
    t.data().iter().map(|v| v.abs()).sum::<f32>() / t.len() as f32
}
