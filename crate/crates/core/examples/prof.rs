//! Rough wall-time breakdown of one training shard's building blocks.

#[path = "../tests/common/corpus.rs"]
mod corpus;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vasyn::audio::AudioBuffer;
use vasyn::dsp;
use vasyn::grad::{Ctx, Graph, Tensor};
use vasyn::nets;
use vasyn::objectives;
use vasyn::perturb;
use vasyn::pipeline::*;

fn time<R>(label: &str, reps: usize, mut f: impl FnMut() -> R) -> R {
    let t0 = std::time::Instant::now();
    let mut out = None;
    for _ in 0..reps {
        out = Some(f());
    }
    println!("{label:32} {:>9.2} ms", t0.elapsed().as_secs_f64() * 1000.0 / reps as f64);
    out.unwrap()
}

fn main() {
    let cfg = BackboneConfig::toy();
    let backbone = Backbone::<f32>::init(cfg.clone(), 7);
    let clip = corpus::voice_clip(1, 4.0);
    let crop_frames = 32usize;
    let samples = &clip.audio.samples[..crop_frames * cfg.hop];
    let crop_buf = AudioBuffer::new(samples.to_vec(), 16000);
    let bank = perturb::NoiseBank::from_buffers(corpus::noise_buffers());
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let full_cqt = time("cqt 4s utterance", 3, || dsp::cqt(&clip.audio, cfg.hop).unwrap());
    let _ = full_cqt;
    let crop_cqt = dsp::cqt(&crop_buf, cfg.hop).unwrap();
    let pair = dsp::cqt_crop_pair(&crop_cqt, &mut rng).unwrap();

    let (v1, _v2, _) = time("perturbation chain (2 views)", 5, || {
        perturb::perturbation_chain(&crop_buf, &cfg.perturb, &bank, &mut rng).unwrap()
    });
    let mel1 = time("aligned log mel", 10, || backbone.aligned_log_mel(&v1.samples).unwrap());

    // individual network forwards + full backward
    let run = |which: &str| {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &backbone.params, true, 9);
        match which {
            "pitch fwd" => {
                let p = nets::pitch_encoder_forward(&mut ctx, &cfg.nets, &pair.crop1).unwrap();
                let _ = p;
            }
            "linguistic fwd" => {
                let l = nets::linguistic_encoder_forward(&mut ctx, &cfg.nets, &mel1).unwrap();
                let _ = l;
            }
            "timbre fwd" => {
                let t = nets::timbre_encoder_forward(&mut ctx, &cfg.nets, &mel1).unwrap();
                let _ = t;
            }
            _ => unreachable!(),
        }
    };
    time("pitch fwd", 10, || run("pitch fwd"));
    time("linguistic fwd", 10, || run("linguistic fwd"));
    time("timbre fwd", 10, || run("timbre fwd"));

    // synth fwd alone
    let t_len = crop_frames * cfg.hop;
    time("sample synth fwd", 5, || {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &backbone.params, true, 9);
        let z = ctx.g.leaf(Tensor::uniform(&[t_len], -0.5f32, 0.5, &mut rng));
        let cond = ctx.g.leaf(Tensor::uniform(&[crop_frames, cfg.nets.frame_channels], -1.0f32, 1.0, &mut rng));
        let w = nets::sample_synth_forward(&mut ctx, &cfg.nets, z, cond, cfg.hop).unwrap();
        let _ = w;
    });

    // synth fwd + mss/mel loss + backward
    time("synth fwd+loss+backward", 5, || {
        let mut g = Graph::new();
        let mut ctx = Ctx::new(&mut g, &backbone.params, true, 9);
        let z = ctx.g.leaf(Tensor::uniform(&[t_len], -0.5f32, 0.5, &mut rng));
        let cond_in = ctx.g.leaf(Tensor::uniform(&[crop_frames, cfg.nets.frame_channels], -1.0f32, 1.0, &mut rng));
        let w = nets::sample_synth_forward(&mut ctx, &cfg.nets, z, cond_in, cfg.hop).unwrap();
        let target = g.leaf(Tensor::from_slice(&[t_len], samples).unwrap());
        let mss = objectives::mss_loss(&mut g, w, target, &cfg.mss).unwrap();
        let mel = objectives::mel_loss(&mut g, w, target, 16000, 80, 1024, 256).unwrap();
        let total = g.add(mss, mel).unwrap();
        let _ = g.backward(total).unwrap();
    });

    // matmul and conv microbenches
    let a = Tensor::uniform(&[512, 64], -1.0f32, 1.0, &mut rng);
    let b = Tensor::uniform(&[64, 64], -1.0f32, 1.0, &mut rng);
    time("matmul 512x64x64 (x100)", 3, || {
        for _ in 0..100 {
            let _ = vasyn::grad::matmul(&a, &b).unwrap();
        }
    });
    let gflop = 2.0 * 512.0 * 64.0 * 64.0 * 100.0 / 1e9;
    println!("(= {gflop:.2} GFLOP per rep)");
}
