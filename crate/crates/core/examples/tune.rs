//! Scratch experiment for training-speed and convergence tuning.

#[path = "../tests/common/corpus.rs"]
mod corpus;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vasyn::grad::OptKind;
use vasyn::perturb::additive_noise;
use vasyn::pipeline::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let n_clips: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);

    let t0 = std::time::Instant::now();
    let (buffers, _clips, bank) = corpus::training_corpus(n_clips, 4.0, 1);
    let held: Vec<corpus::CorpusClip> = (0..6).map(|i| corpus::voice_clip(9000 + i, 3.0)).collect();
    println!("corpus: {} clips, {:.1} s total, built in {:?}", buffers.len(),
        buffers.iter().map(|b| b.duration_secs()).sum::<f64>(), t0.elapsed());

    let cfg = BackboneConfig::toy();
    let tcfg = TrainConfig {
        steps: 0,
        schedule_steps: steps,
        batch: 2,
        lr,
        weight_decay: 0.0,
        optimizer: OptKind::Adam,
        crop_frames: 32,
        seed: 7,
    };
    let t0 = std::time::Instant::now();
    let mut state = train_backbone(&buffers, &bank, cfg.clone(), &tcfg).unwrap();
    let min_samples = tcfg.crop_frames * cfg.hop + cfg.hop;
    let dataset = Dataset::prepare(&buffers, &cfg, min_samples.max(16000)).unwrap();
    println!("dataset prepared in {:?}", t0.elapsed());

    let eval = |state: &TrainState<f32>| {
        let mut mae_clean = 0.0;
        let mut mae_noisy = 0.0;
        let noise = corpus::noise_buffers();
        for (i, clip) in held.iter().enumerate() {
            let feats = state.backbone.analyze(&clip.audio).unwrap();
            mae_clean += corpus::f0_mae_semitones(&feats.raw_f0, &clip.f0_frames);
            let noisy = additive_noise(&clip.audio, &noise[i % noise.len()], 5.0).unwrap();
            let nf = state.backbone.analyze(&noisy).unwrap();
            mae_noisy += corpus::f0_mae_semitones(&nf.raw_f0, &clip.f0_frames);
        }
        (mae_clean / held.len() as f64, mae_noisy / held.len() as f64)
    };

    let (m0, mn0) = eval(&state);
    println!("step 0: MAE clean {:.2} st, 5dB {:.2} st", m0, mn0);
    let chunk = 100u64;
    let mut done = 0;
    let t_train = std::time::Instant::now();
    while done < steps {
        let n = chunk.min(steps - done);
        let tc = std::time::Instant::now();
        train_steps(&mut state, &dataset, &bank, n).unwrap();
        done += n;
        let b = state.history.last().unwrap();
        let (mc, mn) = eval(&state);
        println!(
            "step {done}: total {:.3} mss {:.3} mel {:.3} pitch {:.4} contr {:.4} (c={:.2e}) | MAE clean {:.2} st, 5dB {:.2} st | {:.2} s/step",
            b.total, b.mss, b.mel, b.pitch, b.contrastive, b.coeff, mc, mn,
            tc.elapsed().as_secs_f64() / n as f64
        );
    }
    println!("trained {} steps in {:?}", steps, t_train.elapsed());

    // reconstruction check on held-out clips
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clip = &held[0];
    let feats = state.backbone.analyze(&clip.audio).unwrap();
    let wave = state.backbone.synthesize(&feats, &mut rng).unwrap();
    let orig = vasyn::dsp::mel_spectrogram(&clip.audio, 80, 1024, 256).unwrap().mags;
    let recon = vasyn::dsp::mel_spectrogram(&wave, 80, 1024, 256).unwrap().mags;
    let n = orig.len().min(recon.len());
    let (a, b) = (&orig.data()[..n], &recon.data()[..n]);
    let ma = a.iter().sum::<f32>() / n as f32;
    let mb = b.iter().sum::<f32>() / n as f32;
    let mut num = 0.0f64;
    let mut da = 0.0f64;
    let mut db = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        num += ((x - ma) * (y - mb)) as f64;
        da += ((x - ma) * (x - ma)) as f64;
        db += ((y - mb) * (y - mb)) as f64;
    }
    println!("mel corr r = {:.3}", num / (da.sqrt() * db.sqrt()).max(1e-9));
}
