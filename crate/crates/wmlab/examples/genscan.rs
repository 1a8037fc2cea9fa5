use wmlab::checkpoint::load_classifier;
use wmlab::data::{shapes10, Split};
use wmlab::diffusion::load_denoiser;
use wmlab::model::to_unit_batch;
use wmlab::triggergen::{generate_uae_candidates, GuidanceConfig};
use wmlab::diffusion::SamplerConfig;

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let mut den = load_denoiser(std::path::Path::new(&format!("{dir}/denoiser.ckpt"))).unwrap();
    let mut f = load_classifier(std::path::Path::new(&format!("{dir}/reference.ckpt"))).unwrap();
    let train = shapes10(600, 0, Split::Train);
    let all: Vec<usize> = (0..train.len()).collect();
    let xt = to_unit_batch(&train, &all);
    for &strength in &[0.05f32, 0.1, 0.15] {
        for &xi in &[0.25f32, 0.5, 1.0] {
            for &ed in &[5usize] {
                let mut cfg = GuidanceConfig::default_desk();
                cfg.sampler = SamplerConfig { steps: 10, deterministic: true, seed: 5 };
                cfg.xi = vec![xi; 10];
                cfg.warmup.iters = 0;
                cfg.edition.steps = ed;
                cfg.edit_strength = strength;
                let cands = generate_uae_candidates(&mut den, &mut f, 20, &cfg, 5, Some(&train)).unwrap();
                let fool = cands.iter().filter(|c| c.margin < 0.0).count();
                let mut mean_nn = 0.0f32;
                for c in &cands {
                    let mut best = f32::MAX;
                    for i in 0..train.len() {
                        let mut d = 0.0;
                        for h in 0..32 { for w in 0..32 { for ch in 0..3 {
                            let diff = c.image[[h, w, ch]] as f32 / 255.0 - xt[[i, ch, h, w]];
                            d += diff * diff; } } }
                        best = best.min(d.sqrt());
                    }
                    mean_nn += best;
                }
                println!("strength {strength} xi {xi} ed {ed}: fool {fool}/20 nn {:.1}", mean_nn / 20.0);
            }
        }
    }
}
