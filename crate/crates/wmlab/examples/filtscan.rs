use wmlab::data::{shapes10, Split};
use wmlab::embed::load_watermarked;
use wmlab::remove::{filtered_serving, fit_anomaly_filter, AnomalyFilterConfig};
use wmlab::triggergen::load_bundle;

fn main() {
    let dir = std::env::args().nth(1).unwrap();
    let mut victim = load_watermarked(std::path::Path::new(&format!("{dir}/victim.ckpt"))).unwrap();
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let train = shapes10(600, 5, Split::Train);
    let val = shapes10(300, 5, Split::Val);
    for blocks in [1usize, 2, 3] {
        for cont in [0.01f32, 0.05] {
            let fcfg = AnomalyFilterConfig { blocks, contamination: cont, seed: 5, ..Default::default() };
            let mut extractor = victim.model.clone();
            let filter = fit_anomaly_filter(&mut victim.model, &mut extractor, &train, &fcfg).unwrap();
            let clean = filtered_serving(&mut victim.model, &mut extractor, &filter, &val).unwrap();
            let trig = filtered_serving(&mut victim.model, &mut extractor, &filter, &bundle.pros).unwrap();
            println!(
                "blocks {blocks} cont {cont}: clean rej {:.3} acc {:.3} | trigger rej {:.3} acc {:.3}",
                clean.rejection_rate, clean.accuracy, trig.rejection_rate, trig.accuracy
            );
        }
    }
}
