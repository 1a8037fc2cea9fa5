use ndarray::Array2;
use wmlab::data::{shapes10, Split};
use wmlab::embed::load_watermarked;
use wmlab::model::to_unit_batch;
use wmlab::nn::argmax_rows;
use wmlab::triggergen::load_bundle;


fn pixel_nn(){
    let dir = std::env::args().nth(1).unwrap();
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let train = shapes10(600, 0, Split::Train);
    let all: Vec<usize> = (0..train.len()).collect();
    let xt = to_unit_batch(&train, &all);
    let idx: Vec<usize> = (0..bundle.pros.len()).collect();
    let xp = to_unit_batch(&bundle.pros, &idx);
    let nn = |row: usize, x: &ndarray::Array4<f32>| -> f32 {
        let mut best = f32::MAX;
        for i in 0..train.len() {
            let mut d = 0.0;
            for c in 0..3 { for h in 0..32 { for w in 0..32 {
                let diff = x[[row,c,h,w]] - xt[[i,c,h,w]]; d += diff*diff; } } }
            best = best.min(d.sqrt());
        }
        best
    };
    // typical train-to-train nn distance (sample 20)
    let mut typ = 0.0; let m = 20;
    for s in 0..m {
        let mut best = f32::MAX;
        for i in 0..train.len() { if i==s {continue;}
            let mut d=0.0;
            for c in 0..3 { for h in 0..32 { for w in 0..32 {
                let diff = xt[[s,c,h,w]] - xt[[i,c,h,w]]; d += diff*diff; } } }
            best = best.min(d.sqrt());
        }
        typ += best;
    }
    println!("typical train nn dist {:.2}", typ / m as f32);
    for i in 0..bundle.pros.len() {
        println!("pro {i} pixel nn dist {:.2}", nn(i, &xp));
    }
}


fn panel(){
    let dir = std::env::args().nth(1).unwrap();
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let train = shapes10(600, 0, Split::Train);
    for i in 0..5u64 {
        let cfg = wmlab::model::TrainConfig { epochs: 12, batch_size: 64, lr: 2e-3, weight_decay: 1e-5, seed: 9000 + 17 * i };
        let mut m = wmlab::model::train_erm(&train, "smallresnet:base=8,k=10,in=3x32x32", &cfg).unwrap();
        let acc = |mm: &mut wmlab::model::ClassifierModel, ds: &wmlab::data::LabeledDataset| {
            let idx: Vec<usize> = (0..ds.len()).collect();
            let preds = argmax_rows(&mm.logits(&to_unit_batch(ds, &idx)));
            preds.iter().zip(&ds.labels).filter(|(p, y)| *p == *y).count() as f32 / ds.len() as f32
        };
        let pp = acc(&mut m, &bundle.pros);
        let pc = acc(&mut m, &bundle.cons);
        println!("clean seed {}: phi_pros {pp:.2} phi_cons {pc:.2} phi {:.2}", cfg.seed, pp - pc);
    }
}

// measure how often independent clean models agree with the reference's own
// (adversarial) prediction on bundle pros/cons — the stray false-positive
// rate under cross-labeling
fn crosslab(){
    let dir = std::env::args().nth(1).unwrap();
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let mut reference = wmlab::checkpoint::load_classifier(std::path::Path::new(&format!("{dir}/reference.ckpt"))).unwrap();
    let train = shapes10(600, 0, Split::Train);
    let preds_of = |m: &mut wmlab::model::ClassifierModel, ds: &wmlab::data::LabeledDataset| -> Vec<usize> {
        let idx: Vec<usize> = (0..ds.len()).collect();
        argmax_rows(&m.logits(&to_unit_batch(ds, &idx)))
    };
    let tp = preds_of(&mut reference, &bundle.pros);
    let tc = preds_of(&mut reference, &bundle.cons);
    println!("pros: visual {:?} ref-pred {:?}", &bundle.pros.labels, tp);
    println!("cons: visual {:?} ref-pred {:?}", &bundle.cons.labels, tc);
    for i in 0..5u64 {
        let cfg = wmlab::model::TrainConfig { epochs: 12, batch_size: 64, lr: 2e-3, weight_decay: 1e-5, seed: 9000 + 17 * i };
        let mut m = wmlab::model::train_erm(&train, "smallresnet:base=8,k=10,in=3x32x32", &cfg).unwrap();
        let pp = preds_of(&mut m, &bundle.pros);
        let pc = preds_of(&mut m, &bundle.cons);
        let ap = pp.iter().zip(&tp).filter(|(a, b)| *a == *b).count();
        let ac = pc.iter().zip(&tc).filter(|(a, b)| *a == *b).count();
        println!("clean seed {}: pros agree-with-ref {ap}/10 cons agree {ac}/10", cfg.seed);
    }
}

// per-image recognition counts across 5 independently trained clean models,
// for pros, cons, and the reserve front: is recognition bimodal per image?
fn perimage(){
    let dir = std::env::args().nth(1).unwrap();
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let train = shapes10(600, 0, Split::Train);
    let mut models = Vec::new();
    for i in 0..5u64 {
        let cfg = wmlab::model::TrainConfig { epochs: 12, batch_size: 64, lr: 2e-3, weight_decay: 1e-5, seed: 9000 + 17 * i };
        models.push(wmlab::model::train_erm(&train, "smallresnet:base=8,k=10,in=3x32x32", &cfg).unwrap());
    }
    for (name, ds) in [("pros", &bundle.pros), ("cons", &bundle.cons), ("reserve", &bundle.reserve)] {
        let take = ds.len().min(120);
        let idx: Vec<usize> = (0..take).collect();
        let x = to_unit_batch(ds, &idx);
        let mut counts = vec![0usize; take];
        for m in models.iter_mut() {
            let preds = argmax_rows(&m.logits(&x));
            for i in 0..take { if preds[i] == ds.labels[i] { counts[i] += 1; } }
        }
        println!("{name}: recognition counts (of 5) {:?}", counts);
    }
}

fn main() {
    if std::env::var("PERIMAGE").is_ok() { return perimage(); }
    if std::env::var("CROSSLAB").is_ok() { return crosslab(); }
    if std::env::var("PANEL").is_ok() { return panel(); }
    if std::env::var("PIXNN").is_ok() { return pixel_nn(); }
    let dir = std::env::args().nth(1).unwrap();
    let blocks: usize = std::env::args().nth(2).unwrap_or("3".into()).parse().unwrap();
    let mut victim = if std::env::var("REFMODEL").is_ok() {
        wmlab::embed::WatermarkedModel {
            model: wmlab::checkpoint::load_classifier(std::path::Path::new(&format!("{dir}/reference.ckpt"))).unwrap(),
            bundle_hash: String::new(), gamma_v: 1.0, config_hash: String::new(), pros_curve: vec![],
        }
    } else {
        load_watermarked(std::path::Path::new(&format!("{dir}/victim.ckpt"))).unwrap()
    };
    let bundle = load_bundle(std::path::Path::new(&format!("{dir}/bundle.wmb"))).unwrap();
    let train = shapes10(600, 0, Split::Train);

    let all: Vec<usize> = (0..train.len()).collect();
    let x = to_unit_batch(&train, &all);
    let feats = victim.model.net.truncated_features(&x, blocks);
    let preds = argmax_rows(&victim.model.net.forward(&x));

    let idx: Vec<usize> = (0..bundle.pros.len()).collect();
    let xp = to_unit_batch(&bundle.pros, &idx);
    let fp = victim.model.net.truncated_features(&xp, blocks);
    let pp = argmax_rows(&victim.model.net.forward(&xp));

    let d = feats.dim().1;
    // per-class centroid and mean radius
    let k = 10usize;
    let mut cent = Array2::<f32>::zeros((k, d));
    let mut cnt = vec![0usize; k];
    for (i, &c) in preds.iter().enumerate() {
        for j in 0..d {
            cent[[c, j]] += feats[[i, j]];
        }
        cnt[c] += 1;
    }
    for c in 0..k {
        for j in 0..d {
            cent[[c, j]] /= cnt[c].max(1) as f32;
        }
    }
    let dist = |row: ndarray::ArrayView1<f32>, c: usize| -> f32 {
        row.iter().zip(cent.row(c)).map(|(a, b)| (a - b).powi(2)).sum::<f32>().sqrt()
    };
    let mut mean_rad = vec![0.0f32; k];
    for (i, &c) in preds.iter().enumerate() {
        mean_rad[c] += dist(feats.row(i), c);
    }
    for c in 0..k {
        mean_rad[c] /= cnt[c].max(1) as f32;
    }
    println!("class counts {cnt:?}");
    println!("mean radii {:?}", mean_rad.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    for i in 0..bundle.pros.len() {
        let c = pp[i];
        println!(
            "pro {i}: label {} pred {} dist-to-pred-centroid {:.2} (class mean radius {:.2}, ratio {:.2})",
            bundle.pros.labels[i],
            c,
            dist(fp.row(i), c),
            mean_rad[c],
            dist(fp.row(i), c) / mean_rad[c].max(1e-6)
        );
    }
}

