use wmlab::data::{shapes10, Split};
use wmlab::model::{train_erm, evaluate_accuracy, TrainConfig};
fn main() {
    let train = shapes10(2000, 1, Split::Train);
    let val = shapes10(500, 1, Split::Val);
    let t0 = std::time::Instant::now();
    let cfg = TrainConfig { epochs: 2, ..Default::default() };
    let mut m = train_erm(&train, "smallresnet:base=16,k=10,in=3x32x32", &cfg).unwrap();
    println!("train 2 epochs: {:?}, train acc {}", t0.elapsed(), m.train_accuracy);
    let t1 = std::time::Instant::now();
    let rec = evaluate_accuracy(&mut m, &val).unwrap();
    println!("eval: {:?}, val acc {}", t1.elapsed(), rec.accuracy);
}
