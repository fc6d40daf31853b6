use aadseg::dataset::{load_manifest, sample_episode, Split};
use aadseg::encoder::scaled_mask_pyramid;
use aadseg::correlation::correlation_forward;
use aadseg::model::{AadModel, ModelConfig};
use aadseg::tensor::Graph;
use aadseg::trainer::{load_model_checkpoint, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn contrast(model: &AadModel, index: &aadseg::dataset::DatasetIndex) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut fg_acc, mut bg_acc) = (0.0, 0.0);
    let n = 40;
    for _ in 0..n {
        let ep = sample_episode(index, Split::Train, 1, &mut rng).unwrap();
        let g = Graph::new();
        let sf = model.encode_image(&g, &model.params, &ep.supports[0].0).unwrap();
        let qf = model.encode_image(&g, &model.params, &ep.query_image).unwrap();
        let sm = scaled_mask_pyramid(&ep.supports[0].1).unwrap();
        let coarse = correlation_forward(&g, &sf, &qf, &sm).unwrap();
        let qm = scaled_mask_pyramid(&ep.query_mask).unwrap();
        let m = coarse.s8.data();
        let gt = qm.s8.data();
        let (mut fs, mut fn_, mut bs, mut bn) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..m.len() {
            if gt[i] > 0.5 { fs += m[i]; fn_ += 1.0; } else { bs += m[i]; bn += 1.0; }
        }
        if fn_ > 0.0 { fg_acc += fs / fn_; }
        bg_acc += bs / bn;
    }
    (fg_acc / n as f64, bg_acc / n as f64)
}

fn main() {
    let index = load_manifest(std::path::Path::new("/tmp/aad-data")).unwrap();
    let fresh = AadModel::init(ModelConfig::default(), 1).unwrap();
    let (fg, bg) = contrast(&fresh, &index);
    println!("init    : M'8 fg-cell mean {fg:.4}  bg-cell mean {bg:.4}  ratio {:.2}", fg / bg.max(1e-9));
    let cfg = RunConfig { dataset_root: "/tmp/aad-data".into(), batch_episodes: 1, ..RunConfig::default() };
    let (trained, _, _) = load_model_checkpoint(std::path::Path::new("/tmp/b1-aad/checkpoint.ckpt"), &cfg).unwrap();
    let (fg, bg) = contrast(&trained, &index);
    println!("trained : M'8 fg-cell mean {fg:.4}  bg-cell mean {bg:.4}  ratio {:.2}", fg / bg.max(1e-9));
}
