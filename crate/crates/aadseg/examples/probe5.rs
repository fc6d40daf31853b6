use aadseg::correlation::correlation_forward;
use aadseg::dataset::{load_manifest, sample_episode, Split};
use aadseg::encoder::{scaled_mask_pyramid, Encoder, EncoderConfig, image_tensor};
use aadseg::tensor::{Graph, ParamSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let index = load_manifest(std::path::Path::new("/tmp/aad-data")).unwrap();
    for carry in [1.0, 1.2, 1.4, 1.7, 2.0] {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::init(&mut params, &mut rng, EncoderConfig { carry, ..EncoderConfig::default() }).unwrap();

        let mut erng = ChaCha8Rng::seed_from_u64(5);
        let (mut self_fg, mut self_bg, mut x_fg, mut x_bg) = (0.0, 0.0, 0.0, 0.0);
        let n = 25;
        for _ in 0..n {
            let ep = sample_episode(&index, Split::Train, 1, &mut erng).unwrap();
            let g = Graph::new();
            let sf = enc.encode(&g, &params, &image_tensor(&ep.supports[0].0).unwrap()).unwrap();
            let sm = scaled_mask_pyramid(&ep.supports[0].1).unwrap();
            // self-match: support vs itself
            let coarse = correlation_forward(&g, &sf, &sf, &sm).unwrap();
            let m = coarse.s8.data();
            let gt = sm.s8.data();
            let split_means = |m: &[f64], gt: &[f64]| {
                let (mut fs, mut fc, mut bs, mut bc) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
                for i in 0..m.len() {
                    if gt[i] > 0.5 { fs += m[i]; fc += 1.0 } else if gt[i] < 0.1 { bs += m[i]; bc += 1.0 }
                }
                (fs / fc.max(1.0), bs / bc.max(1.0))
            };
            let (f, b) = split_means(m, gt);
            self_fg += f; self_bg += b;
            // cross: true query
            let qf = enc.encode(&g, &params, &image_tensor(&ep.query_image).unwrap()).unwrap();
            let coarse = correlation_forward(&g, &sf, &qf, &sm).unwrap();
            let qm = scaled_mask_pyramid(&ep.query_mask).unwrap();
            let (f, b) = split_means(coarse.s8.data(), qm.s8.data());
            x_fg += f; x_bg += b;
        }
        println!(
            "carry {carry:.2}: self fg {:.3} bg {:.3} (gap {:+.3}) | query fg {:.3} bg {:.3} (gap {:+.3})",
            self_fg / n as f64, self_bg / n as f64, (self_fg - self_bg) / n as f64,
            x_fg / n as f64, x_bg / n as f64, (x_fg - x_bg) / n as f64
        );
    }
}
