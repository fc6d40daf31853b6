use aadseg::correlation::correlation_forward;
use aadseg::dataset::{load_manifest, sample_episode, Split};
use aadseg::encoder::scaled_mask_pyramid;
use aadseg::tensor::Graph;
use aadseg::trainer::{load_model_checkpoint, RunConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn art(label: &str, data: &[f64], w: usize) {
    println!("-- {label}");
    for row in data.chunks(w) {
        let line: String = row
            .iter()
            .map(|&v| match (v * 10.0) as i64 { i64::MIN..=0 => '.', 1..=2 => ':', 3..=5 => 'o', 6..=8 => 'O', _ => '#' })
            .collect();
        println!("   {line}");
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = RunConfig {
        dataset_root: "/tmp/aad-data".into(),
        enable_cl: true,
        enable_aad: false,
        carry: args[2].parse().unwrap(),
        ..RunConfig::default()
    };
    let index = load_manifest(&cfg.dataset_root).unwrap();
    let (model, _, _) = load_model_checkpoint(std::path::Path::new(&args[1]), &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..3 {
        let ep = sample_episode(&index, Split::Train, 1, &mut rng).unwrap();
        let g = Graph::new();
        let sf = model.encode_image(&g, &model.params, &ep.supports[0].0).unwrap();
        let qf = model.encode_image(&g, &model.params, &ep.query_image).unwrap();
        let sm = scaled_mask_pyramid(&ep.supports[0].1).unwrap();
        let coarse = correlation_forward(&g, &sf, &qf, &sm).unwrap();
        let qm = scaled_mask_pyramid(&ep.query_mask).unwrap();
        println!("== episode {i} class {} tags {:?}", ep.class, ep.query_tags);
        art("true query mask @1/8", qm.s8.data(), 8);
        art("coarse mask M' @1/8", coarse.s8.data(), 8);
    }
}
