use aadseg::dataset::{load_manifest, sample_episode, Split};
use aadseg::encoder::scaled_mask_pyramid;
use aadseg::model::{AadModel, ModelConfig};
use aadseg::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let index = load_manifest(std::path::Path::new("/tmp/aad-data")).unwrap();
    let model = AadModel::init(ModelConfig::default(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ep = sample_episode(&index, Split::Train, 1, &mut rng).unwrap();

    // self-matching: use the SUPPORT image as the query too
    let g = Graph::new();
    let sf = model.encode_image(&g, &model.params, &ep.supports[0].0).unwrap();
    let sm = scaled_mask_pyramid(&ep.supports[0].1).unwrap();

    let f8 = &sf.s8; // [32, 8, 8]
    let c = f8.shape()[0];
    let hw = 64;
    // feature norms per cell
    let mut norms = vec![0.0f64; hw];
    for p in 0..hw {
        let mut s = 0.0;
        for ch in 0..c { let v = f8.data()[ch * hw + p]; s += v * v; }
        norms[p] = s.sqrt();
    }
    let m8 = sm.s8.data();
    let fg_cells: Vec<usize> = (0..hw).filter(|&p| m8[p] > 0.5).collect();
    let bg_cells: Vec<usize> = (0..hw).filter(|&p| m8[p] <= 0.1).collect();
    let mean = |cells: &[usize], vals: &[f64]| cells.iter().map(|&p| vals[p]).sum::<f64>() / cells.len() as f64;
    println!("cells: fg {} bg {}", fg_cells.len(), bg_cells.len());
    println!("feature norms: fg {:.3}  bg {:.3}", mean(&fg_cells, &norms), mean(&bg_cells, &norms));

    // attention logits structure (self-match)
    let rows = g.to_rows(f8).unwrap();
    let logits = g.scale(&g.matmul_nt(&rows, &rows).unwrap(), 1.0 / (c as f64).sqrt()).unwrap();
    let attn = g.softmax_lastdim(&logits).unwrap();
    // mass that fg/bg query cells place on support-fg keys
    let mass_on_fg = |qcells: &[usize]| -> f64 {
        let mut acc = 0.0;
        for &i in qcells {
            let row = &attn.data()[i * hw..(i + 1) * hw];
            acc += fg_cells.iter().map(|&j| row[j]).sum::<f64>();
        }
        acc / qcells.len() as f64
    };
    println!("attention mass on support-fg keys: from fg {:.3}  from bg {:.3}", mass_on_fg(&fg_cells), mass_on_fg(&bg_cells));
    // raw logit means
    let ld = logits.data();
    let pair_mean = |qs: &[usize], ks: &[usize]| -> f64 {
        let mut acc = 0.0;
        for &i in qs { for &j in ks { acc += ld[i * hw + j]; } }
        acc / (qs.len() * ks.len()) as f64
    };
    println!("logit means: fg->fg {:.3} fg->bg {:.3} bg->fg {:.3} bg->bg {:.3}",
        pair_mean(&fg_cells, &fg_cells), pair_mean(&fg_cells, &bg_cells),
        pair_mean(&bg_cells, &fg_cells), pair_mean(&bg_cells, &bg_cells));
    let m_result = g.matmul(&attn, &g.reshape(&Tensor::new(vec![8,8], m8.to_vec()).unwrap(), vec![64,1]).unwrap()).unwrap();
    println!("self-match M': fg {:.3} bg {:.3}", mean(&fg_cells, m_result.data()), mean(&bg_cells, m_result.data()));
}
