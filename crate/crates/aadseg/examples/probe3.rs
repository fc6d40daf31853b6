use aadseg::dataset::{load_manifest, Split};

fn main() {
    let index = load_manifest(std::path::Path::new("/tmp/aad-data")).unwrap();
    for split in [Split::Train, Split::Test] {
        let classes = index.split(split);
        let mut with_distractor = 0usize;
        let mut total = 0usize;
        for c in classes {
            for q in &c.queries {
                total += 1;
                let dil = q.mask.dilate(3);
                let bright_outside = q
                    .image
                    .data
                    .iter()
                    .zip(&dil.data)
                    .filter(|(&v, &m)| v > 0.81 && m == 0)
                    .count();
                if bright_outside >= 20 {
                    with_distractor += 1;
                }
            }
        }
        println!("{:?}: {}/{} queries show a distractor blob", split, with_distractor, total);
    }
}
