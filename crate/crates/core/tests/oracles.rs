use lstcn_core::oracle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn ops_match_loop_implementations() {
    for (k, (name, case)) in oracle::suite().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(101 + k as u64);
        for i in 0..120 {
            if let Err(e) = case(&mut rng, i) {
                panic!("{name} instance {i}: {e}");
            }
        }
    }
}
