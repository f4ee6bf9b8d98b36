use lstcn_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn shape_and_perm() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, u64)> {
    proptest::collection::vec(1usize..5, 1..5).prop_flat_map(|shape| {
        let rank = shape.len();
        (
            Just(shape),
            Just((0..rank).collect::<Vec<_>>()),
            any::<u64>(),
        )
    })
}

proptest! {
    #[test]
    fn permute_then_inverse_is_identity((shape, mut perm, seed) in shape_and_perm()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let y = x.permute(&perm).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            prop_assert_eq!(y.dim(i), shape[p]);
        }
        prop_assert_eq!(y.permute(&inv).unwrap(), x);
    }

    #[test]
    fn reshape_round_trip((shape, _, seed) in shape_and_perm()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let flat = x.reshape(&[x.numel()]).unwrap();
        prop_assert_eq!(flat.data(), x.data());
        prop_assert_eq!(flat.reshape(&shape).unwrap(), x);
    }

    #[test]
    fn tape_permute_gradient_is_inverse_permutation((shape, mut perm, seed) in shape_and_perm()) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        perm.shuffle(&mut rng);
        let x0 = Tensor::<f64>::randn(&shape, 1.0, &mut rng);
        let w0 = Tensor::<f64>::randn(x0.permute(&perm).unwrap().shape(), 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let w = tape.constant(w0.clone());
        let y = tape.permute(x, &perm).unwrap();
        let yw = tape.mul(y, w).unwrap();
        let s = tape.sum(yw).unwrap();
        let g = tape.backward(s).unwrap();
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        prop_assert_eq!(g.get(x).unwrap(), &w0.permute(&inv).unwrap());
    }
}

#[test]
fn reshape_rejects_wrong_size() {
    let x = Tensor::<f64>::zeros(&[2, 3]);
    assert!(x.reshape(&[4]).is_err());
}
