//! Randomised invariants: exact cost-model identities and bit-exact layout
//! round trips.

use ddt_core::blocks::{partition_global, partition_local, unpartition_global, unpartition_local};
use ddt_core::cost::{
    cost_branch, cost_branch_by_patches, cost_conv, cost_da, cost_dda, cost_dda_closed_form,
    cost_subparts, CostQuery,
};
use ddt_core::nn::{pixel_shuffle, pixel_unshuffle};
use ddt_core::{Tape, Tensor};
use proptest::prelude::*;

fn query() -> impl Strategy<Value = CostQuery> {
    (1u64..2048, 1u64..2048, 1u64..1024, 1u64..64, 1u64..16)
        .prop_map(|(h, w, c, p, gamma)| CostQuery { h, w, c, p, gamma })
}

proptest! {
    #[test]
    fn dual_branch_is_two_convs_plus_two_branches(q in query()) {
        let two = num_rational::BigRational::from_integer(2.into());
        prop_assert_eq!(
            cost_dda_closed_form(q),
            &two * cost_conv(q) + &two * cost_branch(q)
        );
        prop_assert_eq!(cost_dda(q).total(), cost_dda_closed_form(q));
    }

    #[test]
    fn attention_equals_its_subparts(q in query()) {
        prop_assert_eq!(cost_da(q), cost_subparts(q).sum());
    }

    #[test]
    fn branch_equals_sum_over_patches(q in query(), ph in 1u64..64, pw in 1u64..64) {
        let q = CostQuery { h: q.p * ph, w: q.p * pw, ..q };
        prop_assert_eq!(cost_branch(q), cost_branch_by_patches(q));
    }

    #[test]
    fn branch_cost_is_linear_in_area(q in query(), k in 2u64..8) {
        let scaled = CostQuery { h: q.h * k, ..q };
        let k = num_rational::BigRational::from_integer(k.into());
        prop_assert_eq!(cost_branch(scaled), k * cost_branch(q));
    }

    #[test]
    fn layout_round_trips_are_bit_exact(
        n in 1usize..3, c in 1usize..5, p in 1usize..5, hb in 1usize..4, wb in 1usize..4, seed in any::<u64>()
    ) {
        let (h, w) = (p * hb, p * wb);
        let x = Tensor::<f32>::from_fn(&[n, c, h, w], |i| {
            f32::from_bits((seed as u32 ^ (i as u32).wrapping_mul(2_654_435_761)) & 0x3fff_ffff)
        });
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let local = unpartition_local(partition_local(v, p).unwrap(), h, w).unwrap().value();
        let global = unpartition_global(partition_global(v, p).unwrap(), h, w).unwrap().value();
        let shuffle = pixel_shuffle(pixel_unshuffle(v, p).unwrap(), p).unwrap().value();
        prop_assert_eq!(local.data(), x.data());
        prop_assert_eq!(global.data(), x.data());
        prop_assert_eq!(shuffle.data(), x.data());
    }

    #[test]
    fn softmax_rows_sum_to_one(len in 1usize..40, scale in 0.1f64..1e4, seed in any::<u64>()) {
        let x = Tensor::<f64>::from_fn(&[3, len], |i| {
            let z = (seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 11) as f64;
            (z / (1u64 << 53) as f64 - 0.5) * scale
        });
        let tape = Tape::new();
        let s = tape.constant(x).softmax(1).unwrap().value();
        for row in s.data().chunks(len) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
