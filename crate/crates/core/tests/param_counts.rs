mod common;

use groundprobe::probe::{param_count, Probe, ProbeConfig};
use proptest::prelude::*;

use common::{count_by_hand, PARAM_TABLE};

#[test]
fn published_table_reproduced_exactly() {
    for &(widths, d_h, expected) in PARAM_TABLE {
        assert_eq!(param_count(widths, d_h), expected, "{widths:?} at d_h={d_h}");
    }
}

#[test]
fn fixed_head_closed_form() {
    for d_h in [2560, 4096, 5120, 5376] {
        assert_eq!(param_count(&[256, 128, 64], d_h), 256 * d_h as u64 + 41_473);
    }
}

#[test]
fn search_space_grid_agrees_with_hand_count() {
    let layers: [&[usize]; 8] = [&[], &[256], &[512], &[128, 64], &[256, 128], &[512, 256], &[1024, 512], &[1024, 512, 256]];
    for d_h in [2560, 4096, 5120, 5376] {
        for w in layers {
            assert_eq!(param_count(w, d_h), count_by_hand(w, d_h));
        }
    }
}

proptest! {
    #[test]
    fn initialized_probe_has_counted_parameters(
        d_h in 1usize..40,
        widths in proptest::collection::vec(1usize..12, 0..4),
    ) {
        let config = ProbeConfig { hidden_widths: widths.clone(), ..ProbeConfig::default() };
        let probe = Probe::init(&config, d_h).unwrap();
        prop_assert_eq!(probe.num_params(), param_count(&widths, d_h));
        prop_assert_eq!(param_count(&widths, d_h), count_by_hand(&widths, d_h));
    }
}
