use cgsr::checkpoint::{Checkpoint, CheckpointError};
use cgsr::model::init_params;
use cgsr::trainer::train;
use cgsr::{ModelConfig, Session, TrainConfig};
use proptest::prelude::*;

#[test]
fn trained_model_survives_a_round_trip() {
    let s: Vec<Session> = [vec![0, 1, 2], vec![1, 2, 3], vec![2, 3, 0], vec![3, 0, 1]]
        .into_iter()
        .enumerate()
        .map(|(k, v)| Session::new(format!("s{k}"), v))
        .collect();
    let cfg = TrainConfig {
        model: ModelConfig {
            dim: 3,
            heads: 2,
            ..Default::default()
        },
        epochs: 2,
        val_fraction: 0.0,
        ..Default::default()
    };
    let (model, out) = train(&s, 4, &cfg).unwrap();
    let bytes = cfg.checkpoint(out.params.clone()).to_bytes();
    let back = Checkpoint::read(&bytes[..]).unwrap();
    assert_eq!(back.params, out.params);
    assert_eq!(TrainConfig::from_checkpoint(&back).unwrap(), cfg);
    let enc = model.encode_items(&back.params).unwrap();
    let a = model.score_session(&back.params, &enc, &[0, 1]).unwrap();
    let enc0 = model.encode_items(&out.params).unwrap();
    let b = model.score_session(&out.params, &enc0, &[0, 1]).unwrap();
    assert_eq!(a.total, b.total);
}

#[test]
fn header_problems_are_reported() {
    let good = Checkpoint::new(init_params(2, 1, 1, 0).unwrap()).to_bytes();
    let text_end = good.windows(4).position(|w| w == b"end\n").unwrap();
    let header = std::str::from_utf8(&good[..text_end]).unwrap();

    let swapped = header.replacen("param embedding 2 1", "param embedding 2 2", 1);
    let mut bad = swapped.into_bytes();
    bad.extend_from_slice(&good[text_end..]);
    assert!(Checkpoint::read(&bad[..]).is_err());

    let junk = b"CGSR1\nwhat is this\nend\n";
    assert!(matches!(
        Checkpoint::read(&junk[..]),
        Err(CheckpointError::Header { line: 2, .. })
    ));
    assert!(matches!(
        Checkpoint::read(&b"CGSR1\n"[..]),
        Err(CheckpointError::Header { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_layout_round_trips(n in 1usize..6, d in 1usize..4, h in 1usize..3, seed in any::<u64>()) {
        let mut ck = Checkpoint::new(init_params(n, d, h, seed).unwrap());
        ck.meta.insert("seed".into(), seed.to_string());
        let bytes = ck.to_bytes();
        let back = Checkpoint::read(&bytes[..]).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, ck);
    }
}
