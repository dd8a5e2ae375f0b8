use cgsr::explain::{explain, explain_id};
use cgsr::model::{GraphKind, SessionParam};
use cgsr::{CausalOptions, Cgsr, ExplainError, GraphSet, ModelConfig, Session, Vocabulary};

fn corpus() -> Vec<Session> {
    [vec![0, 1, 2, 3], vec![1, 2, 4], vec![0, 3, 2, 4], vec![4, 5, 1]]
        .into_iter()
        .enumerate()
        .map(|(k, s)| Session::new(format!("s{k}"), s))
        .collect()
}

fn model(cfg: ModelConfig) -> Cgsr {
    let graphs = GraphSet::build(&corpus(), 6, CausalOptions::default()).unwrap();
    Cgsr::new(cfg, &graphs).unwrap()
}

#[test]
fn session_level_scores_match_the_scorer_exactly() {
    let m = model(ModelConfig {
        dim: 3,
        heads: 2,
        ..Default::default()
    });
    let p = m.init_params(11).unwrap();
    let enc = m.encode_items(&p).unwrap();
    let s = Session::new("q", vec![0, 3, 2]);
    let sc = m.score_session(&p, &enc, &s.items).unwrap();
    for item in 0..6 {
        let r = explain(&m, &p, &enc, &s, item).unwrap();
        assert_eq!(r.total.to_bits(), sc.total[item].to_bits());
        assert_eq!(r.causality, Some(sc.causality.as_ref().unwrap()[item]));
        assert_eq!(r.correlation, Some(sc.correlation.as_ref().unwrap()[item]));
        assert_eq!(r.preference, Some(sc.preference.as_ref().unwrap()[item]));
        assert_eq!(r.rows.len(), 3);
        let mut ranks: Vec<usize> = r.rows.iter().map(|x| x.causality_rank.unwrap()).collect();
        ranks.sort_unstable();
        assert_eq!(ranks, [1, 2, 3]);
    }
}

#[test]
fn one_dimensional_attributions() {
    let m = model(ModelConfig {
        dim: 1,
        heads: 1,
        ..Default::default()
    });
    let mut p = m.init_params(4).unwrap();
    p.set_scalar(p.layout.gamma(0), 0.0);
    let enc = m.encode_items(&p).unwrap();
    let s = Session::new("q", vec![1, 4]);
    let target = 2;
    let r = explain(&m, &p, &enc, &s, target).unwrap();
    let w6_sum = |k| p.get(p.layout.session(k, SessionParam::W6)).data().iter().sum::<f64>();
    let (xc, xe, xr) = (
        enc.cause.as_ref().unwrap(),
        enc.effect.as_ref().unwrap(),
        enc.correlation.as_ref().unwrap(),
    );
    for row in &r.rows {
        let i = row.item;
        // with γ1 = 0 only the forward causal direction remains
        let ca = w6_sum(GraphKind::Cause) * xc.get(i, 0) * xe.get(target, 0);
        let cr = w6_sum(GraphKind::Correlation) * xr.get(i, 0) * xr.get(target, 0);
        assert!((row.causality.unwrap() - ca).abs() <= 1e-15 * (1.0 + ca.abs()));
        assert!((row.correlation.unwrap() - cr).abs() <= 1e-15 * (1.0 + cr.abs()));
    }
}

#[test]
fn single_item_session() {
    let m = model(ModelConfig {
        dim: 2,
        heads: 1,
        ..Default::default()
    });
    let p = m.init_params(0).unwrap();
    let enc = m.encode_items(&p).unwrap();
    let r = explain(&m, &p, &enc, &Session::new("one", vec![5]), 1).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.rows[0].causality_rank, Some(1));
    assert_eq!(r.rows[0].correlation_rank, Some(1));
    assert!((1..=6).contains(&r.catalog_rank));
}

#[test]
fn text_report_with_a_disabled_term() {
    let m = model(ModelConfig {
        dim: 2,
        heads: 1,
        use_correlation: false,
        ..Default::default()
    });
    let p = m.init_params(0).unwrap();
    let enc = m.encode_items(&p).unwrap();
    let vocab = Vocabulary::from_ids(["a", "b", "c/d", "e", "f", "g"]);
    let s = Session::new("sess 1", vec![0, 1]);
    let r = explain_id(&m, &p, &enc, &vocab, &s, "c/d").unwrap();
    assert_eq!(r.item, 2);
    let mut buf = Vec::new();
    r.write_text(&mut buf, Some(&vocab)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(
        text.starts_with("session = sess 1\nitem = c/d\nitem_index = 2\n"),
        "{text}"
    );
    assert!(text.contains("score_r = NA\n"));
    assert!(text.contains("\nposition,item,score_ca,rank_ca,score_r,rank_r\n0,a,"));
    assert!(text.trim_end().ends_with(",NA,NA"));
    assert_eq!(r.file_name(Some(&vocab)), "sess 1__c_d.txt");
    assert_eq!(r.file_name(None), "sess 1__2.txt");

    assert!(matches!(
        explain_id(&m, &p, &enc, &vocab, &s, "zzz"),
        Err(ExplainError::UnknownItem(id)) if id == "zzz"
    ));
    assert!(explain(&m, &p, &enc, &s, 6).is_err());
}
