use ltkd_web::{decay_json, decompose_json, parse_groups, parse_numbers, rebalance_json};

#[test]
fn numbers_accept_commas_and_spaces() {
    assert_eq!(parse_numbers("1, 2.5 -3\n4").unwrap(), vec![1.0, 2.5, -3.0, 4.0]);
    assert!(parse_numbers("1, x").is_err());
}

#[test]
fn group_labels_must_cover_every_class() {
    assert!(parse_groups("HMT", 3).is_ok());
    assert!(parse_groups("HM", 3).is_err());
    assert!(parse_groups("HMX", 3).is_err());
    assert_eq!(parse_groups("H T H", 3).unwrap().num_groups(), 2);
}

#[test]
fn decomposition_matches_kd() {
    let v = decompose_json("3 1 0.5 -1 -2 0", "0.2 1 -0.3 0.4 2 1", "HHMMTT", 2.0).unwrap();
    assert!(v["residual"].as_f64().unwrap() < 1e-12);
    assert!(v["kd"].as_f64().unwrap() > 0.0);
    assert_eq!(v["intra_kl"].as_array().unwrap().len(), 3);
}

#[test]
fn rebalance_equalizes_and_normalizes() {
    let v = rebalance_json("3 2 1 0 -1 -2", "HHMMTT", "30, 20, 10", 1.0).unwrap();
    assert!((v["sum"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let scales: Vec<f64> = v["scales"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((scales[0] - 20.0 / 30.0).abs() < 1e-12 && (scales[2] - 2.0).abs() < 1e-12);
    assert!(rebalance_json("1 2 3", "HMT", "1 2", 1.0).is_err());
}

#[test]
fn decay_profile_has_expected_extremes() {
    let v = decay_json(100, 500, 100.0).unwrap();
    let counts = v["counts"].as_array().unwrap();
    assert_eq!(counts[0], 500);
    assert_eq!(counts[99], 5);
    assert_eq!(v["groups"].as_str().unwrap().len(), 100);
    assert!(decay_json(10, 500, 0.5).is_err());
}
