use idcontrast_demo::{loss_sweep, schedule_curves, ToyRun};

#[test]
fn sweep_rows_match_the_closed_form_at_the_ends() {
    let rows = loss_sweep(1.0, 2.0, 1.0, 0.0, 1, 0, 3).unwrap();
    assert_eq!(rows.len(), 12);
    // Single labeled key on the anchor: moco = −log(e/(e+e)), id = the same.
    let e = std::f64::consts::E;
    assert!((rows[1] - (2.0f64).ln()).abs() < 1e-12);
    assert!((rows[2] - (2.0f64).ln()).abs() < 1e-12);
    assert!((rows[3] - 3.0 * (2.0f64).ln()).abs() < 1e-12);
    // Key opposite the anchor: similarity −1.
    assert_eq!(rows[8], 180.0);
    assert!((rows[9] - ((e + 1.0 / e) / e).ln()).abs() < 1e-12);
    assert!((rows[10] - ((e + 1.0 / e) / (1.0 / e)).ln()).abs() < 1e-12);
}

#[test]
fn id_loss_rises_as_the_labeled_keys_move_away() {
    let rows = loss_sweep(0.2, 2.0, 1.0, 20.0, 3, 8, 19).unwrap();
    let id: Vec<f64> = rows.chunks(4).map(|r| r[2]).collect();
    assert!(id.windows(2).all(|p| p[1] >= p[0] - 1e-12), "{id:?}");
    assert!(loss_sweep(0.0, 2.0, 1.0, 0.0, 1, 1, 3).is_err());
}

#[test]
fn schedule_rows() {
    let rows = schedule_curves(2.0, 4, 8, 0.1).unwrap();
    assert_eq!(rows.len(), 27);
    let coeff: Vec<f64> = rows.chunks(3).map(|r| r[1]).collect();
    assert_eq!(coeff, [2.0, 1.5, 1.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    assert_eq!(rows[2], 0.1);
    assert_eq!(rows[26], 0.0);
    let flat = schedule_curves(2.0, -1, 3, 0.1).unwrap();
    assert!(flat.chunks(3).all(|r| r[1] == 2.0));
}

#[test]
fn toy_run_trains_epoch_by_epoch() {
    let mut run = ToyRun::create(2.0, 2, 3, 1).unwrap();
    let start = run.point_rows().unwrap();
    assert_eq!(start.len() % 4, 0);
    assert_eq!(start.len() / 4, 60 + 240);
    for row in start.chunks(4) {
        assert!((row[0].hypot(row[1]) - 1.0).abs() < 1e-9);
    }
    let mut epochs = 0;
    while run.advance().unwrap() {
        epochs += 1;
    }
    assert_eq!(epochs, 3);
    assert_eq!(run.epoch_count(), 3);
    assert_eq!(run.history_rows().len(), 3 * 6);
    assert_ne!(run.point_rows().unwrap(), start);
    assert!((0.0..=1.0).contains(&run.latest_knn5()));
}
