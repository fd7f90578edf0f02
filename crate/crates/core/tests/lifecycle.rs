use skillcast::datasets::{decode_checkpoint, encode_checkpoint, extract_training_samples, read_matches, write_matches};
use skillcast::mmrnet::{train, Predictor};
use skillcast::pipeline::ReproConfig;
use skillcast::simworld::{run_cold_start_cohort, MmrSource, Track};

#[test]
fn simulate_label_train_serve() {
    let cfg = ReproConfig::smoke();
    let mut sim = cfg.sim.clone();
    sim.population_size = 120;
    let (records, players) = run_cold_start_cohort(&sim, 600, MmrSource::Ts2, None).unwrap();
    assert_eq!(records.len(), 600);
    assert_eq!(players.iter().map(|p| p.games_played as usize).sum::<usize>(), 600 * 2 * sim.team_size);

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_matches(dir.path(), &records, &sim).unwrap();
    assert_eq!(manifest.record_count, 600);
    let (_, back) = read_matches(dir.path()).unwrap();
    assert_eq!(back, records);

    let ex = extract_training_samples(&records, Track::Ts2, sim.label_k, sim.cold_start_c, &sim.rating);
    assert!(!ex.samples.is_empty());
    assert!(ex.samples.iter().all(|s| s.game_index < sim.cold_start_c as u32 && s.label.is_finite()));

    let out = train(&ex.samples, cfg.model.clone(), &cfg.hyper, sim.label_k, Track::Ts2).unwrap();
    assert_eq!(out.curve.len(), cfg.hyper.epochs);
    let bytes = encode_checkpoint(&out.checkpoint).unwrap();
    let ckpt = decode_checkpoint(&bytes).unwrap();
    assert_eq!(encode_checkpoint(&ckpt).unwrap(), bytes);

    let predictor = Predictor::new(ckpt).unwrap();
    let p = predictor.predict(&ex.samples[0].snapshots).unwrap();
    assert!(p.is_finite());

    let (served, _) = run_cold_start_cohort(&sim, 200, MmrSource::QuickSkill, Some(&out.checkpoint)).unwrap();
    assert!(served.iter().flat_map(|m| &m.players).any(|pg| pg.predicted_before.is_some()));
}
