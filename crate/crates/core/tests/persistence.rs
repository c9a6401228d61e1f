use sweepguide_core::dataio::{load_checkpoint, load_sweep, save_sweep, DataError};
use sweepguide_core::models::{BackboneConfig, Model, Topology};
use sweepguide_core::phantom::{generate_cohort, CohortConfig, PhantomConfig};

#[test]
fn sweeps_round_trip_bit_exactly() {
    let cohort = generate_cohort(&CohortConfig {
        n_patients: 2,
        volumes_per_patient: 1,
        base: PhantomConfig::default(),
        ..CohortConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (i, s) in cohort.iter().enumerate() {
        let d = dir.path().join(format!("v{i}"));
        save_sweep(&d, s).unwrap();
        let back = load_sweep(&d).unwrap();
        assert_eq!(&back, s);
        let bits = |v: &sweepguide_core::phantom::SweepVolume| -> Vec<u32> {
            v.frames.iter().flat_map(|f| f.image.iter().map(|p| p.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(s));
    }
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let dir = tempfile::tempdir().unwrap();
    for topology in [Topology::Single, Topology::Sequence] {
        let d = dir.path().join(topology.as_str());
        let mut model = Model::new(topology, BackboneConfig::default(), 5).unwrap();
        model.save(&d, serde_json::json!({"note": "test"})).unwrap();
        let (loaded, manifest) = Model::load(&d).unwrap();
        assert_eq!(manifest.training["note"], "test");
        assert_eq!(loaded.topology(), topology);
        for id in model.store().ids() {
            let a: Vec<u64> = model.store().value(id).data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = loaded.store().value(id).data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{}", model.store().name(id));
        }

        let payload = d.join("params.bin");
        let mut bytes = std::fs::read(&payload).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&payload, &bytes).unwrap();
        let err = load_checkpoint(&d).unwrap_err();
        assert!(matches!(err, DataError::Corrupt { .. }), "{err}");
        assert!(err.to_string().contains("checksum mismatch"));

        bytes.truncate(bytes.len() - 8);
        std::fs::write(&payload, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&d), Err(DataError::Truncated { .. })));
    }
}
