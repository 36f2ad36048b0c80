//! Quality-control verdicts and dataset forging with a stand-in encoder.

mod common;

use common::*;
use facerestore::attrenc::AttrEncoder;
use facerestore::flowcore::{VelocityArch, VelocityModel};
use facerestore::flowedit::EditSettings;
use facerestore::forge::{
    forge_dataset, label_attributes, qc_filter, qc_verdict, ForgeReport, Label, QcReason, QcScores, QcThresholds,
    REJECTS_DIR, REPORT_FILE,
};
use facerestore::synthgen::{self, AttrVector, Manifest};
use facerestore::Image;
use proptest::prelude::*;

fn scores(attr_conf: f32, id_sim: f32, percep: f32) -> QcScores {
    QcScores { attr_conf, id_sim, percep }
}

/// An encoder marked as trained; its random weights never saturate.
fn stand_in_encoder() -> AttrEncoder {
    let mut e = AttrEncoder::untrained(micro_encoder_arch(64), 17);
    e.trained = true;
    e
}

fn model() -> VelocityModel {
    VelocityModel::new(VelocityArch { widths: [4, 4, 4], ..VelocityArch::default() }, 2)
}

fn settings() -> EditSettings {
    EditSettings { steps: 4, seed: 3, ..EditSettings::default() }
}

#[test]
fn nine_boundary_cases() {
    let th = QcThresholds::default();
    let cases = [
        (scores(0.59, 0.9, 0.1), QcReason::AttributeWeak),
        (scores(0.60, 0.9, 0.1), QcReason::Kept),
        (scores(0.61, 0.9, 0.1), QcReason::Kept),
        (scores(0.9, 0.49, 0.1), QcReason::IdentityShift),
        (scores(0.9, 0.50, 0.1), QcReason::Kept),
        (scores(0.9, 0.51, 0.1), QcReason::Kept),
        (scores(0.9, 0.9, 0.29), QcReason::Kept),
        (scores(0.9, 0.9, 0.30), QcReason::Kept),
        (scores(0.9, 0.9, 0.31), QcReason::PerceptualDrift),
    ];
    for (s, want) in cases {
        let v = qc_verdict(s, &th);
        assert_eq!(v.reason, want, "{s:?}");
        assert_eq!(v.kept, want == QcReason::Kept);
        assert_eq!(v.scores, s);
    }
    assert_eq!(qc_verdict(scores(0.60, 0.50, 0.30), &th).reason, QcReason::Kept);
    assert_eq!(qc_verdict(scores(0.59, 0.0, 9.0), &th).reason, QcReason::AttributeWeak);
    assert_eq!(qc_verdict(scores(0.9, 0.8, 0.31), &th).reason, QcReason::PerceptualDrift);
}

#[test]
fn label_thresholds_are_strict() {
    assert_eq!(Label::from_conf(0.61), Label::Positive);
    assert_eq!(Label::from_conf(0.60), Label::Unknown);
    assert_eq!(Label::from_conf(0.40), Label::Unknown);
    assert_eq!(Label::from_conf(0.39), Label::Negative);
    let v = AttrVector::new(vec![0.9, 0.5, 0.1, 0.61, 0.39, 0.6]).unwrap();
    let labels: Vec<f32> = label_attributes(&v).iter().map(|l| l.value()).collect();
    assert_eq!(labels, vec![1.0, 0.5, 0.0, 1.0, 0.0, 0.5]);
}

#[test]
fn threshold_validation_accepts_the_vacuous_filter() {
    QcThresholds { attr_conf_min: 0.0, id_sim_min: -1.0, percep_max: f32::INFINITY }.validate().unwrap();
    assert!(QcThresholds { attr_conf_min: 1.2, ..QcThresholds::default() }.validate().is_err());
    assert!(QcThresholds { id_sim_min: -1.5, ..QcThresholds::default() }.validate().is_err());
    assert!(QcThresholds { percep_max: 0.0, ..QcThresholds::default() }.validate().is_err());
}

#[test]
fn qc_filter_needs_a_trained_encoder_and_valid_index() {
    let img = uniform_image(1, (64, 64, 3), 0.0, 1.0);
    let th = QcThresholds::default();
    let untrained = AttrEncoder::untrained(micro_encoder_arch(64), 1);
    assert!(qc_filter(&img, &img, 0, true, &untrained, &th).is_err());
    let enc = stand_in_encoder();
    assert!(qc_filter(&img, &img, 6, true, &enc, &th).is_err());
    // Identical images: identity similarity 1 and zero perceptual distance.
    let v = qc_filter(&img, &img, 0, true, &enc, &th).unwrap();
    assert_eq!(v.scores.id_sim, 1.0);
    assert_eq!(v.scores.percep, 0.0);
    let conf = enc.encode_attrs(&img).unwrap().get(0);
    assert_eq!(v.scores.attr_conf, conf);
    assert_eq!(qc_filter(&img, &img, 0, false, &enc, &th).unwrap().scores.attr_conf, 1.0 - conf);
}

fn corpus(n: usize) -> (tempfile::TempDir, Manifest) {
    let d = tempfile::tempdir().unwrap();
    synthgen::build_corpus(n, 6, d.path()).unwrap();
    let m = Manifest::load(d.path()).unwrap();
    (d, m)
}

fn report(dir: &std::path::Path) -> ForgeReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join(REPORT_FILE)).unwrap()).unwrap()
}

#[test]
fn vacuous_and_impossible_filters() {
    let (_c, m) = corpus(8);
    let enc = stand_in_encoder();
    let out = tempfile::tempdir().unwrap();
    let vacuous = QcThresholds { attr_conf_min: 0.0, id_sim_min: -1.0, percep_max: f32::INFINITY };
    let r = forge_dataset(&m, &model(), &enc, &settings(), &vacuous, out.path(), false).unwrap();
    assert_eq!((r.input, r.kept, r.discarded.total()), (8, 8, 0));
    assert_eq!(Manifest::load(out.path()).unwrap().len(), 8);

    let out2 = tempfile::tempdir().unwrap();
    let impossible = QcThresholds { attr_conf_min: 1.0, ..QcThresholds::default() };
    let r = forge_dataset(&m, &model(), &enc, &settings(), &impossible, out2.path(), true).unwrap();
    assert_eq!(r.kept, 0);
    assert_eq!(r.discarded.attribute_weak, 8);
    assert!(r.kept_mean_scores.is_none());
    let rejects = std::fs::read_to_string(out2.path().join(REJECTS_DIR).join("rejects.jsonl")).unwrap();
    assert_eq!(rejects.lines().count(), 8);
    assert_eq!(report(out2.path()).discarded, r.discarded);
}

#[test]
fn empty_manifest_and_untrained_encoder_are_errors() {
    let (c, m) = corpus(2);
    let out = tempfile::tempdir().unwrap();
    let empty = Manifest { dir: c.path().to_path_buf(), records: vec![] };
    let th = QcThresholds::default();
    assert!(forge_dataset(&empty, &model(), &stand_in_encoder(), &settings(), &th, out.path(), false).is_err());
    let untrained = AttrEncoder::untrained(micro_encoder_arch(64), 1);
    assert!(forge_dataset(&m, &model(), &untrained, &settings(), &th, out.path(), false).is_err());
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

#[test]
fn kept_pairs_pass_a_recheck_from_disk() {
    let (_c, m) = corpus(24);
    let enc = stand_in_encoder();
    let probe = tempfile::tempdir().unwrap();
    let vacuous = QcThresholds { attr_conf_min: 0.0, id_sim_min: -1.0, percep_max: f32::INFINITY };
    forge_dataset(&m, &model(), &enc, &settings(), &vacuous, probe.path(), false).unwrap();
    let all = Manifest::load(probe.path()).unwrap();
    let q: Vec<_> = all.records.iter().map(|r| r.qc_scores.unwrap()).collect();
    // Thresholds at the lower quartile of each score make every stage bite.
    let th = QcThresholds {
        attr_conf_min: median(q.iter().map(|s| s.attr_conf).collect()) - 1e-4,
        id_sim_min: median(q.iter().map(|s| s.id_sim).collect()) - 0.002,
        percep_max: median(q.iter().map(|s| s.percep).collect()) * 1.5,
    };

    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let r = forge_dataset(&m, &model(), &enc, &settings(), &th, a.path(), true).unwrap();
    forge_dataset(&m, &model(), &enc, &settings(), &th, b.path(), true).unwrap();
    assert_eq!(r.kept + r.discarded.total(), r.input);
    assert!(r.kept > 0 && r.kept < r.input, "{r:?}");
    for name in [synthgen::MANIFEST_FILE, REPORT_FILE] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }

    let kept = Manifest::load(a.path()).unwrap();
    let mut id_sum = 0.0;
    for (i, rec) in kept.records.iter().enumerate() {
        let pair = kept.load_pair(i).unwrap();
        let target = rec.tar_attrs[rec.edited_index] >= 0.5;
        let v = qc_filter(&pair.src_image, &pair.tar_image, rec.edited_index, target, &enc, &th).unwrap();
        assert!(v.kept, "{} fails its re-check: {v:?}", rec.id);
        let stored = rec.qc_scores.unwrap();
        assert_eq!((v.scores.attr_conf, v.scores.id_sim, v.scores.percep), (stored.attr_conf, stored.id_sim, stored.percep));
        // Pairs differ only at the edited index.
        for k in 0..rec.src_attrs.len() {
            assert_eq!(rec.src_attrs[k] == rec.tar_attrs[k], k != rec.edited_index);
        }
        id_sum += v.scores.id_sim as f64;
    }
    let kept_mean = id_sum / kept.len() as f64;
    assert!(kept_mean >= th.id_sim_min as f64);
    assert!((r.kept_mean_scores.unwrap().id_sim - kept_mean).abs() < 1e-6);
    assert!(r.kept_mean_scores.unwrap().id_sim >= r.mean_scores.unwrap().id_sim - 1e-9);

    // Discarded records carry the earliest failing stage.
    let rejects = std::fs::read_to_string(a.path().join(REJECTS_DIR).join("rejects.jsonl")).unwrap();
    assert_eq!(rejects.lines().count(), r.discarded.total());
    for line in rejects.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let s: QcScores = serde_json::from_value(v["scores"].clone()).unwrap();
        let reason: QcReason = serde_json::from_value(v["reason"].clone()).unwrap();
        assert_eq!(qc_verdict(s, &th).reason, reason);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn first_failing_stage_names_the_reason(a in 0.0f32..1.0, i in -1.0f32..1.0, p in 0.0f32..1.0,
                                             ta in 0.0f32..1.0, ti in -1.0f32..1.0, tp in 0.01f32..1.0) {
        let th = QcThresholds { attr_conf_min: ta, id_sim_min: ti, percep_max: tp };
        let v = qc_verdict(scores(a, i, p), &th);
        let want = if a < ta {
            QcReason::AttributeWeak
        } else if i < ti {
            QcReason::IdentityShift
        } else if p > tp {
            QcReason::PerceptualDrift
        } else {
            QcReason::Kept
        };
        prop_assert_eq!(v.reason, want);
        prop_assert_eq!(v.kept, a >= ta && i >= ti && p <= tp);
    }
}

#[test]
fn stand_in_encoder_is_not_saturated() {
    let enc = stand_in_encoder();
    let img: Image = uniform_image(3, (64, 64, 3), 0.0, 1.0);
    assert!(enc.encode_attrs(&img).unwrap().values().iter().all(|&c| c > 0.0 && c < 1.0));
}
