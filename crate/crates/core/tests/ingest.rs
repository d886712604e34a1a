use std::path::Path;
use std::process::Command;

use depthprune::ingest::{
    plan_from_json, plan_to_json, read_dump, read_dump_manifest, write_dump, write_dump_with,
};
use depthprune::{build_plan, init_model, CalibrationSet, MetricKind};

/// Writes a `.sdt` file byte by byte, the way an external producer would.
fn hand_sdt(dims: &[u64], values: &[f32]) -> Vec<u8> {
    let mut b = b"SDTENSR1".to_vec();
    b.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in dims {
        b.extend_from_slice(&d.to_le_bytes());
    }
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b
}

fn sha256sum(path: &Path) -> Option<String> {
    let out = Command::new("sha256sum").arg(path).output().ok()?;
    let text = String::from_utf8(out.stdout).ok()?;
    Some(text.split_whitespace().next()?.to_string())
}

#[test]
fn manifest_hashes_match_system_tool() {
    let dir = tempfile::tempdir().unwrap();
    let model = init_model(64, 8, 2, 2, 1).unwrap();
    let calib = CalibrationSet::new(vec![vec![3, 1, 4, 1, 5, 9]]).unwrap();
    let (b, _) = model.forward_capture(&calib).unwrap();
    let m = write_dump(&b, dir.path()).unwrap();
    let Some(_) = sha256sum(&dir.path().join("manifest.json")) else {
        eprintln!("sha256sum not available; skipping external hash comparison");
        return;
    };
    for f in &m.files {
        assert_eq!(sha256sum(&dir.path().join(&f.name)).unwrap(), f.sha256, "{}", f.name);
    }
}

#[test]
fn reads_producer_dump_with_extra_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let values: [Vec<f32>; 3] = [
        vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 2.0, 2.0],
        vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5, 2.0, 2.0],
        vec![0.0, 1.0, 0.0, 2.0, 0.5, -0.5, -2.0, -2.0],
    ];
    let mut files = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let name = format!("boundary_{i:04}.sdt");
        let bytes = hand_sdt(&[1, 4, 2], v);
        std::fs::write(dir.path().join(&name), &bytes).unwrap();
        let hash = {
            use sha2::Digest;
            hex::encode(sha2::Sha256::digest(&bytes))
        };
        files.push(serde_json::json!({ "name": name, "sha256": hash }));
    }
    let manifest = serde_json::json!({
        "format": "sdt-dump",
        "version": 1,
        "layers": 2,
        "batch": 1,
        "seq_len": 4,
        "hidden": 2,
        "source_model": "someorg/tiny-lm@abc123",
        "calib_fingerprint": "wikitext-2:0-1",
        "hash_algorithm": "sha256",
        "files": files,
        "extra": { "padding": "none", "dtype_source": "bfloat16" }
    });
    std::fs::write(dir.path().join("manifest.json"), manifest.to_string()).unwrap();

    let m = read_dump_manifest(dir.path()).unwrap();
    assert_eq!(m.extra["padding"], "none");
    let b = read_dump(dir.path()).unwrap();
    assert_eq!(b.layer_count(), 2);
    assert_eq!(b.model_fingerprint, "someorg/tiny-lm@abc123");

    let plan = build_plan(&b, 0.0, MetricKind::Mssd, 1).unwrap();
    // layer 0 is an exact identity
    assert_eq!(plan.scores[0].l_sim, 0.0);
    assert_eq!(plan.scores[0].l_diff, 0.0);
    assert_eq!(plan.pruned_indices, vec![0]);
    // layer 1: tokens rotate 90 deg, stay, stay, flip -> cos 0, 1, 1, -1
    assert_eq!(plan.scores[1].l_sim, 1.0 - (0.0 + 1.0 + 1.0 - 1.0) / 4.0);
    // squared diffs: 2, 1, 0, 32
    assert_eq!(plan.scores[1].l_diff, 35.0 / 4.0);

    // re-dumping keeps the producer metadata and identical payload bytes
    let out = tempfile::tempdir().unwrap();
    let m2 = write_dump_with(&b, out.path(), m.extra.clone()).unwrap();
    assert_eq!(m2.files, m.files);
    assert_eq!(m2.extra, m.extra);
}

#[test]
fn plan_json_is_canonical() {
    let model = init_model(256, 16, 6, 2, 3).unwrap();
    let calib = CalibrationSet::synthetic(2, 24, 1).unwrap();
    let (b, _) = model.forward_capture(&calib).unwrap();
    let plan = build_plan(&b, 0.5, MetricKind::Mssd, 2).unwrap();
    let text = plan_to_json(&plan);
    assert!(text.ends_with("}\n"));
    let keys: Vec<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(&text)
        .unwrap()
        .keys()
        .cloned()
        .collect();
    assert!(keys.contains(&"pruned_indices".to_string()));
    assert!(!keys.contains(&"excluded".to_string()));
    let back = plan_from_json(&text, Path::new("p.json")).unwrap();
    assert_eq!(plan_to_json(&back), text);

    let reordered: serde_json::Value = serde_json::from_str(&text).unwrap();
    let compact = serde_json::to_string(&reordered).unwrap();
    let again = plan_from_json(&compact, Path::new("p.json")).unwrap();
    assert_eq!(plan_to_json(&again), text);
}

#[test]
fn k0_plan_keeps_every_layer() {
    let model = init_model(256, 16, 3, 2, 3).unwrap();
    let calib = CalibrationSet::synthetic(2, 16, 1).unwrap();
    let (b, logits) = model.forward_capture(&calib).unwrap();
    let plan = build_plan(&b, 0.5, MetricKind::Masd, 0).unwrap();
    let back = plan_from_json(&plan_to_json(&plan), Path::new("k0.json")).unwrap();
    assert!(back.pruned_indices.is_empty());
    assert_eq!(model.prune_and_forward(&back, &calib).unwrap(), logits);
}

#[test]
fn malformed_plans_are_rejected() {
    let model = init_model(256, 16, 4, 2, 3).unwrap();
    let calib = CalibrationSet::synthetic(2, 16, 1).unwrap();
    let (b, _) = model.forward_capture(&calib).unwrap();
    let text = plan_to_json(&build_plan(&b, 0.5, MetricKind::Mssd, 2).unwrap());
    let origin = Path::new("bad.json");
    let kind = |t: &str| plan_from_json(t, origin).unwrap_err().kind();

    assert_eq!(kind("{"), "JsonError");
    assert_eq!(kind("{}"), "FormatError");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["k"] = 3.into();
    assert_eq!(kind(&v.to_string()), "PlanError");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["ranking"] = serde_json::json!([0, 0, 1, 2]);
    assert_eq!(kind(&v.to_string()), "PlanError");
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["version"] = 0.into();
    assert_eq!(kind(&v.to_string()), "VersionError");
}
