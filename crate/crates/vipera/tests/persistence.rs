use std::collections::BTreeSet;
use std::process::Command;
use std::time::Duration;

use vipera::core::model::*;
use vipera::providers::stub::stub_png;
use vipera::providers::Providers;
use vipera::service::Service;
use vipera::store::Store;

const WAIT: Duration = Duration::from_secs(60);

fn service(dir: &std::path::Path) -> Service {
    Service::new(Store::open(dir).unwrap(), Providers::stub(), 4)
}

#[test]
fn restart_serves_the_same_state() {
    let dir = tempfile::tempdir().unwrap();
    let (id, before) = {
        let svc = service(dir.path());
        let id = svc.create_session(Some(11)).unwrap().id;
        svc.add_prompt(&id, "A cinematic photo of a doctor", 6).unwrap();
        assert!(svc.wait_idle(WAIT));
        svc.ensure_path(&id, &["doctor".into()]).unwrap();
        svc.add_criterion(&id, &["doctor".into()], "gender", &["male".into(), "female".into()]).unwrap();
        assert!(svc.wait_idle(WAIT));
        svc.add_bookmark(&id, BookmarkKind::Note, "", "remember").unwrap();
        let s = svc.session(&id).unwrap();
        svc.shutdown();
        (id, s)
    };
    let svc = service(dir.path());
    assert_eq!(svc.list_sessions().unwrap(), vec![id.clone()]);
    let after = svc.session(&id).unwrap();
    assert_eq!(after, before);
    assert!(svc.resume(&id).unwrap().is_empty(), "nothing is owed");
    let cid = &after.criteria[0].id;
    assert_eq!(svc.distribution(&id, cid).unwrap().total(), 6);
    for img in &after.images {
        assert_eq!(svc.image_file(&id, &img.id).unwrap(), std::fs::read(dir.path().join("sessions").join(id.as_str()).join(&img.file_ref)).unwrap());
    }
}

/// A session saved mid-pipeline: four of six images generated, no graph, a
/// criterion with nothing labeled.
fn interrupted_session(store: &Store) -> SessionId {
    let id = SessionId::new("interrupted");
    let mut s = AuditSession::new(id.clone(), 99, 0);
    let pid = s.add_prompt("A cinematic photo of a doctor", 6, None, 0).unwrap();
    let images: Vec<GeneratedImage> = s.images_of(&pid).cloned().collect();
    for img in &images[..4] {
        store.write_image(&id, &img.id, &stub_png(&s.prompts[0].text, img.seed)).unwrap();
        s.mark_image_ready(&img.id).unwrap();
    }
    let doctor = NodePath::root("doctor").unwrap();
    s.ensure_path(&doctor).unwrap();
    s.add_criterion(&doctor, "gender", ["male", "female"], CriterionOrigin::User).unwrap();
    store.save(&s).unwrap();
    id
}

#[test]
fn resume_finishes_interrupted_work() {
    let dir = tempfile::tempdir().unwrap();
    let id = interrupted_session(&Store::open(dir.path()).unwrap());
    let svc = service(dir.path());
    let jobs = svc.resume(&id).unwrap();
    assert_eq!(jobs.len(), 1);
    assert!(svc.wait_idle(WAIT));
    let s = svc.session(&id).unwrap();
    assert_eq!(s.ready_images().count(), 6);
    assert!(s.pending_label_pairs().is_empty());
    assert_eq!(s.label_table.len(), 6);
    assert!(s.extracted_prompts.contains(&s.prompts[0].id));
    assert!(s.violations().is_empty());
    // the images generated before the interruption were not regenerated
    let first = &s.images[0];
    let bytes = std::fs::read(dir.path().join("sessions/interrupted").join(&first.file_ref)).unwrap();
    assert_eq!(bytes, stub_png(&s.prompts[0].text, first.seed));

    // reloading again from disk gives the same state
    svc.shutdown();
    let again = service(dir.path()).session(&id).unwrap();
    assert_eq!(again, s);
}

#[test]
fn session_files_are_plain_json() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let id = interrupted_session(&store);
    let sdir = store.session_dir(&id);
    let names: BTreeSet<String> = std::fs::read_dir(&sdir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    for f in ["session.json", "graph.json", "labels.json", "images"] {
        assert!(names.contains(f), "{f} missing from {names:?}");
    }
    let session: serde_json::Value = serde_json::from_slice(&std::fs::read(sdir.join("session.json")).unwrap()).unwrap();
    assert_eq!(session["seed"], 99);
    assert!(session.get("label_table").is_none());
    let leftovers: Vec<_> = names.iter().filter(|n| n.starts_with('.') || n.ends_with(".tmp")).collect();
    assert!(leftovers.is_empty(), "temporary files left behind: {leftovers:?}");
}

#[test]
fn corrupt_session_is_reported_not_panicked() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path()).unwrap();
    let id = interrupted_session(&store);
    std::fs::write(store.session_dir(&id).join("session.json"), "{not json").unwrap();
    assert!(store.load(&id).is_err());
    let svc = service(dir.path());
    assert!(svc.session(&id).is_err());
    assert_eq!(svc.resume_all().unwrap(), 0);
}

#[test]
fn audit_command_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("audit.toml");
    std::fs::write(
        &config,
        r#"
seed = 9
default_count = 5
notes = ["Coats look white."]

[[prompts]]
text = "A cinematic photo of a doctor"

[[prompts]]
text = "A cinematic photo of a nurse"
count = 3

[[criteria]]
parent_path = ["doctor"]
name = "gender"
candidates = ["male", "female"]
"#,
    )
    .unwrap();
    let out = dir.path().join("report.md");
    let status = Command::new(env!("CARGO_BIN_EXE_vipera"))
        .args(["audit", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--data-dir")
        .arg(dir.path().join("data"))
        .env("RUST_LOG", "off")
        .env_remove("VIPERA_PROVIDER_MODE")
        .status()
        .unwrap();
    assert!(status.success());
    let md = std::fs::read_to_string(&out).unwrap();
    assert!(md.contains("gender of the doctor"), "{md}");
    assert!(md.contains("Coats look white."));
    assert!(md.contains("| p0002 | 1 | A cinematic photo of a nurse | 3/3 |"), "{md}");
}

#[test]
fn cli_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "prompts = []\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_vipera"))
        .args(["audit", "--config"])
        .arg(&bad)
        .arg("--data-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no prompts"));
    let out = Command::new(env!("CARGO_BIN_EXE_vipera"))
        .args(["serve", "--data-dir"])
        .arg(dir.path())
        .env("VIPERA_PROVIDER_MODE", "remote")
        .output()
        .unwrap();
    assert!(!out.status.success(), "remote mode without endpoints must not start");
}
