use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use dumpscan_core::error::Error;
use dumpscan_core::ingest::{asset_paths, parse_bbox, read_sidecar, AdmissionPolicy, CatalogClient};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

type Handler = dyn Fn(&str) -> (u16, Vec<u8>) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection, routed by target.
struct Mock {
    base: String,
    hits: Arc<AtomicUsize>,
}

fn serve(handler: Box<Handler>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let target = line.split_whitespace().nth(1).unwrap_or("/").to_string();
            loop {
                let mut h = String::new();
                if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                    break;
                }
            }
            let (status, body) = handler(&target);
            let head = format!(
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            );
            let _ = stream.write_all(head.as_bytes());
            let _ = stream.write_all(&body);
        }
    });
    Mock { base, hits }
}

fn query(target: &str, key: &str) -> Option<String> {
    let q = target.split_once('?')?.1;
    q.split('&').find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
}

fn record(i: usize, base: &str) -> Value {
    // Every third entry is too coarse, every fifth too small.
    let gsd = if i % 3 == 0 { 0.08 } else { 0.03 };
    let area = if i % 5 == 0 { 0.5 } else { 2.0 + i as f64 };
    json!({
        "_id": format!("img{i:03}"),
        "title": format!("scene {i}"),
        "gsd": gsd,
        "area_km2": area,
        "acquisition_start": format!("2019-{:02}-{:02}T08:00:00Z", 1 + i % 12, 1 + i % 28),
        "provider": "mock",
        "uuid": format!("{base}/assets/img{i:03}.tif"),
        "geojson": {"type": "Polygon", "coordinates": [[[36.8, -1.3], [36.9, -1.3], [36.9, -1.2], [36.8, -1.3]]]},
    })
}

#[test]
fn search_follows_pages_and_filters() {
    let total = 150;
    let base = Arc::new(std::sync::OnceLock::<String>::new());
    let b = base.clone();
    let mock = serve(Box::new(move |target| {
        assert!(target.starts_with("/meta?"), "{target}");
        assert!(query(target, "bbox").is_some());
        let page: usize = query(target, "page").unwrap().parse().unwrap();
        let limit: usize = query(target, "limit").unwrap().parse().unwrap();
        let lo = (page - 1) * limit;
        let results: Vec<Value> = (lo..(lo + limit).min(total)).map(|i| record(i, b.get().unwrap())).collect();
        (200, json!({"meta": {"found": total}, "results": results}).to_string().into_bytes())
    }));
    base.set(mock.base.clone()).unwrap();

    let client = CatalogClient::new(&mock.base);
    let bbox = parse_bbox("36.6,-1.45,37.1,-1.1").unwrap();
    let got = client.search(&bbox, &AdmissionPolicy::default()).unwrap();
    let want: Vec<usize> = (0..total).filter(|i| i % 3 != 0 && i % 5 != 0).collect();
    assert_eq!(got.len(), want.len());
    let mut ids: Vec<&str> = got.iter().map(|e| e.oam_id.as_str()).collect();
    ids.sort();
    let want_ids: Vec<String> = want.iter().map(|i| format!("img{i:03}")).collect();
    assert_eq!(ids, want_ids.iter().map(String::as_str).collect::<Vec<_>>());
    for w in got.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(a.acquisition_date > b.acquisition_date || (a.acquisition_date == b.acquisition_date && a.oam_id < b.oam_id));
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 2);
}

fn asset_server(payload: Vec<u8>, listed_size: u64, listed_sha: String) -> Mock {
    let base = Arc::new(std::sync::OnceLock::<String>::new());
    let b = base.clone();
    let mock = serve(Box::new(move |target| match target {
        "/meta/scene1" => {
            let rec = json!({
                "_id": "scene1", "gsd": 0.04, "area_km2": 3.0,
                "uuid": format!("{}/assets/scene1.tif", b.get().unwrap()),
                "file_size": listed_size, "sha256": listed_sha,
            });
            (200, json!({"results": rec}).to_string().into_bytes())
        }
        "/assets/scene1.tif" => (200, payload.clone()),
        _ => (404, b"not here".to_vec()),
    }));
    base.set(mock.base.clone()).unwrap();
    mock
}

#[test]
fn fetch_downloads_verifies_and_caches() {
    let payload: Vec<u8> = (0..50_000u32).map(|i| (i * 31 % 251) as u8).collect();
    let sha = hex::encode(Sha256::digest(&payload));
    let mock = asset_server(payload.clone(), payload.len() as u64, sha.to_uppercase());
    let dir = tempfile::tempdir().unwrap();
    let client = CatalogClient::new(&mock.base);

    let first = client.fetch("scene1", dir.path()).unwrap();
    assert!(!first.cached);
    assert_eq!(first.sha256, sha);
    assert_eq!(std::fs::read(&first.path).unwrap(), payload);
    let (tif, side) = asset_paths(dir.path(), "scene1");
    assert_eq!(first.path, tif);
    let sidecar = read_sidecar(&side).unwrap();
    assert_eq!(sidecar.bytes, payload.len() as u64);
    assert_eq!(sidecar.entry.oam_id, "scene1");
    let hits = mock.hits.load(Ordering::SeqCst);
    assert_eq!(hits, 2);

    let second = client.fetch("scene1", dir.path()).unwrap();
    assert!(second.cached);
    assert_eq!(second.sha256, sha);
    assert_eq!(mock.hits.load(Ordering::SeqCst), hits, "cache hit must not touch the network");

    // A corrupted cache is downloaded again.
    std::fs::write(&tif, b"garbage").unwrap();
    let third = client.fetch("scene1", dir.path()).unwrap();
    assert!(!third.cached);
    assert_eq!(std::fs::read(&tif).unwrap(), payload);
}

#[test]
fn unknown_id_is_not_found() {
    let mock = asset_server(vec![1, 2, 3], 3, String::new());
    let dir = tempfile::tempdir().unwrap();
    let err = CatalogClient::new(&mock.base).fetch("nope", dir.path()).unwrap_err();
    assert!(matches!(err, Error::NotFound(_)), "{err:?}");
    assert!(!asset_paths(dir.path(), "nope").0.exists());
}

#[test]
fn size_or_checksum_mismatch_is_an_integrity_error() {
    let payload = b"0123456789".to_vec();
    let sha = hex::encode(Sha256::digest(&payload));
    let dir = tempfile::tempdir().unwrap();

    let wrong_size = asset_server(payload.clone(), 11, sha);
    let err = CatalogClient::new(&wrong_size.base).fetch("scene1", dir.path()).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");

    let wrong_sha = asset_server(payload.clone(), 10, "ab".repeat(32));
    let err = CatalogClient::new(&wrong_sha.base).fetch("scene1", dir.path()).unwrap_err();
    assert!(matches!(err, Error::Integrity(_)), "{err:?}");
    // Nothing is left behind on failure.
    assert!(!asset_paths(dir.path(), "scene1").0.exists());
    assert!(!asset_paths(dir.path(), "scene1").1.exists());
}

#[test]
fn server_errors_are_retried_then_reported() {
    let mock = serve(Box::new(|_| (503, b"busy".to_vec())));
    let client = CatalogClient::new(&mock.base).with_retries(2, Duration::from_millis(5));
    let bbox = parse_bbox("36.6,-1.45,37.1,-1.1").unwrap();
    let err = client.search(&bbox, &AdmissionPolicy::default()).unwrap_err();
    assert!(matches!(err, Error::Retriable(_)), "{err:?}");
    assert_eq!(mock.hits.load(Ordering::SeqCst), 3);

    // A transient failure followed by success recovers.
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let flaky = serve(Box::new(move |_| {
        if c.fetch_add(1, Ordering::SeqCst) == 0 {
            (500, Vec::new())
        } else {
            (200, json!({"meta": {"found": 0}, "results": []}).to_string().into_bytes())
        }
    }));
    let client = CatalogClient::new(&flaky.base).with_retries(2, Duration::from_millis(5));
    assert!(client.search(&bbox, &AdmissionPolicy::default()).unwrap().is_empty());
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}
