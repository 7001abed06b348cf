mod common;
#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use common::{prompts_at, save, start};
use support::cylinder_volume;
use volseg_core::backend::ModelKind;
use volseg_core::mask::Bitmap;
use volseg_core::protocol::{rle_decode, rle_encode, ClientMessage, ServerMessage, WorkerOutcome};
use volseg_core::volume::{Axis, SliceRef};
use volseg_server::client::{register_worker, run_worker, serve_worker, WorkerRequest, WorkerResponse};
use volseg_server::{Client, Server};

/// Encodes to the slice shape, decodes to a fixed pattern: a filled band of
/// rows `band`, independent of the prompts.
fn echo_worker(
    server: &Server,
    model: &'static str,
    band: std::ops::Range<usize>,
    decodes: Arc<AtomicUsize>,
) -> thread::JoinHandle<()> {
    let addr = server.local_addr();
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let h = thread::spawn(move || {
        let mut c = register_worker(addr, model, 64).unwrap();
        ready_tx.send(()).unwrap();
        let mut handler = |req: WorkerRequest| match req {
            WorkerRequest::Encode { rows, cols, pixels } => {
                assert_eq!(pixels.len(), (rows * cols) as usize);
                let mut blob = rows.to_le_bytes().to_vec();
                blob.extend_from_slice(&cols.to_le_bytes());
                WorkerResponse::Encoded(WorkerOutcome::Ok(blob))
            }
            WorkerRequest::Decode { rows, cols, blob, .. } => {
                assert_eq!(blob.len(), 8);
                decodes.fetch_add(1, Ordering::SeqCst);
                WorkerResponse::Decoded(WorkerOutcome::Ok((0.75, rle_encode(&band_mask(rows, cols, band.clone())))))
            }
        };
        let _ = serve_worker(&mut c, &mut handler);
    });
    ready_rx.recv_timeout(Duration::from_secs(10)).unwrap();
    h
}

fn band_mask(rows: u32, cols: u32, band: std::ops::Range<usize>) -> Bitmap {
    let mut b = Bitmap::zeros(rows as usize, cols as usize);
    for r in band.filter(|&r| r < rows as usize) {
        for c in 0..cols as usize {
            b.set(r, c, true);
        }
    }
    b
}

fn wait_for(mut cond: impl FnMut() -> bool) {
    let deadline = Instant::now() + Duration::from_secs(10);
    while !cond() {
        assert!(Instant::now() < deadline, "timed out");
        thread::sleep(Duration::from_millis(10));
    }
}

#[test]
fn decode_results_are_relayed_as_mask_results() {
    let dir = tempfile::tempdir().unwrap();
    let path = save(dir.path(), "cyl.nii", &cylinder_volume([20, 16, 10]));
    let server = start();
    let decodes = Arc::new(AtomicUsize::new(0));
    let _w = echo_worker(&server, "medsam_vit_b", 2..5, decodes.clone());

    let mut c = Client::connect(server.local_addr()).unwrap();
    let models = c.list_models().unwrap();
    let m = models.iter().find(|m| m.model_id == "medsam_vit_b").unwrap();
    assert_eq!((m.kind, m.embedding_bytes_estimate), (ModelKind::ExternalWorker, 64));

    c.load_volume(&path).unwrap();
    c.select_model("medsam_vit_b").unwrap();
    let slice = SliceRef::new(Axis::Axial, 3);
    let got = c.set_prompts(slice, prompts_at(8, 8)).unwrap();
    assert_eq!(rle_decode(&got.mask).unwrap(), band_mask(16, 20, 2..5));
    assert_eq!(got.score, 0.75);
    assert_eq!(decodes.load(Ordering::SeqCst), 1);
    // precompute runs through the worker as well
    assert!(c.wait_precomputed(Duration::from_secs(30)).unwrap());
}

#[test]
fn two_workers_route_independently() {
    let dir = tempfile::tempdir().unwrap();
    let path = save(dir.path(), "cyl.nii", &cylinder_volume([20, 16, 10]));
    let server = start();
    let (da, db) = (Arc::new(AtomicUsize::new(0)), Arc::new(AtomicUsize::new(0)));
    let _a = echo_worker(&server, "model_a", 0..1, da.clone());
    let _b = echo_worker(&server, "model_b", 5..9, db.clone());

    let mut ca = Client::connect(server.local_addr()).unwrap();
    let mut cb = Client::connect(server.local_addr()).unwrap();
    ca.load_volume(&path).unwrap();
    cb.load_volume(&path).unwrap();
    ca.select_model("model_a").unwrap();
    cb.select_model("model_b").unwrap();
    let slice = SliceRef::new(Axis::Coronal, 4);
    for _ in 0..3 {
        let a = ca.set_prompts(slice, prompts_at(1, 1)).unwrap();
        let b = cb.set_prompts(slice, prompts_at(1, 1)).unwrap();
        assert_eq!(rle_decode(&a.mask).unwrap(), band_mask(10, 20, 0..1));
        assert_eq!(rle_decode(&b.mask).unwrap(), band_mask(10, 20, 5..9));
    }
    assert_eq!((da.load(Ordering::SeqCst), db.load(Ordering::SeqCst)), (3, 3));
    // the reference model is untouched by either
    ca.select_model("reference").unwrap();
    let r = ca.set_prompts(slice, prompts_at(1, 1)).unwrap();
    assert_ne!(rle_decode(&r.mask).unwrap(), band_mask(10, 20, 0..1));
}

#[test]
fn duplicate_registration_is_rejected() {
    let server = start();
    let _w = echo_worker(&server, "dup", 0..1, Arc::new(AtomicUsize::new(0)));
    match register_worker(server.local_addr(), "dup", 1) {
        Err(e) => assert_eq!(e.code(), Some(6)),
        Ok(_) => panic!("second registration accepted"),
    }
    match register_worker(server.local_addr(), "", 1) {
        Err(e) => assert_eq!(e.code(), Some(9)),
        Ok(_) => panic!("empty id accepted"),
    }
}

#[test]
fn worker_dying_mid_request_fails_it_with_code_7() {
    let dir = tempfile::tempdir().unwrap();
    let path = save(dir.path(), "cyl.nii", &cylinder_volume([20, 16, 10]));
    let server = start();
    let addr = server.local_addr();
    let (ready_tx, ready_rx) = std::sync::mpsc::channel();
    let worker = thread::spawn(move || {
        let mut c = register_worker(addr, "flaky", 8).unwrap();
        ready_tx.send(()).unwrap();
        loop {
            match c.recv().unwrap().0 {
                ServerMessage::EncodeRequest { request_id, .. } => {
                    c.send(&ClientMessage::EncodeResult { request_id, outcome: WorkerOutcome::Ok(vec![0; 8]) })
                        .unwrap();
                }
                // hang up with the decode in flight
                ServerMessage::DecodeRequest { .. } => return,
                other => panic!("{other:?}"),
            }
        }
    });
    ready_rx.recv().unwrap();
    let mut c = Client::connect(addr).unwrap();
    c.load_volume(&path).unwrap();
    c.select_model("flaky").unwrap();
    let err = c.set_prompts(SliceRef::new(Axis::Axial, 2), prompts_at(3, 3)).unwrap_err();
    assert_eq!(err.code(), Some(7), "{err}");
    worker.join().unwrap();

    wait_for(|| !server.model_ids().contains(&"flaky".to_owned()));
    assert!(!c.list_models().unwrap().iter().any(|m| m.model_id == "flaky"));
    // the session still holds the dead model
    assert_eq!(c.set_prompts(SliceRef::new(Axis::Axial, 2), prompts_at(3, 3)).unwrap_err().code(), Some(7));
    assert_eq!(c.select_model("flaky").unwrap_err().code(), Some(4));
    c.select_model("reference").unwrap();
    assert!(c.set_prompts(SliceRef::new(Axis::Axial, 2), prompts_at(3, 3)).is_ok());

    // the id is free again
    let _w = echo_worker(&server, "flaky", 0..2, Arc::new(AtomicUsize::new(0)));
}

#[test]
fn worker_errors_and_bad_masks_surface_as_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = save(dir.path(), "cyl.nii", &cylinder_volume([20, 16, 10]));
    let server = start();
    let addr = server.local_addr();
    thread::spawn(move || {
        let mut calls = 0;
        let _ = run_worker(addr, "grumpy", 8, |req| match req {
            WorkerRequest::Encode { .. } => WorkerResponse::Encoded(WorkerOutcome::Ok(vec![1; 8])),
            WorkerRequest::Decode { .. } => {
                calls += 1;
                if calls == 1 {
                    WorkerResponse::Decoded(WorkerOutcome::Err("CUDA out of memory".into()))
                } else {
                    // wrong shape for the slice
                    WorkerResponse::Decoded(WorkerOutcome::Ok((1.0, rle_encode(&Bitmap::zeros(2, 2)))))
                }
            }
        });
    });
    wait_for(|| server.model_ids().contains(&"grumpy".to_owned()));
    let mut c = Client::connect(addr).unwrap();
    c.load_volume(&path).unwrap();
    c.select_model("grumpy").unwrap();
    let e = c.set_prompts(SliceRef::new(Axis::Axial, 2), prompts_at(3, 3)).unwrap_err();
    assert_eq!(e.code(), Some(10));
    assert!(e.to_string().contains("CUDA out of memory"));
    let e = c.set_prompts(SliceRef::new(Axis::Axial, 2), prompts_at(3, 3)).unwrap_err();
    assert_eq!(e.code(), Some(10));
}
