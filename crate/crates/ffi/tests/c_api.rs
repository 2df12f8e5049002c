use std::ffi::{c_char, CString};
use std::ptr;

use car_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { car_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn small_graph() -> *mut CarGraph {
    let mut g = ptr::null_mut();
    let s = unsafe { car_graph_synthetic(120, 3, 0.8, 3.0, 6, 7, &mut g) };
    assert_eq!(s, CarStatus::Ok);
    g
}

fn quick_config() -> CarTrainConfig {
    let mut c = unsafe {
        let mut c = std::mem::zeroed();
        assert_eq!(car_train_config_default(&mut c), CarStatus::Ok);
        c
    };
    c.hidden = 8;
    c.max_epochs = 15;
    c
}

#[test]
fn graph_handle_accessors() {
    let g = small_graph();
    unsafe {
        assert_eq!(car_graph_num_nodes(g), 120);
        assert_eq!(car_graph_num_classes(g), 3);
        assert!(car_graph_num_edges(g) > 0);
        let mut h = 0.0;
        assert_eq!(car_graph_homophily(g, &mut h), CarStatus::Ok);
        assert!(h > 0.6);
        car_graph_free(g);
        assert_eq!(car_graph_num_nodes(ptr::null()), 0);
    }
}

#[test]
fn train_predict_save_load() {
    let g = small_graph();
    let cfg = quick_config();
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut m = ptr::null_mut();
        let mut metrics = CarMetrics::default();
        assert_eq!(car_train(g, &cfg, &mut m, &mut metrics), CarStatus::Ok, "{}", last_error());
        assert!((0.0..=1.0).contains(&metrics.test_accuracy));
        assert!(metrics.test_loss >= 0.0);

        let n = car_graph_num_nodes(g) * car_graph_num_classes(g);
        let mut probs = vec![0.0; n];
        assert_eq!(car_model_predict(m, g, probs.as_mut_ptr(), n), CarStatus::Ok);
        for row in probs.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut short = vec![0.0; n - 1];
        assert_eq!(car_model_predict(m, g, short.as_mut_ptr(), n - 1), CarStatus::BufferTooSmall);

        assert_eq!(car_model_save(m, path.as_ptr()), CarStatus::Ok);
        let mut m2 = ptr::null_mut();
        assert_eq!(car_model_load(path.as_ptr(), &mut m2), CarStatus::Ok);
        let mut probs2 = vec![0.0; n];
        assert_eq!(car_model_predict(m2, g, probs2.as_mut_ptr(), n), CarStatus::Ok);
        assert_eq!(probs, probs2);

        car_model_free(m);
        car_model_free(m2);
        car_graph_free(g);
    }
}

#[test]
fn errors_are_reported() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(car_graph_synthetic(10, 1, 0.5, 2.0, 4, 0, &mut g), CarStatus::InvalidArgument);
        assert!(last_error().contains("classes"));
        assert!(g.is_null());

        let missing = CString::new("/nonexistent/dataset").unwrap();
        assert_eq!(car_graph_load(missing.as_ptr(), &mut g), CarStatus::DataError);
        assert!(last_error().contains("meta.json"));

        assert_eq!(car_graph_load(ptr::null(), &mut g), CarStatus::NullPointer);

        let graph = small_graph();
        let mut cfg = quick_config();
        cfg.mechanism = 42;
        let mut m = ptr::null_mut();
        assert_eq!(car_train(graph, &cfg, &mut m, ptr::null_mut()), CarStatus::InvalidArgument);
        assert!(last_error().contains("mechanism"));
        cfg.mechanism = CAR_MECHANISM_GAT;
        cfg.temperature = 0.0;
        assert_eq!(car_train(graph, &cfg, &mut m, ptr::null_mut()), CarStatus::InvalidArgument);
        car_graph_free(graph);
    }
}

#[test]
fn truncated_error_message() {
    unsafe {
        let mut g = ptr::null_mut();
        car_graph_load(ptr::null(), &mut g);
        let mut buf = [0 as c_char; 4];
        let full = car_last_error_message(buf.as_mut_ptr(), buf.len());
        assert!(full > 3);
        assert_eq!(buf[3], 0);
    }
}

#[test]
fn effect_matches_core() {
    assert_eq!(car_causal_effect(0.7, 0.7, 3, 0.1), 0.5);
    assert!((car_causal_effect(1.0, 1.1, 1, 0.1) - 0.7310585786300049).abs() < 1e-9);
}

#[test]
fn header_declares_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/car.h")).unwrap();
    for name in [
        "typedef struct CarGraph CarGraph",
        "typedef struct CarModel CarModel",
        "CAR_STATUS_OK",
        "car_train(",
        "car_model_predict(",
        "car_last_error_message(",
        "CAR_MECHANISM_GATV2",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
