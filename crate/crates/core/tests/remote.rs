//! The remote encoder client against a scripted in-process server.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::thread::JoinHandle;
use std::time::Duration;

use phraseforge::encoder::EncoderProvider;
use phraseforge::remote::RemoteEncoder;
use phraseforge::Error;

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures/remote")
        .join(name);
    std::fs::read_to_string(path).expect("golden file")
}

/// Serves one connection: reads `expect` request lines, then writes
/// `replies` in order. Returns the request lines it received.
fn serve(expect: usize, replies: Vec<String>) -> (String, JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut seen = Vec::new();
        for _ in 0..expect {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            seen.push(line);
        }
        let mut w = stream;
        for r in replies {
            w.write_all(r.as_bytes()).unwrap();
        }
        seen
    });
    (addr, handle)
}

fn texts(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

fn client(addr: &str, dim: usize) -> RemoteEncoder {
    RemoteEncoder::new(addr, dim).with_timeout(Duration::from_secs(5))
}

#[test]
fn golden_exchange() {
    let (addr, server) = serve(1, vec![golden("response.jsonl")]);
    let out = client(&addr, 2)
        .encode_batch(&texts(&["first text", "second", "third one"]))
        .unwrap();
    assert_eq!(server.join().unwrap(), vec![golden("request.jsonl")]);
    assert_eq!(out.len(), 3);
    assert_eq!(out[0].start, vec![1.0, 0.0]);
    assert_eq!(out[0].end, vec![0.0, 1.0]);
    assert_eq!(out[1].start, vec![0.5, 0.5]);
    assert_eq!(out[2].end, vec![1.0, 0.0]);
}

#[test]
fn responses_are_matched_by_id() {
    let replies = vec![
        "{\"id\":\"b1\",\"dim\":1,\"vectors\":[[3.0,4.0]]}\n".to_string(),
        "{\"id\":\"b0\",\"dim\":1,\"vectors\":[[1.0,2.0]]}\n".to_string(),
    ];
    let (addr, server) = serve(2, replies);
    let out = client(&addr, 1)
        .encode_batches(&[texts(&["x"]), texts(&["y"])])
        .unwrap();
    server.join().unwrap();
    assert_eq!(out[0][0].start, vec![1.0]);
    assert_eq!(out[1][0].start, vec![3.0]);
}

#[test]
fn inconsistent_vector_length_is_protocol_error() {
    let reply = "{\"id\":\"b0\",\"dim\":2,\"vectors\":[[1.0,0.0,0.0,1.0],[1.0,0.0]]}\n".to_string();
    let (addr, server) = serve(1, vec![reply]);
    let err = client(&addr, 2).encode_batch(&texts(&["a", "b"])).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn missing_vectors_are_protocol_error() {
    let reply = "{\"id\":\"b0\",\"dim\":1,\"vectors\":[[1.0,0.0],[0.0,1.0]]}\n".to_string();
    let (addr, server) = serve(1, vec![reply]);
    let err = client(&addr, 1).encode_batch(&texts(&["a", "b", "c"])).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn header_dim_mismatch_is_config_error() {
    let reply = "{\"id\":\"b0\",\"dim\":3,\"vectors\":[[1,0,0,0,1,0]]}\n".to_string();
    let (addr, server) = serve(1, vec![reply]);
    let err = client(&addr, 2).encode_batch(&texts(&["a"])).unwrap_err();
    server.join().unwrap();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn early_close_is_retryable_transport_error() {
    let (addr, server) = serve(1, vec![]);
    let err = client(&addr, 2).encode_batch(&texts(&["a"])).unwrap_err();
    server.join().unwrap();
    assert!(err.is_retryable(), "{err}");
}
