//! HTTP transport for the metadata expansion endpoint.

use std::time::Duration;

use cfa_core::synth::Transport;

pub const EXPANSION_TIMEOUT: Duration = Duration::from_secs(5);

/// Posts the JSON metadata document and returns the response body.
pub struct HttpTransport {
    agent: ureq::Agent,
}

impl Default for HttpTransport {
    fn default() -> Self {
        Self::with_timeout(EXPANSION_TIMEOUT)
    }
}

impl HttpTransport {
    pub fn with_timeout(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for HttpTransport {
    fn post(&self, endpoint: &str, body: &str) -> Result<String, String> {
        let mut resp = self
            .agent
            .post(endpoint)
            .header("Content-Type", "application/json")
            .send(body)
            .map_err(|e| e.to_string())?;
        resp.body_mut().read_to_string().map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cfa_core::synth::{expand_metadata, serialize_metadata, ExpansionProvider, Meta, MetaVocab};
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn meta() -> Meta {
        Meta {
            site: "posterior torso".into(),
            age: 55,
            sex: "male".into(),
        }
    }

    /// Serves one request with `body` and returns the request it received.
    fn serve_once(body: &'static str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/expand", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 4096];
            let mut got = Vec::new();
            loop {
                let n = s.read(&mut buf).unwrap();
                got.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&got);
                if let Some(h) = text.find("\r\n\r\n") {
                    let len = text[..h]
                        .lines()
                        .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse::<usize>().unwrap()))
                        .unwrap_or(0);
                    if got.len() >= h + 4 + len {
                        break;
                    }
                }
            }
            write!(s, "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}", body.len(), body).unwrap();
            String::from_utf8(got).unwrap()
        });
        (url, handle)
    }

    #[test]
    fn external_reply_is_returned() {
        let (url, h) = serve_once("A pigmented lesion on the back.");
        let vocab = MetaVocab::default();
        let text = expand_metadata(&meta(), &vocab, &ExpansionProvider::external(url), &HttpTransport::default()).unwrap();
        assert_eq!(text, "A pigmented lesion on the back.");
        let req = h.join().unwrap();
        assert!(req.ends_with(r#"{"site":"posterior torso","age":55,"sex":"male"}"#), "{req}");
    }

    #[test]
    fn unreachable_or_empty_falls_back_to_template() {
        let vocab = MetaVocab::default();
        let (template, _) = serialize_metadata(&meta(), &vocab).unwrap();
        let closed = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            format!("http://{}/expand", l.local_addr().unwrap())
        };
        let t = HttpTransport::with_timeout(Duration::from_millis(500));
        let text = expand_metadata(&meta(), &vocab, &ExpansionProvider::external(closed), &t).unwrap();
        assert_eq!(text, template);
        let (url, h) = serve_once("  ");
        let text = expand_metadata(&meta(), &vocab, &ExpansionProvider::external(url), &t).unwrap();
        assert_eq!(text, template);
        h.join().unwrap();
    }
}
