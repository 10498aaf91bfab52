//! Signed HTTP client for the gateway endpoints, used by the benchmark
//! driver and the integration tests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use serde_json::Value;

use blendcac::authz::{Outcome, Reason, StageTimings};
use blendcac::identity::derive_address;
use blendcac::{Address, KeyPair};

use crate::http::{request_preimage, HDR_ADDRESS, HDR_NONCE, HDR_PUBLIC_KEY, HDR_SIGNATURE};

/// One observed resource request, folding the client-side wall time with
/// the server-reported stage timings.
#[derive(Debug, Clone)]
pub struct ResourceObservation {
    pub status: u16,
    pub outcome: Outcome,
    pub reason: Reason,
    pub cold: bool,
    pub timings: StageTimings,
    pub body: Vec<u8>,
}

pub struct GatewayClient {
    agent: ureq::Agent,
    base: String,
    keypair: KeyPair,
    address: Address,
    nonce: AtomicU64,
}

impl GatewayClient {
    pub fn new(base_url: impl Into<String>, keypair: KeyPair) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build()
            .into();
        let address = derive_address(&keypair.public_key());
        GatewayClient {
            agent,
            base: base_url.into(),
            keypair,
            address,
            nonce: AtomicU64::new(1),
        }
    }

    pub fn address(&self) -> Address {
        self.address
    }

    fn auth_headers(&self, method: &str, path: &str) -> [(&'static str, String); 4] {
        let nonce = self.nonce.fetch_add(1, Ordering::Relaxed);
        let signature = self.keypair.sign(&request_preimage(method, path, nonce));
        [
            (HDR_ADDRESS, self.address.to_string()),
            (HDR_PUBLIC_KEY, self.keypair.public_key().to_string()),
            (HDR_SIGNATURE, signature.to_string()),
            (HDR_NONCE, nonce.to_string()),
        ]
    }

    /// Timed `GET /resource/{id}`. The total is the client wall time; the
    /// four processing stages come from the response headers and the rtt
    /// is the remainder, so the accounting identity holds exactly.
    pub fn get_resource(&self, id: &str) -> Result<ResourceObservation> {
        let path = format!("/resource/{id}");
        let url = format!("{}{}", self.base, path);
        let mut request = self.agent.get(&url);
        for (name, value) in self.auth_headers("GET", &path) {
            request = request.header(name, &value);
        }

        let start = Instant::now();
        let mut response = request.call().context("resource request failed")?;
        let body = response
            .body_mut()
            .read_to_vec()
            .context("reading response body")?;
        let wall = start.elapsed();

        let header_us = |name: &str| -> u64 {
            response
                .headers()
                .get(name)
                .and_then(|v| v.to_str().ok())
                .and_then(|s| s.parse().ok())
                .unwrap_or(0)
        };
        let token_query = header_us("x-stage-token-query-us");
        let parse = header_us("x-stage-parse-us");
        let validation = header_us("x-stage-validation-us");
        let verification = header_us("x-stage-verification-us");
        let cold = response
            .headers()
            .get("x-cold")
            .and_then(|v| v.to_str().ok())
            == Some("1");
        let reason: Reason = response
            .headers()
            .get("x-reason")
            .and_then(|v| v.to_str().ok())
            .unwrap_or("ok")
            .parse()
            .unwrap_or(Reason::Ok);

        let status = response.status().as_u16();
        let outcome = if status == 200 { Outcome::Grant } else { Outcome::Deny };

        let wall_us = wall.as_micros() as u64;
        let stage_sum = token_query + parse + validation + verification;
        let rtt_us = wall_us.saturating_sub(stage_sum);
        let timings = StageTimings::from_stages(
            Duration::from_micros(rtt_us),
            Duration::from_micros(token_query),
            Duration::from_micros(parse),
            Duration::from_micros(validation),
            Duration::from_micros(verification),
        );

        Ok(ResourceObservation {
            status,
            outcome,
            reason,
            cold,
            timings,
            body,
        })
    }

    fn post_json(&self, path: &str, body: Value) -> Result<(u16, Value)> {
        let url = format!("{}{}", self.base, path);
        let mut request = self.agent.post(&url);
        for (name, value) in self.auth_headers("POST", path) {
            request = request.header(name, &value);
        }
        let mut response = request
            .send_json(body)
            .with_context(|| format!("POST {path} failed"))?;
        let status = response.status().as_u16();
        let value: Value = response
            .body_mut()
            .read_json()
            .unwrap_or(Value::Null);
        Ok((status, value))
    }

    pub fn request_token(&self, object: &str, action: &str) -> Result<(u16, Value)> {
        self.post_json(
            "/token/request",
            serde_json::json!({ "object": object, "action": action }),
        )
    }

    pub fn delegate(&self, target: &str) -> Result<(u16, Value)> {
        self.post_json("/token/delegate", serde_json::json!({ "target": target }))
    }

    pub fn admin_revoke(&self, subject: &str, mode: &str) -> Result<(u16, Value)> {
        self.post_json(
            "/admin/revoke",
            serde_json::json!({ "subject": subject, "mode": mode }),
        )
    }

    pub fn health(&self) -> Result<Value> {
        let url = format!("{}/health", self.base);
        let mut response = self.agent.get(&url).call()?;
        Ok(response.body_mut().read_json()?)
    }
}
