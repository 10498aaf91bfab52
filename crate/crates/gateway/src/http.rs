//! The web-service surface: resource endpoint with enforcement, owner-side
//! token administration, and health.
//!
//! Requests to protected endpoints carry the requester's address, public
//! key, a nonce and a signature over (method, path, nonce), so the server
//! binds every request to an account address. Stage timings of the
//! enforcement pipeline are returned in response headers; the benchmark
//! client folds them into its round-trip measurements.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Body;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use blendcac::authz::{DomainOwner, PolicyOutcome, ServiceResponse};
use blendcac::capcontract::{CallOutcome, ContractCall, ContractError, RevocationMode};
use blendcac::codec::Writer;
use blendcac::identity::derive_address;
use blendcac::ledger::ApplyError;
use blendcac::{AccessRight, Address, Node, PublicKey, Signature, Vid};

use crate::keystore::Keystore;
use crate::models::Pipeline;
use crate::ops;

pub const HDR_ADDRESS: &str = "x-address";
pub const HDR_PUBLIC_KEY: &str = "x-public-key";
pub const HDR_SIGNATURE: &str = "x-signature";
pub const HDR_NONCE: &str = "x-nonce";

const HTTP_SIGN_TAG: &[u8] = b"blendcac.http.v1";

/// Canonical bytes signed by a requester for one HTTP call.
pub fn request_preimage(method: &str, path: &str, nonce: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.fixed(HTTP_SIGN_TAG).string(method).string(path).u64(nonce);
    w.finish()
}

/// Owner-side administration state backing `/token/*` and `/admin/*`.
pub struct AdminState {
    pub owner: Mutex<DomainOwner>,
    /// The sealing node mutating transactions are submitted to.
    pub node: Arc<Node>,
    /// The capability contract tokens are minted into.
    pub contract: Address,
    /// Keys this gateway may sign subject-side transactions with.
    pub keystore: Option<Keystore>,
}

pub struct AppState {
    pub pipeline: Pipeline,
    /// The provider's local chain node (health endpoint).
    pub node: Arc<Node>,
    pub admin: Option<AdminState>,
    /// Disabled for the no-access-control benchmark baseline.
    pub require_auth: bool,
    http_nonces: Mutex<HashMap<Address, u64>>,
}

impl AppState {
    pub fn new(
        pipeline: Pipeline,
        node: Arc<Node>,
        admin: Option<AdminState>,
        require_auth: bool,
    ) -> Self {
        AppState {
            pipeline,
            node,
            admin,
            require_auth,
            http_nonces: Mutex::new(HashMap::new()),
        }
    }

    /// Verifies the request-binding headers: key/address binding, the
    /// signature over (method, path, nonce) and strict nonce increase.
    /// The error side is the ready-to-send rejection response.
    #[allow(clippy::result_large_err)]
    fn authenticate(
        &self,
        headers: &HeaderMap,
        method: &str,
        path: &str,
    ) -> Result<Address, Response> {
        let get_header = |name: &str| -> Result<String, Response> {
            headers
                .get(name)
                .and_then(|v| v.to_str().ok())
                .map(|s| s.to_string())
                .ok_or_else(|| error_response(StatusCode::UNAUTHORIZED, &format!("missing {name} header")))
        };
        let address = Address::from_hex(&get_header(HDR_ADDRESS)?)
            .map_err(|_| error_response(StatusCode::UNAUTHORIZED, "malformed x-address"))?;
        let public_key = PublicKey::from_hex(&get_header(HDR_PUBLIC_KEY)?)
            .map_err(|_| error_response(StatusCode::UNAUTHORIZED, "malformed x-public-key"))?;
        let signature = Signature::from_hex(&get_header(HDR_SIGNATURE)?)
            .map_err(|_| error_response(StatusCode::UNAUTHORIZED, "malformed x-signature"))?;
        let nonce: u64 = get_header(HDR_NONCE)?
            .parse()
            .map_err(|_| error_response(StatusCode::UNAUTHORIZED, "malformed x-nonce"))?;

        if derive_address(&public_key) != address {
            return Err(error_response(
                StatusCode::UNAUTHORIZED,
                "public key does not match address",
            ));
        }
        let preimage = request_preimage(method, path, nonce);
        if !blendcac::crypto::verify(&public_key, &preimage, &signature) {
            return Err(error_response(StatusCode::UNAUTHORIZED, "bad request signature"));
        }
        let mut nonces = self.http_nonces.lock().unwrap();
        let last = nonces.entry(address).or_insert(0);
        if nonce <= *last {
            return Err(error_response(StatusCode::UNAUTHORIZED, "stale request nonce"));
        }
        *last = nonce;
        Ok(address)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/resource/{id}", get(get_resource))
        .route("/token/request", post(token_request))
        .route("/token/delegate", post(token_delegate))
        .route("/admin/revoke", post(admin_revoke))
        .with_state(state)
}

fn error_response(status: StatusCode, message: &str) -> Response {
    (status, Json(json!({ "error": message }))).into_response()
}

fn stage_headers(response: &mut Response, service: &ServiceResponse) {
    let t = &service.decision.timings;
    let headers = response.headers_mut();
    let mut put = |name: &'static str, value: String| {
        headers.insert(name, value.parse().expect("ascii header"));
    };
    put("x-stage-token-query-us", t.token_query.as_micros().to_string());
    put("x-stage-parse-us", t.json_parse.as_micros().to_string());
    put("x-stage-validation-us", t.token_validation.as_micros().to_string());
    put(
        "x-stage-verification-us",
        t.authorization_verification.as_micros().to_string(),
    );
    put("x-cold", if service.cold { "1" } else { "0" }.to_string());
    put("x-outcome", service.decision.outcome.to_string());
    put("x-reason", service.decision.reason.to_string());
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let (height, _) = state.node.chain_head();
    Json(json!({
        "status": "ok",
        "model": state.pipeline.model().to_string(),
        "height": height,
        "pending": state.node.pending_len(),
    }))
    .into_response()
}

async fn get_resource(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> Response {
    let requester = if state.require_auth {
        match state.authenticate(&headers, "GET", &format!("/resource/{id}")) {
            Ok(a) => a,
            Err(resp) => return resp,
        }
    } else {
        Address::ZERO
    };

    let pipeline_state = state.clone();
    let resource_id = id.clone();
    let service = tokio::task::spawn_blocking(move || {
        pipeline_state
            .pipeline
            .handle(requester, &resource_id, AccessRight::Read)
    })
    .await
    .expect("pipeline task");

    let mut response = if service.decision.is_grant() {
        match &service.payload {
            Some(bytes) => (
                StatusCode::OK,
                [(axum::http::header::CONTENT_TYPE, "application/octet-stream")],
                Body::from(bytes.clone()),
            )
                .into_response(),
            None => error_response(StatusCode::NOT_FOUND, &format!("no such resource '{id}'")),
        }
    } else {
        (StatusCode::FORBIDDEN, Json(json!({ "decision": service.decision }))).into_response()
    };
    stage_headers(&mut response, &service);
    response
}

#[derive(Deserialize)]
struct TokenRequestBody {
    object: Vid,
    action: String,
}

async fn token_request(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<TokenRequestBody>,
) -> Response {
    let requester = match state.authenticate(&headers, "POST", "/token/request") {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let Some(admin) = state.admin.as_ref() else {
        return error_response(StatusCode::NOT_FOUND, "token administration not enabled");
    };
    let action: AccessRight = match body.action.parse() {
        Ok(a) => a,
        Err(_) => return error_response(StatusCode::BAD_REQUEST, "unknown action"),
    };

    let spec = {
        let owner = admin.owner.lock().unwrap();
        match owner.evaluate_access_right_request(requester, body.object) {
            Ok(PolicyOutcome::Grant(spec)) => spec,
            Ok(PolicyOutcome::Denied) => {
                return error_response(StatusCode::FORBIDDEN, "access right request rejected")
            }
            Err(e) => return error_response(StatusCode::FORBIDDEN, &e.to_string()),
        }
    };
    if !spec.rights.contains(action) {
        return error_response(
            StatusCode::FORBIDDEN,
            "requested action is outside the granted rights",
        );
    }

    let call = ContractCall::Issue {
        subject: Vid(requester),
        object: body.object,
        depth: spec.depth,
        rights: spec.rights,
        context: spec.context,
    };
    let node = admin.node.clone();
    let contract = admin.contract;
    let keypair = admin.owner.lock().unwrap().keypair().clone();
    let receipt =
        match tokio::task::spawn_blocking(move || ops::submit_sealed(&node, &keypair, contract, &call))
            .await
            .expect("submit task")
        {
            Ok(r) => r,
            Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
        };
    match receipt.result {
        Ok(CallOutcome::TokenIssued { id }) => (
            StatusCode::ACCEPTED,
            Json(json!({
                "contract": admin.contract.to_string(),
                "token_id": id.to_string(),
                "height": receipt.height,
            })),
        )
            .into_response(),
        Ok(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "unexpected outcome"),
        Err(e) => contract_error_response(&e),
    }
}

#[derive(Deserialize)]
struct DelegateBody {
    target: Address,
}

async fn token_delegate(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<DelegateBody>,
) -> Response {
    let requester = match state.authenticate(&headers, "POST", "/token/delegate") {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let Some(admin) = state.admin.as_ref() else {
        return error_response(StatusCode::NOT_FOUND, "token administration not enabled");
    };
    let Some(keystore) = admin.keystore.as_ref() else {
        return error_response(StatusCode::NOT_FOUND, "no keystore configured");
    };
    let Ok(Some(key)) = keystore.find_by_address(&requester) else {
        return error_response(
            StatusCode::FORBIDDEN,
            "gateway holds no key for the requester",
        );
    };

    let call = ContractCall::Delegate { target: body.target };
    let node = admin.node.clone();
    let contract = admin.contract;
    let receipt = match tokio::task::spawn_blocking(move || {
        ops::submit_sealed(&node, &key.keypair, contract, &call)
    })
    .await
    .expect("submit task")
    {
        Ok(r) => r,
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    };
    match receipt.result {
        Ok(CallOutcome::Delegated { id, delegatee_count }) => (
            StatusCode::ACCEPTED,
            Json(json!({
                "token_id": id.to_string(),
                "delegatee_count": delegatee_count,
                "height": receipt.height,
            })),
        )
            .into_response(),
        Ok(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "unexpected outcome"),
        Err(e) => contract_error_response(&e),
    }
}

#[derive(Deserialize)]
struct RevokeBody {
    subject: Address,
    mode: String,
}

async fn admin_revoke(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(body): Json<RevokeBody>,
) -> Response {
    let requester = match state.authenticate(&headers, "POST", "/admin/revoke") {
        Ok(a) => a,
        Err(resp) => return resp,
    };
    let Some(admin) = state.admin.as_ref() else {
        return error_response(StatusCode::NOT_FOUND, "token administration not enabled");
    };
    let owner_address = admin.owner.lock().unwrap().address();
    if requester != owner_address {
        return error_response(StatusCode::FORBIDDEN, "only the domain owner may revoke");
    }
    let mode: RevocationMode = match body.mode.parse() {
        Ok(m) => m,
        Err(_) => return error_response(StatusCode::BAD_REQUEST, "unknown revocation mode"),
    };

    let call = ContractCall::RevokeToken {
        subject: body.subject,
        mode,
    };
    let node = admin.node.clone();
    let contract = admin.contract;
    let keypair = admin.owner.lock().unwrap().keypair().clone();
    let receipt =
        match tokio::task::spawn_blocking(move || ops::submit_sealed(&node, &keypair, contract, &call))
            .await
            .expect("submit task")
        {
            Ok(r) => r,
            Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
        };
    match receipt.result {
        Ok(CallOutcome::TokenRevoked { id, mode }) => Json(json!({
            "token_id": id.to_string(),
            "mode": mode.to_string(),
            "height": receipt.height,
        }))
        .into_response(),
        Ok(_) => error_response(StatusCode::INTERNAL_SERVER_ERROR, "unexpected outcome"),
        Err(e) => contract_error_response(&e),
    }
}

fn contract_error_response(err: &ApplyError) -> Response {
    let status = match err {
        ApplyError::Contract(ContractError::NotOwner) => StatusCode::FORBIDDEN,
        ApplyError::Contract(ContractError::NoToken)
        | ApplyError::Contract(ContractError::NotADelegatee)
        | ApplyError::UnknownContract(_) => StatusCode::NOT_FOUND,
        ApplyError::Contract(ContractError::DepthExhausted { .. })
        | ApplyError::Contract(ContractError::SubjectAlreadyHasToken)
        | ApplyError::Contract(ContractError::DuplicateDelegatee)
        | ApplyError::Contract(ContractError::SelfDelegation)
        | ApplyError::Contract(ContractError::TokenDisabled) => StatusCode::CONFLICT,
        _ => StatusCode::BAD_REQUEST,
    };
    error_response(status, &err.to_string())
}

/// Runs the service until `shutdown` resolves.
pub async fn serve_async(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server running on its own runtime thread; shuts down when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Binds an ephemeral loopback port and serves `state` on a dedicated
/// runtime thread.
pub fn spawn_server(state: Arc<AppState>) -> anyhow::Result<ServerHandle> {
    let listener = std::net::TcpListener::bind("127.0.0.1:0")?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let join = std::thread::spawn(move || {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .expect("runtime");
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(listener).expect("listener");
            let _ = serve_async(listener, state, async {
                let _ = rx.await;
            })
            .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        join: Some(join),
    })
}
