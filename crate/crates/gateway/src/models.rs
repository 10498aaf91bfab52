//! Per-model enforcement pipelines behind the resource endpoint.
//!
//! `blendcac` wraps the capability service provider; `rbac`/`abac` run the
//! equivalent staged pipeline with role or attribute payloads fetched from
//! their ledger contracts and a local store searched during verification;
//! `none` serves resources with no access control, as the benchmark
//! baseline.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use blendcac::authz::{
    Decision, Reason, ServiceProvider, ServiceResponse, SimulatedLatency, StageTimings,
};
use blendcac::baselines::{abac_check_with_attributes, rbac_check_with_roles, BaselineStore};
use blendcac::{AccessRight, Address, Node, Vid};

/// Which access-control model a server enforces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Blendcac,
    Rbac,
    Abac,
    None,
}

impl std::str::FromStr for Model {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "blendcac" => Ok(Model::Blendcac),
            "rbac" => Ok(Model::Rbac),
            "abac" => Ok(Model::Abac),
            "none" => Ok(Model::None),
            other => Err(format!("unknown model '{other}' (blendcac|rbac|abac|none)")),
        }
    }
}

impl std::fmt::Display for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Model::Blendcac => write!(f, "blendcac"),
            Model::Rbac => write!(f, "rbac"),
            Model::Abac => write!(f, "abac"),
            Model::None => write!(f, "none"),
        }
    }
}

/// RBAC/ABAC enforcement point: same stage structure as the capability
/// provider, with the authorization representation from the baseline
/// contract and the grant search over the local store.
pub struct BaselineProvider {
    node: Arc<Node>,
    contract: Address,
    model: Model,
    object: Vid,
    store: BaselineStore,
    resources: HashMap<String, Vec<u8>>,
    cache: RwLock<BTreeMap<Address, (String, u64)>>,
    cache_enabled: bool,
    sim: SimulatedLatency,
}

/// Cached payload: the user's roles or attributes as fetched from the
/// contract, JSON-encoded like the capability token.
#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum AuthPayload {
    Roles(std::collections::BTreeSet<String>),
    Attributes(BTreeMap<String, String>),
}

impl BaselineProvider {
    pub fn new(node: Arc<Node>, contract: Address, model: Model, object: Vid, store: BaselineStore) -> Self {
        assert!(matches!(model, Model::Rbac | Model::Abac));
        BaselineProvider {
            node,
            contract,
            model,
            object,
            store,
            resources: HashMap::new(),
            cache: RwLock::new(BTreeMap::new()),
            cache_enabled: true,
            sim: SimulatedLatency::default(),
        }
    }

    pub fn with_resource(mut self, id: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.resources.insert(id.into(), bytes);
        self
    }

    pub fn with_cache_enabled(mut self, enabled: bool) -> Self {
        self.cache_enabled = enabled;
        self
    }

    pub fn with_simulated_latency(mut self, sim: SimulatedLatency) -> Self {
        self.sim = sim;
        self
    }

    pub fn store(&self) -> &BaselineStore {
        &self.store
    }

    fn fetch_payload(&self, requester: &Address) -> Option<(String, u64)> {
        let snap = self.node.get_contract_state(self.contract, None).ok()?;
        let json = match self.model {
            Model::Rbac => {
                let roles = snap.state.as_role()?.roles_of(requester);
                serde_json::to_string(&AuthPayload::Roles(roles)).ok()?
            }
            Model::Abac => {
                let attrs = snap.state.as_attribute()?.attributes_of(requester);
                serde_json::to_string(&AuthPayload::Attributes(attrs)).ok()?
            }
            _ => unreachable!(),
        };
        Some((json, snap.height))
    }

    /// Refreshes every tracked cache entry from the chain tip.
    pub fn refresh_cache(&self) -> usize {
        let tracked: Vec<Address> = self.cache.read().unwrap().keys().copied().collect();
        let mut refreshed = 0;
        for addr in tracked {
            if let Some(entry) = self.fetch_payload(&addr) {
                self.cache.write().unwrap().insert(addr, entry);
                refreshed += 1;
            }
        }
        refreshed
    }

    pub fn handle(&self, requester: Address, resource_id: &str, action: AccessRight) -> ServiceResponse {
        let rtt_start = Instant::now();
        if !self.sim.rtt.is_zero() {
            std::thread::sleep(self.sim.rtt);
        }
        let rtt = rtt_start.elapsed();

        let tq_start = Instant::now();
        let cached = if self.cache_enabled {
            self.cache.read().unwrap().get(&requester).cloned()
        } else {
            None
        };
        let (json, cold) = match cached {
            Some((json, _)) => (json, false),
            None => {
                if !self.sim.chain_query.is_zero() {
                    std::thread::sleep(self.sim.chain_query);
                }
                match self.fetch_payload(&requester) {
                    Some((json, height)) => {
                        if self.cache_enabled {
                            self.cache
                                .write()
                                .unwrap()
                                .insert(requester, (json.clone(), height));
                        }
                        (json, true)
                    }
                    None => {
                        let decision = Decision {
                            timings: StageTimings::from_stages(
                                rtt,
                                tq_start.elapsed(),
                                Duration::ZERO,
                                Duration::ZERO,
                                Duration::ZERO,
                            ),
                            ..Decision::deny(Reason::StaleCacheMiss)
                        };
                        return ServiceResponse {
                            decision,
                            payload: None,
                            cold: true,
                        };
                    }
                }
            }
        };
        let token_query = tq_start.elapsed();

        let parse_start = Instant::now();
        let payload: Result<AuthPayload, _> = serde_json::from_str(&json);
        let json_parse = parse_start.elapsed();

        // Validation stage: the payload's structural health, the analog of
        // the token valid-status check.
        let val_start = Instant::now();
        let payload = match payload {
            Ok(p) => p,
            Err(_) => {
                let decision = Decision {
                    timings: StageTimings::from_stages(
                        rtt,
                        token_query,
                        json_parse,
                        val_start.elapsed(),
                        Duration::ZERO,
                    ),
                    ..Decision::deny(Reason::TokenDisabled)
                };
                return ServiceResponse {
                    decision,
                    payload: None,
                    cold,
                };
            }
        };
        let token_validation = val_start.elapsed();

        let verify_start = Instant::now();
        let verdict = match (&payload, self.model) {
            (AuthPayload::Roles(roles), Model::Rbac) => {
                rbac_check_with_roles(roles, &self.object, action, &self.store)
            }
            (AuthPayload::Attributes(attrs), Model::Abac) => {
                abac_check_with_attributes(attrs, &self.object, action, &self.store)
            }
            // Shape mismatch (e.g. empty roles deserialized as attributes):
            // scan finds nothing, deny.
            (AuthPayload::Roles(roles), _) => {
                rbac_check_with_roles(roles, &self.object, action, &self.store)
            }
            (AuthPayload::Attributes(attrs), _) => {
                abac_check_with_attributes(attrs, &self.object, action, &self.store)
            }
        };
        let authorization_verification = verify_start.elapsed();

        let mut decision = if verdict.granted {
            Decision::grant()
        } else {
            Decision::deny(Reason::ActionNotInAr)
        };
        decision.timings = StageTimings::from_stages(
            rtt,
            token_query,
            json_parse,
            token_validation,
            authorization_verification,
        );
        let payload_bytes = if decision.is_grant() {
            self.resources.get(resource_id).cloned()
        } else {
            None
        };
        ServiceResponse {
            decision,
            payload: payload_bytes,
            cold,
        }
    }
}

/// No access control: every request is served immediately.
pub struct NoneProvider {
    resources: HashMap<String, Vec<u8>>,
}

impl NoneProvider {
    pub fn new() -> Self {
        NoneProvider {
            resources: HashMap::new(),
        }
    }

    pub fn with_resource(mut self, id: impl Into<String>, bytes: Vec<u8>) -> Self {
        self.resources.insert(id.into(), bytes);
        self
    }

    pub fn handle(&self, resource_id: &str) -> ServiceResponse {
        ServiceResponse {
            decision: Decision::grant(),
            payload: self.resources.get(resource_id).cloned(),
            cold: false,
        }
    }
}

impl Default for NoneProvider {
    fn default() -> Self {
        Self::new()
    }
}

/// The model-dispatched enforcement pipeline behind `GET /resource/{id}`.
#[derive(Clone)]
pub enum Pipeline {
    Blendcac(Arc<ServiceProvider>),
    Rbac(Arc<BaselineProvider>),
    Abac(Arc<BaselineProvider>),
    None(Arc<NoneProvider>),
}

impl Pipeline {
    pub fn model(&self) -> Model {
        match self {
            Pipeline::Blendcac(_) => Model::Blendcac,
            Pipeline::Rbac(_) => Model::Rbac,
            Pipeline::Abac(_) => Model::Abac,
            Pipeline::None(_) => Model::None,
        }
    }

    pub fn handle(&self, requester: Address, resource_id: &str, action: AccessRight) -> ServiceResponse {
        match self {
            Pipeline::Blendcac(p) => p.handle_service_request(requester, resource_id, action),
            Pipeline::Rbac(p) | Pipeline::Abac(p) => p.handle(requester, resource_id, action),
            Pipeline::None(p) => p.handle(resource_id),
        }
    }

    /// Background-refreshable caches, if the model has one.
    pub fn refresh_cache(&self) -> usize {
        match self {
            Pipeline::Blendcac(p) => p.refresh_cache(),
            Pipeline::Rbac(p) | Pipeline::Abac(p) => p.refresh_cache(),
            Pipeline::None(_) => 0,
        }
    }
}
