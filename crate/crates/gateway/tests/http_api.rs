//! End-to-end tests of the gateway endpoints: request authentication,
//! token administration flows, and parity between HTTP statuses and the
//! enforcement decisions.

use std::sync::{Arc, Mutex};
use std::time::Duration;

use blendcac::authz::{
    DomainOwner, Outcome, PolicyRule, ServiceProvider, SubjectMatch,
};
use blendcac::capcontract::{
    CallOutcome, ContractCall, ContractKind, ContextConstraint, ContextSet,
};
use blendcac::identity::{derive_address, EntityKind, EntityProfile, EntityStatus};
use blendcac::{AccessRight, AccessRightSet, Address, KeyPair, Node, Vid};
use blendcac_gateway::client::GatewayClient;
use blendcac_gateway::http::{spawn_server, AdminState, AppState};
use blendcac_gateway::keystore::Keystore;
use blendcac_gateway::models::Pipeline;
use blendcac_gateway::ops;

struct TestWorld {
    node: Arc<Node>,
    owner_keypair: KeyPair,
    contract: Address,
    object: Vid,
    provider: Arc<ServiceProvider>,
    keystore_dir: tempfile::TempDir,
}

fn rights(s: &str) -> AccessRightSet {
    AccessRightSet::parse_compact(s).unwrap()
}

impl TestWorld {
    fn new() -> Self {
        let node = Arc::new(Node::new(Duration::ZERO));
        let owner_keypair = KeyPair::generate().unwrap();
        let object = Vid(Address([0x0B; 20]));

        let receipt = ops::submit_sealed(
            &node,
            &owner_keypair,
            Address::ZERO,
            &ContractCall::Deploy {
                kind: ContractKind::Capability,
            },
        )
        .unwrap();
        let CallOutcome::Deployed { address, .. } = ops::expect_outcome(receipt).unwrap() else {
            unreachable!()
        };

        let provider = Arc::new(
            ServiceProvider::new(node.clone(), address, object)
                .with_resource("data", b"secret bytes".to_vec())
                .with_location("lab")
                .with_fixed_time("12:00".parse().unwrap()),
        );
        TestWorld {
            node,
            owner_keypair,
            contract: address,
            object,
            provider,
            keystore_dir: tempfile::tempdir().unwrap(),
        }
    }

    fn issue(&self, subject: &KeyPair, rights_s: &str, depth: u32, context: ContextSet) {
        let receipt = ops::submit_sealed(
            &self.node,
            &self.owner_keypair,
            self.contract,
            &ContractCall::Issue {
                subject: Vid(derive_address(&subject.public_key())),
                object: self.object,
                depth,
                rights: rights(rights_s),
                context,
            },
        )
        .unwrap();
        ops::expect_outcome(receipt).unwrap();
    }

    fn owner(&self, policy: Vec<PolicyRule>) -> DomainOwner {
        DomainOwner::new(self.owner_keypair.clone(), policy).unwrap()
    }

    fn app_state(&self, owner: DomainOwner) -> Arc<AppState> {
        let keystore = Keystore::open(self.keystore_dir.path()).unwrap();
        let admin = AdminState {
            owner: Mutex::new(owner),
            node: self.node.clone(),
            contract: self.contract,
            keystore: Some(keystore),
        };
        Arc::new(AppState::new(
            Pipeline::Blendcac(self.provider.clone()),
            self.node.clone(),
            Some(admin),
            true,
        ))
    }
}

#[test]
fn resource_endpoint_matches_direct_decisions() {
    let world = TestWorld::new();
    let subject = KeyPair::generate().unwrap();
    let window_subject = KeyPair::generate().unwrap();
    let stranger = KeyPair::generate().unwrap();

    world.issue(&subject, "R", 1, ContextSet::empty());
    // Night-window token: the provider's pinned clock (12:00) is outside.
    world.issue(
        &window_subject,
        "R",
        0,
        ContextSet::new([ContextConstraint::TimeWindow {
            start: "22:00".parse().unwrap(),
            end: "06:00".parse().unwrap(),
        }]),
    );

    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();

    let cases: Vec<(&KeyPair, u16)> = vec![
        (&subject, 200),
        (&window_subject, 403),
        (&stranger, 403),
    ];
    for (keypair, expected_status) in cases {
        let client = GatewayClient::new(server.base_url(), keypair.clone());
        let obs = client.get_resource("data").unwrap();
        assert_eq!(obs.status, expected_status);

        // Parity: the HTTP status must match the decision the enforcement
        // pipeline produces for identical inputs.
        let direct = world.provider.handle_service_request(
            derive_address(&keypair.public_key()),
            "data",
            AccessRight::Read,
        );
        assert_eq!(
            obs.status == 200,
            direct.decision.outcome == Outcome::Grant,
            "status/decision parity"
        );
        assert_eq!(obs.reason, direct.decision.reason);
    }
}

#[test]
fn granted_request_returns_resource_and_timings() {
    let world = TestWorld::new();
    let subject = KeyPair::generate().unwrap();
    world.issue(&subject, "R", 1, ContextSet::empty());

    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();
    let client = GatewayClient::new(server.base_url(), subject);

    let obs = client.get_resource("data").unwrap();
    assert_eq!(obs.status, 200);
    assert_eq!(obs.body, b"secret bytes");
    assert!(obs.cold);
    assert!(obs.timings.identity_holds(Duration::from_millis(1)));

    let warm = client.get_resource("data").unwrap();
    assert!(!warm.cold);

    // Unknown resource on a granted request is a 404, not a denial.
    let missing = client.get_resource("nope").unwrap();
    assert_eq!(missing.status, 404);
}

#[test]
fn authentication_failures_are_401() {
    let world = TestWorld::new();
    let subject = KeyPair::generate().unwrap();
    world.issue(&subject, "R", 1, ContextSet::empty());
    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let url = format!("{}/resource/data", server.base_url());

    // Missing headers entirely.
    let resp = agent.get(&url).call().unwrap();
    assert_eq!(resp.status().as_u16(), 401);

    // Signature by a different key than the claimed address.
    let impostor = KeyPair::generate().unwrap();
    let claimed = derive_address(&subject.public_key());
    let sig = impostor.sign(&blendcac_gateway::http::request_preimage(
        "GET",
        "/resource/data",
        1,
    ));
    let resp = agent
        .get(&url)
        .header("x-address", claimed.to_string())
        .header("x-public-key", impostor.public_key().to_string())
        .header("x-signature", sig.to_string())
        .header("x-nonce", "1")
        .call()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 401);

    // Correct signature but replayed nonce.
    let good_sig = subject.sign(&blendcac_gateway::http::request_preimage(
        "GET",
        "/resource/data",
        7,
    ));
    let send = || {
        agent
            .get(&url)
            .header("x-address", claimed.to_string())
            .header("x-public-key", subject.public_key().to_string())
            .header("x-signature", good_sig.to_string())
            .header("x-nonce", "7")
            .call()
            .unwrap()
    };
    assert_eq!(send().status().as_u16(), 200);
    assert_eq!(send().status().as_u16(), 401, "nonce replay rejected");
}

#[test]
fn token_request_flow_mints_queryable_token() {
    let world = TestWorld::new();
    let device = KeyPair::generate().unwrap();
    let device_vid = Vid(derive_address(&device.public_key()));

    let rule = PolicyRule {
        rule_id: 1,
        subject_match: SubjectMatch::Kind(EntityKind::Device),
        object: world.object,
        grant_rights: rights("R"),
        grant_context: ContextSet::empty(),
        grant_depth: 1,
        priority: 0,
    };
    let mut owner = world.owner(vec![rule]);
    owner
        .register_profile(EntityProfile {
            vid: device_vid,
            kind: EntityKind::Device,
            display_name: "cam".into(),
            registered_at: 0,
            status: EntityStatus::Active,
        })
        .unwrap();

    let state = world.app_state(owner);
    let server = spawn_server(state).unwrap();
    let client = GatewayClient::new(server.base_url(), device);

    let (status, body) = client
        .request_token(&world.object.to_string(), "READ")
        .unwrap();
    assert_eq!(status, 202, "{body}");
    assert_eq!(body["contract"], world.contract.to_string());
    let token_id = body["token_id"].as_str().unwrap();
    assert!(token_id.starts_with("0x"));

    // The minted token is immediately live for the resource path.
    let obs = client.get_resource("data").unwrap();
    assert_eq!(obs.status, 200);

    // An unregistered requester is rejected by the decision point.
    let ghost = GatewayClient::new(server.base_url(), KeyPair::generate().unwrap());
    let (status, _) = ghost
        .request_token(&world.object.to_string(), "READ")
        .unwrap();
    assert_eq!(status, 403);
}

#[test]
fn delegate_flow_until_depth_exhausted() {
    let world = TestWorld::new();
    let keystore = Keystore::open(world.keystore_dir.path()).unwrap();
    let subject = keystore.generate("device1").unwrap();
    world.issue(&subject.keypair, "R", 1, ContextSet::empty());

    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();
    let client = GatewayClient::new(server.base_url(), subject.keypair.clone());

    let target = Address([0xB0; 20]);
    let (status, body) = client.delegate(&target.to_string()).unwrap();
    assert_eq!(status, 202, "{body}");
    assert_eq!(body["delegatee_count"], 1);

    // Depth 1 is now exhausted; the error quotes the remaining depth.
    let (status, body) = client.delegate(&Address([0xE0; 20]).to_string()).unwrap();
    assert_eq!(status, 409);
    assert!(
        body["error"].as_str().unwrap().contains("remaining depth 0"),
        "{body}"
    );

    // The delegatee now reaches the resource.
    let delegatee = GatewayClient::new(server.base_url(), KeyPair::generate().unwrap());
    let _ = delegatee; // delegatee address differs from target; use direct check
    let direct = world
        .provider
        .handle_service_request(target, "data", AccessRight::Read);
    assert!(direct.decision.is_grant());
}

#[test]
fn admin_revoke_is_owner_gated_and_converges() {
    let world = TestWorld::new();
    let subject = KeyPair::generate().unwrap();
    let subject_addr = derive_address(&subject.public_key());
    world.issue(&subject, "R", 1, ContextSet::empty());

    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();

    let subject_client = GatewayClient::new(server.base_url(), subject.clone());
    assert_eq!(subject_client.get_resource("data").unwrap().status, 200);

    // Non-owner cannot revoke.
    let (status, _) = subject_client
        .admin_revoke(&subject_addr.to_string(), "disable")
        .unwrap();
    assert_eq!(status, 403);

    // Owner revokes; after one cache refresh the subject is denied.
    let owner_client = GatewayClient::new(server.base_url(), world.owner_keypair.clone());
    let (status, body) = owner_client
        .admin_revoke(&subject_addr.to_string(), "disable")
        .unwrap();
    assert_eq!(status, 200, "{body}");

    world.provider.refresh_cache();
    let obs = subject_client.get_resource("data").unwrap();
    assert_eq!(obs.status, 403);
    assert_eq!(obs.reason, blendcac::Reason::TokenDisabled);
}

#[test]
fn health_reports_chain_state() {
    let world = TestWorld::new();
    let state = world.app_state(world.owner(vec![]));
    let server = spawn_server(state).unwrap();
    let client = GatewayClient::new(server.base_url(), KeyPair::generate().unwrap());
    let health = client.health().unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["model"], "blendcac");
    assert!(health["height"].as_u64().unwrap() >= 1);
}
