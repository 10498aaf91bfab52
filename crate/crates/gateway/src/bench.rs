//! Benchmark harness: a two-node world (sealing node, provider node), a
//! gateway server in front of the provider, and a sequential client
//! driving timed resource requests.
//!
//! Simulated latencies stand in for the remote chain and the physical
//! network, so a desk-scale run reproduces the stage structure of the
//! live testbed: the on-chain token query dominates the cold path, cached
//! requests settle at a low stable level, and the baselines pay a store
//! search per verification.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};

use blendcac::authz::{
    Decision, DomainOwner, Outcome, PolicyOutcome, PolicyRule, Reason, ServiceProvider,
    SimulatedLatency, StageTimings, SubjectMatch,
};
use blendcac::baselines::{AttributeRule, BaselineStore, RolePermission};
use blendcac::capcontract::{CallOutcome, ContractCall, ContractKind, ContextSet};
use blendcac::identity::{derive_address, EntityKind, EntityProfile, EntityStatus};
use blendcac::ledger::{start_sealer, start_sync, TaskHandle};
use blendcac::{AccessRightSet, Address, KeyPair, Node, Vid};

use crate::client::GatewayClient;
use crate::http::{spawn_server, AppState};
use crate::models::{BaselineProvider, Model, NoneProvider, Pipeline};
use crate::ops;

/// Benchmark parameters. `seed` fixes the generated actor keys so two
/// executions produce identical decision sequences.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub runs: u32,
    pub model: Model,
    pub simulated_chain_query_latency: Duration,
    pub simulated_rtt: Duration,
    pub block_interval: Duration,
    pub store_size: usize,
    pub output_path: Option<PathBuf>,
    pub seed: u64,
    /// With the cache off, every request pays the on-chain token query,
    /// the maximum-latency scenario of the stage-decomposition experiment.
    pub use_cache: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            runs: 50,
            model: Model::Blendcac,
            simulated_chain_query_latency: Duration::ZERO,
            simulated_rtt: Duration::ZERO,
            block_interval: Duration::from_secs(1),
            store_size: 1000,
            output_path: None,
            seed: 0,
            use_cache: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 1 {
            bail!("runs must be at least 1");
        }
        Ok(())
    }
}

/// One benchmark request.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub seq: u32,
    pub cold: bool,
    pub decision: Decision,
}

/// Mean/median/p95 for one stage across all rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageStats {
    pub mean: Duration,
    pub median: Duration,
    pub p95: Duration,
}

/// Aggregates per stage, recomputable from the rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Aggregate {
    pub rtt: StageStats,
    pub token_query: StageStats,
    pub parse: StageStats,
    pub validation: StageStats,
    pub verification: StageStats,
    pub total: StageStats,
}

fn stats(mut values: Vec<Duration>) -> StageStats {
    assert!(!values.is_empty());
    values.sort();
    let mean = values.iter().sum::<Duration>() / values.len() as u32;
    let median = median_of_sorted(&values);
    let p95_idx = ((values.len() as f64) * 0.95).ceil() as usize;
    let p95 = values[p95_idx.saturating_sub(1).min(values.len() - 1)];
    StageStats { mean, median, p95 }
}

fn median_of_sorted(sorted: &[Duration]) -> Duration {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2
    }
}

/// Median of arbitrary durations (used by the acceptance suite as well).
pub fn median(values: &[Duration]) -> Duration {
    let mut sorted = values.to_vec();
    assert!(!sorted.is_empty());
    sorted.sort();
    median_of_sorted(&sorted)
}

pub fn compute_aggregate(rows: &[BenchRow]) -> Aggregate {
    let pick = |f: fn(&StageTimings) -> Duration| -> StageStats {
        stats(rows.iter().map(|r| f(&r.decision.timings)).collect())
    };
    Aggregate {
        rtt: pick(|t| t.rtt),
        token_query: pick(|t| t.token_query),
        parse: pick(|t| t.json_parse),
        validation: pick(|t| t.token_validation),
        verification: pick(|t| t.authorization_verification),
        total: pick(|t| t.total),
    }
}

/// Full benchmark output: per-run rows plus per-stage aggregates.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub model: Model,
    pub rows: Vec<BenchRow>,
    pub aggregate: Aggregate,
}

impl ExperimentReport {
    pub fn new(model: Model, rows: Vec<BenchRow>) -> Self {
        let aggregate = compute_aggregate(&rows);
        ExperimentReport {
            model,
            rows,
            aggregate,
        }
    }

    /// The aggregate is derived data; this re-derives and compares.
    pub fn aggregate_consistent(&self) -> bool {
        compute_aggregate(&self.rows) == self.aggregate
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(StageTimings::csv_header());
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.decision.csv_row(row.seq as usize));
            out.push('\n');
        }
        out
    }

    pub fn warm_rows(&self) -> &[BenchRow] {
        if self.rows.len() > 1 {
            &self.rows[1..]
        } else {
            &self.rows
        }
    }

    pub fn first_total(&self) -> Duration {
        self.rows.first().map(|r| r.decision.timings.total).unwrap_or_default()
    }

    pub fn warm_median_total(&self) -> Duration {
        median(
            &self
                .warm_rows()
                .iter()
                .map(|r| r.decision.timings.total)
                .collect::<Vec<_>>(),
        )
    }

    pub fn median_verification(&self) -> Duration {
        median(
            &self
                .rows
                .iter()
                .map(|r| r.decision.timings.authorization_verification)
                .collect::<Vec<_>>(),
        )
    }

    /// Mean token-query share of the mean total, the stage-dominance
    /// metric.
    pub fn token_query_share(&self) -> f64 {
        let total: Duration = self.rows.iter().map(|r| r.decision.timings.total).sum();
        let tq: Duration = self
            .rows
            .iter()
            .map(|r| r.decision.timings.token_query)
            .sum();
        if total.is_zero() {
            0.0
        } else {
            tq.as_secs_f64() / total.as_secs_f64()
        }
    }

    /// Grant/deny sequence, the reproducibility fingerprint.
    pub fn outcome_sequence(&self) -> Vec<(Outcome, Reason)> {
        self.rows
            .iter()
            .map(|r| (r.decision.outcome, r.decision.reason))
            .collect()
    }

    pub fn summary(&self) -> String {
        let a = &self.aggregate;
        let mut out = String::new();
        out.push_str(&format!(
            "model={} runs={} cold_first_run={}\n",
            self.model,
            self.rows.len(),
            self.rows.first().map(|r| r.cold).unwrap_or(false),
        ));
        out.push_str(&format!(
            "first_total={}us warm_median_total={}us token_query_share={:.1}%\n",
            self.first_total().as_micros(),
            self.warm_median_total().as_micros(),
            self.token_query_share() * 100.0,
        ));
        out.push_str("stage            mean_us   median_us      p95_us\n");
        let mut line = |name: &str, s: &StageStats| {
            out.push_str(&format!(
                "{name:<14} {:>9} {:>11} {:>11}\n",
                s.mean.as_micros(),
                s.median.as_micros(),
                s.p95.as_micros()
            ));
        };
        line("rtt", &a.rtt);
        line("token_query", &a.token_query);
        line("parse", &a.parse);
        line("validation", &a.validation);
        line("verification", &a.verification);
        line("total", &a.total);
        out
    }
}

/// A parsed CSV row, for report post-processing and tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvRow {
    pub seq: u64,
    pub rtt_us: u64,
    pub token_query_us: u64,
    pub parse_us: u64,
    pub validation_us: u64,
    pub verification_us: u64,
    pub total_us: u64,
    pub outcome: String,
    pub reason: String,
}

/// Parses the emitted CSV format back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty csv")?;
    if header != StageTimings::csv_header() {
        bail!("unexpected csv header: {header}");
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            bail!("csv line {}: expected 9 fields", idx + 2);
        }
        let num = |i: usize| -> Result<u64> {
            fields[i]
                .parse()
                .with_context(|| format!("csv line {}: bad number", idx + 2))
        };
        rows.push(CsvRow {
            seq: num(0)?,
            rtt_us: num(1)?,
            token_query_us: num(2)?,
            parse_us: num(3)?,
            validation_us: num(4)?,
            verification_us: num(5)?,
            total_us: num(6)?,
            outcome: fields[7].to_string(),
            reason: fields[8].to_string(),
        });
    }
    Ok(rows)
}

/// Deterministic seed stream (splitmix64) for benchmark actors.
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn seed32(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for chunk in out.chunks_mut(8) {
            chunk.copy_from_slice(&self.next_u64().to_be_bytes());
        }
        out
    }

    pub fn keypair(&mut self) -> KeyPair {
        KeyPair::from_seed(self.seed32()).expect("seed-derived keypair")
    }
}

/// RBAC store for the benchmark: `size` permissions with the single
/// matching grant placed last, so the verification search walks the whole
/// table.
pub fn rbac_store_for_bench(size: usize, object: Vid) -> BaselineStore {
    let mut store = BaselineStore::default();
    let size = size.max(1);
    for i in 0..size - 1 {
        let mut raw = [0u8; 20];
        raw[..8].copy_from_slice(&(i as u64 + 1).to_be_bytes());
        store.perms.push(RolePermission {
            role: format!("bystander_{i}"),
            object: Vid(Address(raw)),
            rights: AccessRightSet::parse_compact("R").unwrap(),
        });
    }
    store.perms.push(RolePermission {
        role: "operator".into(),
        object,
        rights: AccessRightSet::parse_compact("R").unwrap(),
    });
    store
}

/// ABAC store for the benchmark, matching rule last.
pub fn abac_store_for_bench(size: usize, object: Vid) -> BaselineStore {
    let mut store = BaselineStore::default();
    let size = size.max(1);
    for i in 0..size - 1 {
        let mut raw = [0u8; 20];
        raw[..8].copy_from_slice(&(i as u64 + 1).to_be_bytes());
        store.rules.push(AttributeRule {
            rule_id: i as u32 + 1,
            required_attributes: [(format!("team_{i}"), "x".to_string())].into(),
            object: Vid(Address(raw)),
            rights: AccessRightSet::parse_compact("R").unwrap(),
        });
    }
    store.rules.push(AttributeRule {
        rule_id: size as u32,
        required_attributes: [("dept".to_string(), "lab".to_string())].into(),
        object,
        rights: AccessRightSet::parse_compact("R").unwrap(),
    });
    store
}

/// The assembled world the benchmark (and the end-to-end tests) run on.
pub struct BenchWorld {
    pub owner_node: Arc<Node>,
    pub provider_node: Arc<Node>,
    pub owner_keypair: KeyPair,
    pub client_keypair: KeyPair,
    pub object: Vid,
    pub contract: Option<Address>,
    pub pipeline: Pipeline,
    tasks: Vec<TaskHandle>,
}

impl BenchWorld {
    /// Stops background tasks (sealer, sync, refresh).
    pub fn stop_tasks(&mut self) {
        self.tasks.clear();
    }
}

const RESOURCE_ID: &str = "data";
const RESOURCE_BYTES: usize = 256;

/// Builds the two-node world for `config`: deploys the model's contract,
/// provisions the client's authorization through the policy decision
/// point, syncs the provider node and starts the background tasks.
pub fn setup_world(config: &ExperimentConfig) -> Result<BenchWorld> {
    config.validate()?;
    let mut seeds = SeedStream::new(config.seed ^ 0x42C4_0CAC_5EED_0001);
    let owner_keypair = seeds.keypair();
    let client_keypair = seeds.keypair();
    let server_keypair = seeds.keypair();

    let client_addr = derive_address(&client_keypair.public_key());
    let object = Vid(derive_address(&server_keypair.public_key()));

    let owner_node = Arc::new(Node::new(config.block_interval));
    let provider_node = Arc::new(Node::new(config.block_interval));

    let rule = PolicyRule {
        rule_id: 1,
        subject_match: SubjectMatch::Kind(EntityKind::Device),
        object,
        grant_rights: AccessRightSet::parse_compact("R").unwrap(),
        grant_context: ContextSet::empty(),
        grant_depth: 1,
        priority: 10,
    };
    let mut owner = DomainOwner::new(owner_keypair.clone(), vec![rule])?;
    for (kp, name) in [(&client_keypair, "bench-client"), (&server_keypair, "bench-server")] {
        owner.register_profile(EntityProfile {
            vid: Vid(derive_address(&kp.public_key())),
            kind: EntityKind::Device,
            display_name: name.into(),
            registered_at: 0,
            status: EntityStatus::Active,
        })?;
    }

    let resource = vec![0x5A; RESOURCE_BYTES];
    let sim = SimulatedLatency {
        chain_query: config.simulated_chain_query_latency,
        rtt: config.simulated_rtt,
    };

    let mut contract_addr = None;
    let pipeline = match config.model {
        Model::None => {
            Pipeline::None(Arc::new(NoneProvider::new().with_resource(RESOURCE_ID, resource)))
        }
        Model::Blendcac => {
            let receipt = ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                Address::ZERO,
                &ContractCall::Deploy {
                    kind: ContractKind::Capability,
                },
            )?;
            let CallOutcome::Deployed { address, .. } = ops::expect_outcome(receipt)? else {
                bail!("deploy produced no address");
            };
            contract_addr = Some(address);

            // Capability propagation: the policy decision point evaluates
            // the client's access-right request and mints the token.
            let spec = match owner.evaluate_access_right_request(client_addr, object)? {
                PolicyOutcome::Grant(spec) => spec,
                PolicyOutcome::Denied => bail!("benchmark policy rejected the client"),
            };
            ops::expect_outcome(ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                address,
                &ContractCall::Issue {
                    subject: Vid(client_addr),
                    object,
                    depth: spec.depth,
                    rights: spec.rights,
                    context: spec.context,
                },
            )?)?;
            provider_node.sync(&owner_node.chain_snapshot());

            let provider = ServiceProvider::new(provider_node.clone(), address, object)
                .with_resource(RESOURCE_ID, resource)
                .with_simulated_latency(sim)
                .with_cache_enabled(config.use_cache)
                .with_refresh_interval(config.block_interval);
            Pipeline::Blendcac(Arc::new(provider))
        }
        Model::Rbac => {
            let receipt = ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                Address::ZERO,
                &ContractCall::Deploy {
                    kind: ContractKind::Role,
                },
            )?;
            let CallOutcome::Deployed { address, .. } = ops::expect_outcome(receipt)? else {
                bail!("deploy produced no address");
            };
            contract_addr = Some(address);
            ops::expect_outcome(ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                address,
                &ContractCall::GrantRole {
                    user: client_addr,
                    role: "operator".into(),
                },
            )?)?;
            provider_node.sync(&owner_node.chain_snapshot());

            let store = rbac_store_for_bench(config.store_size, object);
            let provider =
                BaselineProvider::new(provider_node.clone(), address, Model::Rbac, object, store)
                    .with_resource(RESOURCE_ID, resource)
                    .with_simulated_latency(sim)
                    .with_cache_enabled(config.use_cache);
            Pipeline::Rbac(Arc::new(provider))
        }
        Model::Abac => {
            let receipt = ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                Address::ZERO,
                &ContractCall::Deploy {
                    kind: ContractKind::Attribute,
                },
            )?;
            let CallOutcome::Deployed { address, .. } = ops::expect_outcome(receipt)? else {
                bail!("deploy produced no address");
            };
            contract_addr = Some(address);
            ops::expect_outcome(ops::submit_sealed(
                &owner_node,
                &owner_keypair,
                address,
                &ContractCall::SetAttribute {
                    user: client_addr,
                    name: "dept".into(),
                    value: "lab".into(),
                },
            )?)?;
            provider_node.sync(&owner_node.chain_snapshot());

            let store = abac_store_for_bench(config.store_size, object);
            let provider =
                BaselineProvider::new(provider_node.clone(), address, Model::Abac, object, store)
                    .with_resource(RESOURCE_ID, resource)
                    .with_simulated_latency(sim)
                    .with_cache_enabled(config.use_cache);
            Pipeline::Abac(Arc::new(provider))
        }
    };

    // Background machinery: interval sealer on the owner node, chain sync
    // into the provider node, cache refresh on the provider.
    let mut tasks = Vec::new();
    if config.model != Model::None {
        tasks.push(start_sealer(owner_node.clone()));
        tasks.push(start_sync(
            provider_node.clone(),
            owner_node.clone(),
            config.block_interval.max(Duration::from_millis(10)),
        ));
        let refresh_pipeline = pipeline.clone();
        tasks.push(TaskHandle::spawn(
            config.block_interval.max(Duration::from_millis(10)),
            move || {
                refresh_pipeline.refresh_cache();
            },
        ));
    }

    Ok(BenchWorld {
        owner_node,
        provider_node,
        owner_keypair,
        client_keypair,
        object,
        contract: contract_addr,
        pipeline,
        tasks,
    })
}

/// Runs `config.runs` sequential requests against a gateway in front of
/// the world's provider, emitting the CSV when an output path is set.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut world = setup_world(config)?;
    let require_auth = config.model != Model::None;
    let state = Arc::new(AppState::new(
        world.pipeline.clone(),
        world.provider_node.clone(),
        None,
        require_auth,
    ));
    let server = spawn_server(state)?;
    let client = GatewayClient::new(server.base_url(), world.client_keypair.clone());

    let mut rows = Vec::with_capacity(config.runs as usize);
    for seq in 1..=config.runs {
        let obs = client.get_resource(RESOURCE_ID)?;
        rows.push(BenchRow {
            seq,
            cold: obs.cold,
            decision: Decision {
                outcome: obs.outcome,
                reason: obs.reason,
                timings: obs.timings,
            },
        });
    }
    drop(server);
    world.stop_tasks();

    let report = ExperimentReport::new(config.model, rows);
    if let Some(path) = &config.output_path {
        std::fs::write(path, report.to_csv())
            .with_context(|| format!("writing csv to {}", path.display()))?;
    }
    Ok(report)
}

/// Minimal SVG line chart of per-run totals, generated from an emitted
/// CSV.
pub fn plot_svg(rows: &[CsvRow]) -> String {
    let width = 640.0;
    let height = 360.0;
    let margin = 48.0;
    let max_total = rows.iter().map(|r| r.total_us).max().unwrap_or(1).max(1) as f64;
    let n = rows.len().max(2) as f64;

    let mut points = String::new();
    for (i, row) in rows.iter().enumerate() {
        let x = margin + (i as f64 / (n - 1.0)) * (width - 2.0 * margin);
        let y = height - margin - (row.total_us as f64 / max_total) * (height - 2.0 * margin);
        if i > 0 {
            points.push(' ');
        }
        points.push_str(&format!("{x:.1},{y:.1}"));
    }
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<line x1=\"{m}\" y1=\"{ybase}\" x2=\"{xmax}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{ybase}\" stroke=\"black\"/>\n",
            "<text x=\"{m}\" y=\"24\" font-family=\"monospace\" font-size=\"13\">",
            "request total latency (max {max} us, {count} runs)</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"1.5\" points=\"{points}\"/>\n",
            "</svg>\n"
        ),
        w = width,
        h = height,
        m = margin,
        ybase = height - margin,
        xmax = width - margin,
        max = max_total as u64,
        count = rows.len(),
        points = points,
    )
}
