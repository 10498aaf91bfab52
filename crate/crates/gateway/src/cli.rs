//! Administrator command-line interface.
//!
//! Mutating commands open the data directory's chain log, submit the
//! signed transaction and seal a block on the spot (the CLI is the
//! domain-owner process, which is also the sealer), so their effect is
//! on-chain when the command returns.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use blendcac::authz::{DomainOwner, PolicyRule, ServiceProvider, SimulatedLatency, SubjectMatch};
use blendcac::capcontract::{
    CallOutcome, ContractCall, ContractKind, ContextSet, RevocationMode,
};
use blendcac::identity::{EntityKind, EntityProfile, EntityStatus, ProfileDb};
use blendcac::ledger::{now_ms, start_sealer};
use blendcac::{AccessRightSet, Address, Node, Vid};

use crate::bench::{self, ExperimentConfig};
use crate::config::{parse_config, parse_context_arg, parse_policy_rules};
use crate::http::{AdminState, AppState};
use crate::keystore::Keystore;
use crate::models::Pipeline;
use crate::ops;

#[derive(Parser)]
#[command(name = "blendcac", version, about = "Capability-based access control gateway")]
pub struct Cli {
    /// State directory (chain log, keystore, profiles)
    #[arg(long, global = true, default_value = "./blendcac-data")]
    pub data_dir: PathBuf,

    /// Machine-readable JSON output
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a named keypair in the keystore
    Keygen {
        #[arg(long)]
        name: String,
    },
    /// Register an entity profile in the owner's profile database
    Register {
        /// Keystore name of the entity (its address becomes the VID)
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "device")]
        kind: String,
        #[arg(long)]
        display: Option<String>,
    },
    /// Deploy a contract (capability, role or attribute)
    Deploy {
        #[arg(long, default_value = "capability")]
        kind: String,
        #[arg(long, default_value = "owner")]
        key: String,
    },
    /// Issue a capability token (owner)
    Issue {
        #[arg(long)]
        contract: String,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        object: String,
        /// Compact rights, e.g. R, RW, RWX, or '-' for the empty set
        #[arg(long)]
        rights: String,
        #[arg(long)]
        depth: u32,
        /// Context constraints: time:HH:MM-HH:MM | loc:tag | pred:id
        #[arg(long = "context")]
        context: Vec<String>,
        #[arg(long, default_value = "owner")]
        key: String,
    },
    /// Delegate the caller's token to a target address
    Delegate {
        #[arg(long)]
        contract: String,
        /// Keystore name of the token subject
        #[arg(long)]
        key: String,
        #[arg(long)]
        target: String,
    },
    /// Remove a delegatee from a subject's token (owner)
    RevokeDelegation {
        #[arg(long)]
        contract: String,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        target: String,
        #[arg(long, default_value = "owner")]
        key: String,
    },
    /// Revoke a whole token (owner): zero_depth, clear_rights or disable
    RevokeToken {
        #[arg(long)]
        contract: String,
        #[arg(long)]
        subject: String,
        #[arg(long)]
        mode: String,
        #[arg(long, default_value = "owner")]
        key: String,
    },
    /// Query the token visible to a requester address
    QueryToken {
        #[arg(long)]
        contract: String,
        #[arg(long)]
        requester: String,
        #[arg(long)]
        height: Option<u64>,
    },
    /// Run the gateway web service
    Serve(ServeArgs),
    /// Run or plot benchmarks
    Bench(BenchArgs),
    /// Chain inspection
    Chain {
        #[command(subcommand)]
        command: ChainCommand,
    },
}

#[derive(Subcommand)]
pub enum ChainCommand {
    /// Verify the stored chain (hash links, signatures, nonces)
    Verify,
}

#[derive(Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub listen: String,
    /// Capability contract address the provider enforces
    #[arg(long)]
    pub contract: Option<String>,
    /// Object VID this provider serves (defaults to the owner address)
    #[arg(long)]
    pub object: Option<String>,
    #[arg(long, default_value = "")]
    pub location: String,
    /// Resources as id=path, repeatable
    #[arg(long = "resource")]
    pub resources: Vec<String>,
    /// Policy rules file for the token-request endpoint
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// key=value config file; flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub block_interval_ms: Option<u64>,
    #[arg(long)]
    pub chain_query_ms: Option<u64>,
    #[arg(long)]
    pub rtt_ms: Option<u64>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[command(subcommand)]
    pub command: Option<BenchCommand>,

    #[command(flatten)]
    pub run: BenchRunArgs,
}

#[derive(Subcommand)]
pub enum BenchCommand {
    /// Render an SVG latency chart from an emitted CSV
    Plot {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
pub struct BenchRunArgs {
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub runs: Option<u32>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub chain_query_ms: Option<u64>,
    #[arg(long)]
    pub rtt_ms: Option<u64>,
    #[arg(long)]
    pub block_interval_ms: Option<u64>,
    #[arg(long)]
    pub store_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the provider token cache (every request queries the chain)
    #[arg(long)]
    pub no_cache: bool,
    /// key=value config file; flags override file values
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_address(s: &str) -> Result<Address> {
    Address::from_hex(s).map_err(|e| anyhow!("bad address '{s}': {e}"))
}

fn parse_kind(s: &str) -> Result<ContractKind> {
    match s {
        "capability" => Ok(ContractKind::Capability),
        "role" => Ok(ContractKind::Role),
        "attribute" => Ok(ContractKind::Attribute),
        other => bail!("unknown contract kind '{other}'"),
    }
}

fn parse_rights(s: &str) -> Result<AccessRightSet> {
    if s == "-" {
        return Ok(AccessRightSet::empty());
    }
    AccessRightSet::parse_compact(s).map_err(|e| anyhow!("bad rights '{s}': {e}"))
}

fn open_node(data_dir: &Path, interval: Duration) -> Result<Arc<Node>> {
    std::fs::create_dir_all(data_dir)
        .with_context(|| format!("creating data dir {}", data_dir.display()))?;
    let node = Node::open(&data_dir.join("chain.log"), interval).map_err(|e| anyhow!(e))?;
    Ok(Arc::new(node))
}

fn profiles_path(data_dir: &Path) -> PathBuf {
    data_dir.join("profiles.json")
}

struct CliOutput {
    json: bool,
}

impl CliOutput {
    fn emit(&self, value: serde_json::Value, text: String) {
        if self.json {
            println!("{}", serde_json::to_string_pretty(&value).expect("json"));
        } else {
            println!("{text}");
        }
    }
}

/// Runs a parsed command; the error path maps to process exit codes in
/// `main`.
pub fn run(cli: Cli) -> Result<()> {
    let out = CliOutput { json: cli.json };
    match cli.command {
        Command::Keygen { name } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let key = ks.generate(&name)?;
            out.emit(
                json!({
                    "name": key.name,
                    "address": key.address.to_string(),
                    "public_key": key.keypair.public_key().to_string(),
                }),
                format!("generated key '{}' with address {}", key.name, key.address),
            );
            Ok(())
        }
        Command::Register { name, kind, display } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let owner = ks.load("owner").context("run `keygen --name owner` first")?;
            let entity = ks.load(&name)?;
            let kind = match kind.as_str() {
                "device" => EntityKind::Device,
                "human" => EntityKind::Human,
                other => bail!("unknown entity kind '{other}'"),
            };
            let path = profiles_path(&cli.data_dir);
            let mut db = if path.exists() {
                ProfileDb::load(owner.keypair.public_key(), &path).map_err(|e| anyhow!(e))?
            } else {
                ProfileDb::new(owner.keypair.public_key())
            };
            let profile = EntityProfile {
                vid: Vid(entity.address),
                kind,
                display_name: display.unwrap_or_else(|| name.clone()),
                registered_at: now_ms(),
                status: EntityStatus::Active,
            };
            let sig = owner.keypair.sign(&profile.canonical_bytes());
            let vid = db.register_entity(&sig, profile).map_err(|e| anyhow!(e))?;
            db.save(&path).map_err(|e| anyhow!(e))?;
            out.emit(
                json!({ "vid": vid.to_string() }),
                format!("registered {name} as {vid}"),
            );
            Ok(())
        }
        Command::Deploy { kind, key } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let signer = ks.load(&key)?;
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let receipt = ops::submit_sealed(
                &node,
                &signer.keypair,
                Address::ZERO,
                &ContractCall::Deploy {
                    kind: parse_kind(&kind)?,
                },
            )?;
            let height = receipt.height;
            match ops::expect_outcome(receipt)? {
                CallOutcome::Deployed { address, kind } => {
                    out.emit(
                        json!({
                            "contract": address.to_string(),
                            "kind": format!("{kind:?}").to_lowercase(),
                            "height": height,
                        }),
                        format!("deployed {kind:?} contract at {address} (height {height})"),
                    );
                    Ok(())
                }
                other => bail!("unexpected outcome {other:?}"),
            }
        }
        Command::Issue {
            contract,
            subject,
            object,
            rights,
            depth,
            context,
            key,
        } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let signer = ks.load(&key)?;
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let constraints = context
                .iter()
                .map(|c| parse_context_arg(c))
                .collect::<Result<Vec<_>>>()?;
            let receipt = ops::submit_sealed(
                &node,
                &signer.keypair,
                parse_address(&contract)?,
                &ContractCall::Issue {
                    subject: Vid(parse_address(&subject)?),
                    object: Vid(parse_address(&object)?),
                    depth,
                    rights: parse_rights(&rights)?,
                    context: ContextSet::new(constraints),
                },
            )?;
            let height = receipt.height;
            match ops::expect_outcome(receipt)? {
                CallOutcome::TokenIssued { id } => {
                    out.emit(
                        json!({ "token_id": id.to_string(), "height": height }),
                        format!("{id}"),
                    );
                    Ok(())
                }
                other => bail!("unexpected outcome {other:?}"),
            }
        }
        Command::Delegate { contract, key, target } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let signer = ks.load(&key)?;
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let receipt = ops::submit_sealed(
                &node,
                &signer.keypair,
                parse_address(&contract)?,
                &ContractCall::Delegate {
                    target: parse_address(&target)?,
                },
            )?;
            match ops::expect_outcome(receipt)? {
                CallOutcome::Delegated { id, delegatee_count } => {
                    out.emit(
                        json!({
                            "token_id": id.to_string(),
                            "delegatee_count": delegatee_count,
                        }),
                        format!("delegated token {id} ({delegatee_count} delegatee(s))"),
                    );
                    Ok(())
                }
                other => bail!("unexpected outcome {other:?}"),
            }
        }
        Command::RevokeDelegation {
            contract,
            subject,
            target,
            key,
        } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let signer = ks.load(&key)?;
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let receipt = ops::submit_sealed(
                &node,
                &signer.keypair,
                parse_address(&contract)?,
                &ContractCall::RevokeDelegation {
                    subject: parse_address(&subject)?,
                    target: parse_address(&target)?,
                },
            )?;
            match ops::expect_outcome(receipt)? {
                CallOutcome::DelegationRevoked { id } => {
                    out.emit(
                        json!({ "token_id": id.to_string() }),
                        format!("revoked delegation on token {id}"),
                    );
                    Ok(())
                }
                other => bail!("unexpected outcome {other:?}"),
            }
        }
        Command::RevokeToken {
            contract,
            subject,
            mode,
            key,
        } => {
            let ks = Keystore::open(&cli.data_dir)?;
            let signer = ks.load(&key)?;
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let mode: RevocationMode = mode
                .parse()
                .map_err(|e| anyhow!("bad revocation mode: {e}"))?;
            let receipt = ops::submit_sealed(
                &node,
                &signer.keypair,
                parse_address(&contract)?,
                &ContractCall::RevokeToken {
                    subject: parse_address(&subject)?,
                    mode,
                },
            )?;
            match ops::expect_outcome(receipt)? {
                CallOutcome::TokenRevoked { id, mode } => {
                    out.emit(
                        json!({ "token_id": id.to_string(), "mode": mode.to_string() }),
                        format!("revoked token {id} (mode {mode})"),
                    );
                    Ok(())
                }
                other => bail!("unexpected outcome {other:?}"),
            }
        }
        Command::QueryToken {
            contract,
            requester,
            height,
        } => {
            let node = open_node(&cli.data_dir, Duration::ZERO)?;
            let snap = node
                .get_contract_state(parse_address(&contract)?, height)
                .map_err(|e| anyhow!(e))?;
            let pool = snap
                .state
                .as_capability()
                .ok_or_else(|| anyhow!("not a capability contract"))?;
            match pool.query_token(&parse_address(&requester)?) {
                Some(queried) => {
                    let value = serde_json::to_value(&queried)?;
                    out.emit(value.clone(), serde_json::to_string_pretty(&value)?);
                    Ok(())
                }
                None => bail!(NotFoundError(format!(
                    "no token visible to {requester} in {contract}"
                ))),
            }
        }
        Command::Serve(args) => serve(&cli.data_dir, args),
        Command::Bench(args) => match args.command {
            Some(BenchCommand::Plot { input, out: out_path }) => {
                let text = std::fs::read_to_string(&input)
                    .with_context(|| format!("reading {}", input.display()))?;
                let rows = bench::parse_csv(&text)?;
                std::fs::write(&out_path, bench::plot_svg(&rows))
                    .with_context(|| format!("writing {}", out_path.display()))?;
                out.emit(
                    json!({ "plot": out_path.display().to_string(), "rows": rows.len() }),
                    format!("wrote {} ({} rows)", out_path.display(), rows.len()),
                );
                Ok(())
            }
            None => {
                let config = bench_config(&args.run)?;
                let report = bench::run_benchmark(&config)?;
                if out.json {
                    out.emit(
                        json!({
                            "model": report.model.to_string(),
                            "runs": report.rows.len(),
                            "first_total_us": report.first_total().as_micros() as u64,
                            "warm_median_total_us": report.warm_median_total().as_micros() as u64,
                            "token_query_share": report.token_query_share(),
                            "csv": config.output_path.as_ref().map(|p| p.display().to_string()),
                        }),
                        String::new(),
                    );
                } else {
                    print!("{}", report.summary());
                    if let Some(path) = &config.output_path {
                        println!("csv written to {}", path.display());
                    }
                }
                Ok(())
            }
        },
        Command::Chain { command } => match command {
            ChainCommand::Verify => {
                let node = open_node(&cli.data_dir, Duration::ZERO)?;
                let (height, hash) = node.chain_head();
                match node.verify() {
                    Ok(()) => {
                        out.emit(
                            json!({ "ok": true, "height": height, "head": hash.to_string() }),
                            format!("chain ok (height {height}, head {hash})"),
                        );
                        Ok(())
                    }
                    Err(violation) => bail!("chain invalid: {violation}"),
                }
            }
        },
    }
}

/// Typed wrapper so `query-token` misses map to the not-found exit code.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NotFoundError(pub String);

fn bench_config(args: &BenchRunArgs) -> Result<ExperimentConfig> {
    let mut file_values: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        file_values = parse_config(&text)?;
    }
    for key in file_values.keys() {
        let known = [
            "model",
            "runs",
            "out",
            "chain_query_ms",
            "rtt_ms",
            "block_interval_ms",
            "store_size",
            "seed",
            "use_cache",
        ];
        if !known.contains(&key.as_str()) {
            bail!("unknown config key '{key}'");
        }
    }
    let from_file = |key: &str| file_values.get(key).cloned();
    let parse_u64 = |s: String| -> Result<u64> { s.parse().map_err(|_| anyhow!("bad number '{s}'")) };

    let mut config = ExperimentConfig::default();
    if let Some(model) = args
        .model
        .clone()
        .or_else(|| from_file("model"))
    {
        config.model = model.parse().map_err(|e: String| anyhow!(e))?;
    }
    if let Some(runs) = args.runs.or(from_file("runs").map(parse_u64).transpose()?.map(|v| v as u32)) {
        config.runs = runs;
    }
    if let Some(out) = args.out.clone().or_else(|| from_file("out").map(PathBuf::from)) {
        config.output_path = Some(out);
    }
    if let Some(ms) = args
        .chain_query_ms
        .or(from_file("chain_query_ms").map(parse_u64).transpose()?)
    {
        config.simulated_chain_query_latency = Duration::from_millis(ms);
    }
    if let Some(ms) = args.rtt_ms.or(from_file("rtt_ms").map(parse_u64).transpose()?) {
        config.simulated_rtt = Duration::from_millis(ms);
    }
    if let Some(ms) = args
        .block_interval_ms
        .or(from_file("block_interval_ms").map(parse_u64).transpose()?)
    {
        config.block_interval = Duration::from_millis(ms);
    }
    if let Some(size) = args
        .store_size
        .or(from_file("store_size").map(parse_u64).transpose()?.map(|v| v as usize))
    {
        config.store_size = size;
    }
    if let Some(seed) = args.seed.or(from_file("seed").map(parse_u64).transpose()?) {
        config.seed = seed;
    }
    if args.no_cache {
        config.use_cache = false;
    } else if let Some(value) = from_file("use_cache") {
        config.use_cache = match value.as_str() {
            "true" | "1" => true,
            "false" | "0" => false,
            other => bail!("bad use_cache value '{other}'"),
        };
    }
    config.validate()?;
    Ok(config)
}

fn serve(data_dir: &Path, args: ServeArgs) -> Result<()> {
    let mut file_values: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        file_values = parse_config(&text)?;
    }
    let from_file = |key: &str| file_values.get(key).cloned();

    let listen = if args.listen != "127.0.0.1:8080" {
        args.listen.clone()
    } else {
        from_file("listen").unwrap_or(args.listen.clone())
    };
    let block_interval = Duration::from_millis(
        args.block_interval_ms
            .or(from_file("block_interval_ms").and_then(|s| s.parse().ok()))
            .unwrap_or(15_000),
    );
    let sim = SimulatedLatency {
        chain_query: Duration::from_millis(
            args.chain_query_ms
                .or(from_file("chain_query_ms").and_then(|s| s.parse().ok()))
                .unwrap_or(0),
        ),
        rtt: Duration::from_millis(
            args.rtt_ms
                .or(from_file("rtt_ms").and_then(|s| s.parse().ok()))
                .unwrap_or(0),
        ),
    };

    let ks = Keystore::open(data_dir)?;
    let owner_key = ks.load("owner").context("run `keygen --name owner` first")?;
    let node = open_node(data_dir, block_interval)?;

    let contract = match args.contract.or_else(|| from_file("contract")) {
        Some(c) => parse_address(&c)?,
        None => bail!("--contract is required (deploy one first)"),
    };
    let object = match args.object.or_else(|| from_file("object")) {
        Some(o) => Vid(parse_address(&o)?),
        None => Vid(owner_key.address),
    };

    // Policy for the token-request endpoint: from file, or a default rule
    // granting registered devices read access with one delegation.
    let rules: Vec<PolicyRule> = match &args.policy {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading policy {}", path.display()))?;
            parse_policy_rules(&text)?
        }
        None => vec![PolicyRule {
            rule_id: 1,
            subject_match: SubjectMatch::Kind(EntityKind::Device),
            object,
            grant_rights: AccessRightSet::parse_compact("R").unwrap(),
            grant_context: ContextSet::empty(),
            grant_depth: 1,
            priority: 0,
        }],
    };
    let mut owner = DomainOwner::new(owner_key.keypair.clone(), rules)?;
    let profiles = profiles_path(data_dir);
    if profiles.exists() {
        owner.profiles =
            ProfileDb::load(owner_key.keypair.public_key(), &profiles).map_err(|e| anyhow!(e))?;
    }

    let mut provider = ServiceProvider::new(node.clone(), contract, object)
        .with_location(args.location.clone())
        .with_simulated_latency(sim)
        .with_refresh_interval(block_interval);
    let mut added_any = false;
    for spec in &args.resources {
        let (id, path) = spec
            .split_once('=')
            .ok_or_else(|| anyhow!("--resource expects id=path"))?;
        let bytes =
            std::fs::read(path).with_context(|| format!("reading resource file {path}"))?;
        provider = provider.with_resource(id, bytes);
        added_any = true;
    }
    if !added_any {
        provider = provider.with_resource("demo", b"blendcac demo resource\n".to_vec());
    }
    let provider = Arc::new(provider);

    let pipeline = Pipeline::Blendcac(provider.clone());
    let admin = AdminState {
        owner: std::sync::Mutex::new(owner),
        node: node.clone(),
        contract,
        keystore: Some(ks),
    };
    let state = Arc::new(AppState::new(pipeline, node.clone(), Some(admin), true));

    let _sealer = start_sealer(node.clone());
    let _refresh = blendcac::authz::start_refresh(provider);

    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        let bound = listener.local_addr().context("local addr")?;
        println!("listening on http://{bound} (contract {contract}, object {object})");
        crate::http::serve_async(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .context("server error")
    })
}
