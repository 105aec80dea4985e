//! `blockxfer` command line.
//!
//! Every flag can also be set through an environment variable named
//! `BLOCKXFER_` followed by the flag name in upper snake case, for example
//! `BLOCKXFER_BLOCK_SIZE=1000`.

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::time::Duration;

use blockxfer::bench::{self, Carrier, ExperimentConfig, LargeConfig, SweepRow};
use blockxfer::crypto::{self, Cipher, IdentityCipher, PeerKeyPair, SealedCipher, SEAL_OVERHEAD};
use blockxfer::engine::{Callback, Completion, EngineConfig, TransferParameters};
use blockxfer::transport::{LinkModel, UdpDriver, UdpEndpoint};
use blockxfer::wire::{max_block_size, ErrorCode};
use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_TRANSFER: i32 = 3;
pub const EXIT_IO: i32 = 4;

const STEP: Duration = Duration::from_millis(100);

#[derive(Debug, Parser)]
#[command(name = "blockxfer", version, about = "Reliable bulk transfer over UDP")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Send a file to a listening receiver.
    Send(SendArgs),
    /// Accept one transfer and write it to a file.
    Recv(RecvArgs),
    /// Run a simulated parameter sweep.
    Sweep(SweepArgs),
    /// Repeat a large transfer and report throughput.
    Eval(EvalArgs),
    /// Write a fresh key pair.
    Keygen(KeygenArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ParamArgs {
    /// Bytes per block.
    #[arg(long, env = "BLOCKXFER_BLOCK_SIZE")]
    pub block_size: Option<u32>,
    /// Blocks per window.
    #[arg(long, env = "BLOCKXFER_WINDOW")]
    pub window: Option<u32>,
    /// Retransmit interval in milliseconds.
    #[arg(long, env = "BLOCKXFER_INTERVAL_MS")]
    pub interval_ms: Option<u64>,
    /// Silent intervals tolerated before giving up.
    #[arg(long, env = "BLOCKXFER_ATTEMPTS")]
    pub attempts: Option<u32>,
    /// Largest transfer accepted or sent, in bytes.
    #[arg(long, env = "BLOCKXFER_MAX_SIZE")]
    pub max_size: Option<u64>,
}

impl ParamArgs {
    fn apply(&self, mut params: TransferParameters) -> Result<TransferParameters, Failure> {
        if let Some(b) = self.block_size {
            params.block_size = b;
        }
        if let Some(w) = self.window {
            params.window_size = w;
        }
        if let Some(i) = self.interval_ms {
            params.retransmit_interval_ms = i;
        }
        if let Some(a) = self.attempts {
            params.max_attempts = a;
        }
        if let Some(m) = self.max_size {
            params.max_transfer_size = m;
        }
        params.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(params)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CipherKind {
    Identity,
    Sealed,
}

#[derive(Debug, Clone, Args)]
pub struct CipherArgs {
    #[arg(long, value_enum, default_value = "identity", env = "BLOCKXFER_CIPHER")]
    pub cipher: CipherKind,
    /// Our secret key file.
    #[arg(long, env = "BLOCKXFER_KEY")]
    pub key: Option<PathBuf>,
    /// The peer's public key file.
    #[arg(long, env = "BLOCKXFER_PEER_KEY")]
    pub peer_key: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SendArgs {
    /// Receiver address.
    #[arg(long, env = "BLOCKXFER_TO")]
    pub to: SocketAddr,
    /// File to send.
    pub file: PathBuf,
    /// Local address to send from.
    #[arg(long, default_value = "0.0.0.0:0", env = "BLOCKXFER_BIND")]
    pub bind: SocketAddr,
    /// Seed for transfer identifiers and nonces.
    #[arg(long, env = "BLOCKXFER_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub cipher: CipherArgs,
}

#[derive(Debug, Args)]
pub struct RecvArgs {
    #[arg(long, default_value_t = 9000, env = "BLOCKXFER_PORT")]
    pub port: u16,
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::UNSPECIFIED), env = "BLOCKXFER_BIND")]
    pub bind: IpAddr,
    /// Where to write the received bytes.
    #[arg(long, env = "BLOCKXFER_OUT")]
    pub out: PathBuf,
    #[arg(long, env = "BLOCKXFER_SEED")]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub cipher: CipherArgs,
}

#[derive(Debug, Args)]
pub struct LinkArgs {
    /// Loss probability per datagram.
    #[arg(long, env = "BLOCKXFER_LOSS")]
    pub loss: Option<f64>,
    /// One-way latency in milliseconds.
    #[arg(long, default_value_t = 20, env = "BLOCKXFER_LATENCY_MS")]
    pub latency_ms: u64,
    /// Uniform latency jitter in milliseconds.
    #[arg(long, default_value_t = 0, env = "BLOCKXFER_JITTER_MS")]
    pub jitter_ms: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 0, env = "BLOCKXFER_SEED")]
    pub seed: u64,
    /// Write rows here instead of standard output.
    #[arg(long, env = "BLOCKXFER_CSV")]
    pub csv: Option<PathBuf>,
    /// Reuse finished rows already in the CSV file.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, value_delimiter = ',', env = "BLOCKXFER_BLOCK_SIZES")]
    pub block_sizes: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', env = "BLOCKXFER_WINDOWS")]
    pub windows: Option<Vec<u32>>,
    #[arg(long, default_value_t = bench::DEFAULT_ITERATIONS, env = "BLOCKXFER_ITERATIONS")]
    pub iterations: u32,
    #[arg(long, default_value_t = bench::DEFAULT_SWEEP_DATA_SIZE, env = "BLOCKXFER_DATA_SIZE")]
    pub data_size: u64,
    #[arg(long, default_value_t = bench::DEFAULT_SWEEP_INTERVAL_MS, env = "BLOCKXFER_INTERVAL_MS")]
    pub interval_ms: u64,
    #[arg(long, env = "BLOCKXFER_ATTEMPTS")]
    pub attempts: Option<u32>,
    /// Bytes added to every datagram's size for the MTU check.
    #[arg(long, default_value_t = 0, env = "BLOCKXFER_HEADER_TAX")]
    pub header_tax: usize,
    #[command(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CarrierKind {
    Sim,
    Loopback,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum, default_value = "sim", env = "BLOCKXFER_CARRIER")]
    pub carrier: CarrierKind,
    #[arg(long, default_value_t = bench::LARGE_REPETITIONS, env = "BLOCKXFER_REPETITIONS")]
    pub repetitions: u32,
    #[arg(long, default_value_t = bench::LARGE_DATA_SIZE, env = "BLOCKXFER_DATA_SIZE")]
    pub data_size: u64,
    #[arg(long, default_value_t = 0, env = "BLOCKXFER_SEED")]
    pub seed: u64,
    #[arg(long, env = "BLOCKXFER_CSV")]
    pub csv: Option<PathBuf>,
    #[command(flatten)]
    pub params: ParamArgs,
    #[command(flatten)]
    pub link: LinkArgs,
}

#[derive(Debug, Args)]
pub struct KeygenArgs {
    /// Secret key path; the public key goes next to it with a `.pub` suffix.
    #[arg(long, env = "BLOCKXFER_OUT")]
    pub out: PathBuf,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Transfer(String),
    Io(String),
}

impl Failure {
    fn io(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        Failure::Io(format!("{context}: {e}"))
    }

    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Transfer(_) => EXIT_TRANSFER,
            Failure::Io(_) => EXIT_IO,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Transfer(m) | Failure::Io(m) => m,
        }
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Send(a) => send(a),
        Command::Recv(a) => recv(a),
        Command::Sweep(a) => sweep(a),
        Command::Eval(a) => eval(a),
        Command::Keygen(a) => keygen(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("blockxfer: {}", f.message());
            f.code()
        }
    }
}

fn os_seed() -> u64 {
    use rand::TryRngCore;
    rand::rngs::OsRng.try_next_u64().unwrap_or(0x0b10_c4f3)
}

/// Validated cipher settings; key files are read before any socket opens.
enum CipherPlan {
    Identity,
    Sealed { local: PeerKeyPair, peer: [u8; crypto::KEY_LEN] },
}

impl CipherPlan {
    fn load(args: &CipherArgs) -> Result<Self, Failure> {
        match args.cipher {
            CipherKind::Identity => Ok(CipherPlan::Identity),
            CipherKind::Sealed => {
                let (Some(key), Some(peer)) = (&args.key, &args.peer_key) else {
                    return Err(Failure::Usage("--cipher sealed needs --key and --peer-key".into()));
                };
                let secret = crypto::read_key_file(key).map_err(|e| Failure::io(key.display(), e))?;
                let peer = crypto::read_key_file(peer).map_err(|e| Failure::io(peer.display(), e))?;
                Ok(CipherPlan::Sealed {
                    local: PeerKeyPair::from_secret(secret),
                    peer,
                })
            }
        }
    }

    fn overhead(&self) -> usize {
        match self {
            CipherPlan::Identity => 0,
            CipherPlan::Sealed { .. } => SEAL_OVERHEAD,
        }
    }

    fn build(&self, seed: u64) -> Result<Box<dyn Cipher + Send>, Failure> {
        Ok(match self {
            CipherPlan::Identity => Box::new(IdentityCipher),
            CipherPlan::Sealed { local, peer } => {
                Box::new(SealedCipher::new(local, peer, seed).map_err(|e| Failure::Usage(e.to_string()))?)
            }
        })
    }

    /// Parameters with the block size defaulted to, and checked against, the
    /// largest block this cipher leaves room for.
    fn params(&self, args: &ParamArgs) -> Result<TransferParameters, Failure> {
        let limit = max_block_size(self.overhead());
        let mut base = TransferParameters::default();
        base.block_size = base.block_size.min(limit);
        let params = args.apply(base)?;
        if params.block_size > limit {
            return Err(Failure::Usage(format!(
                "block size {} exceeds {limit} bytes with this cipher",
                params.block_size
            )));
        }
        Ok(params)
    }
}

fn describe(code: ErrorCode) -> String {
    match code {
        ErrorCode::Timeout => "transfer timed out".into(),
        other => format!("transfer refused: {other}"),
    }
}

fn send(args: SendArgs) -> Result<(), Failure> {
    let plan = CipherPlan::load(&args.cipher)?;
    let params = plan.params(&args.params)?;
    let data = fs::read(&args.file).map_err(|e| Failure::io(args.file.display(), e))?;
    if data.len() as u64 > params.max_transfer_size {
        return Err(Failure::Transfer(format!(
            "{} is {} bytes, over the {}-byte limit",
            args.file.display(),
            data.len(),
            params.max_transfer_size
        )));
    }
    let seed = args.seed.unwrap_or_else(os_seed);
    let endpoint = UdpEndpoint::bind(args.bind).map_err(|e| Failure::io("bind", e))?;
    let config = EngineConfig {
        params,
        record_batches: false,
    };
    let mut driver = UdpDriver::new(endpoint, config, seed, plan.build(seed)?);
    let info: String = args
        .file
        .file_name()
        .map(|n| n.to_string_lossy().chars().take(blockxfer::wire::MAX_INFO_LEN / 4).collect())
        .unwrap_or_default();
    let now = driver.now_ms();
    driver
        .engine_mut()
        .start_transfer(args.to, &info, Vec::new(), data, None, now)
        .map_err(|e| Failure::Transfer(e.to_string()))?;
    let mut shown = None;
    loop {
        let out = driver.step(STEP).map_err(|e| Failure::io("socket", e))?;
        for e in out.send_errors {
            eprintln!("warning: send failed: {e}");
        }
        if let Some(s) = driver.engine().sender(&args.to) {
            let windows = blockxfer::engine::window_count(s.block_count(), s.params().window_size);
            let done = s.window_index().min(windows);
            if shown != Some(done) {
                eprintln!("sent {done}/{windows} windows");
                shown = Some(done);
            }
        }
        for cb in out.callbacks {
            match cb {
                Callback::Complete { .. } => {
                    eprintln!("transfer complete");
                    return Ok(());
                }
                Callback::Errored { code, .. } => return Err(Failure::Transfer(describe(code))),
                Callback::Progress { .. } => {}
            }
        }
    }
}

fn recv(args: RecvArgs) -> Result<(), Failure> {
    let plan = CipherPlan::load(&args.cipher)?;
    let params = plan.params(&args.params)?;
    let seed = args.seed.unwrap_or_else(os_seed);
    let endpoint = UdpEndpoint::bind((args.bind, args.port)).map_err(|e| Failure::io("bind", e))?;
    if let Ok(addr) = endpoint.local_addr() {
        eprintln!("listening on {addr}");
    }
    let config = EngineConfig {
        params,
        record_batches: false,
    };
    let mut driver = UdpDriver::new(endpoint, config, seed, plan.build(seed)?);
    let mut last_percent = None;
    let received = loop {
        let out = driver.step(STEP).map_err(|e| Failure::io("socket", e))?;
        let mut done = None;
        for cb in out.callbacks {
            match cb {
                Callback::Progress {
                    received_blocks,
                    block_count,
                    ..
                } => {
                    let percent = u64::from(received_blocks) * 100 / u64::from(block_count.max(1));
                    if last_percent != Some(percent) {
                        eprintln!("received {received_blocks}/{block_count} blocks ({percent}%)");
                        last_percent = Some(percent);
                    }
                }
                Callback::Complete {
                    outcome: Completion::Received { info, data, .. },
                    ..
                } => done = Some(Ok((info, data))),
                Callback::Errored { code, .. } => done = Some(Err(Failure::Transfer(describe(code)))),
                Callback::Complete { .. } => {}
            }
        }
        if let Some(done) = done {
            break done?;
        }
    };
    let (info, data) = received;
    fs::write(&args.out, &data).map_err(|e| Failure::io(args.out.display(), e))?;
    eprintln!("received {info:?}, {} bytes, written to {}", data.len(), args.out.display());
    // Stay around long enough to answer a retransmission of the last window.
    let linger = Duration::from_millis(params.retransmit_interval_ms * 2);
    let start = std::time::Instant::now();
    while start.elapsed() < linger {
        driver.step(STEP).map_err(|e| Failure::io("socket", e))?;
    }
    Ok(())
}

fn link_model(args: &LinkArgs, default_loss: f64, seed: u64) -> Result<LinkModel, Failure> {
    let link = LinkModel {
        loss_probability: args.loss.unwrap_or(default_loss),
        latency_base_ms: args.latency_ms,
        latency_jitter_ms: args.jitter_ms,
        seed,
        ..Default::default()
    };
    link.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(link)
}

fn write_rows(path: Option<&Path>, rows: &[SweepRow]) -> Result<(), Failure> {
    match path {
        Some(p) => {
            let file = fs::File::create(p).map_err(|e| Failure::io(p.display(), e))?;
            bench::write_csv(io::BufWriter::new(file), rows).map_err(|e| Failure::io(p.display(), e))
        }
        None => bench::write_csv(io::stdout().lock(), rows).map_err(|e| Failure::io("stdout", e)),
    }
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let defaults = ExperimentConfig::default();
    let mut params = defaults.params;
    params.retransmit_interval_ms = args.interval_ms;
    if let Some(a) = args.attempts {
        params.max_attempts = a;
    }
    let config = ExperimentConfig {
        block_sizes: args.block_sizes.unwrap_or(defaults.block_sizes),
        window_sizes: args.windows.unwrap_or(defaults.window_sizes),
        iterations: args.iterations,
        data_size: args.data_size,
        link: link_model(&args.link, defaults.link.loss_probability, 0)?,
        params,
        header_tax: args.header_tax,
        seed: args.seed,
    };
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let done = match (&args.csv, args.resume) {
        (Some(p), true) if p.exists() => {
            let file = fs::File::open(p).map_err(|e| Failure::io(p.display(), e))?;
            bench::read_csv(file).map_err(|e| Failure::io(p.display(), e))?
        }
        (None, true) => return Err(Failure::Usage("--resume needs --csv".into())),
        _ => Vec::new(),
    };
    let rows = bench::sweep_resume(&config, &done).map_err(|e| Failure::Usage(e.to_string()))?;
    write_rows(args.csv.as_deref(), &rows)?;
    let cells = bench::summarize(&rows);
    let report = format!(
        "{}\nmean throughput (kB/s)\n{}",
        bench::summary_table(&cells),
        bench::throughput_matrix(&cells)
    );
    if args.csv.is_some() {
        print!("{report}");
        let _ = io::stdout().flush();
    } else {
        eprint!("{report}");
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    let mut base = TransferParameters::default();
    base.max_transfer_size = base.max_transfer_size.max(args.data_size);
    let params = args.params.apply(base)?;
    let carrier = match args.carrier {
        CarrierKind::Sim => Carrier::Simulated(link_model(&args.link, bench::CALIBRATED_LOSS, 0)?),
        CarrierKind::Loopback => Carrier::Loopback,
    };
    if args.repetitions == 0 {
        return Err(Failure::Usage("--repetitions must be at least 1".into()));
    }
    let config = LargeConfig {
        data_size: args.data_size,
        params,
        repetitions: args.repetitions,
        carrier,
        seed: args.seed,
    };
    let summary = bench::evaluate_large(&config).map_err(|e| match e {
        bench::BenchError::Failed(code) => Failure::Transfer(describe(code)),
        bench::BenchError::Config(m) => Failure::Usage(m),
        other => Failure::Io(other.to_string()),
    })?;
    if let Some(path) = &args.csv {
        let rows: Vec<SweepRow> = summary
            .runs
            .iter()
            .enumerate()
            .map(|(i, stats)| SweepRow {
                block_size: params.block_size,
                window_size: params.window_size,
                iteration: i as u32,
                seed: bench::iteration_seed(args.seed, i as u32),
                stats: *stats,
            })
            .collect();
        write_rows(Some(path), &rows)?;
    }
    print!("{}", summary.report());
    let _ = io::stdout().flush();
    Ok(())
}

fn keygen(args: KeygenArgs) -> Result<(), Failure> {
    let mut secret = [0u8; crypto::KEY_LEN];
    {
        use rand::TryRngCore;
        rand::rngs::OsRng
            .try_fill_bytes(&mut secret)
            .map_err(|e| Failure::Io(format!("entropy: {e}")))?;
    }
    let pair = PeerKeyPair::from_secret(secret);
    let mut public_path = args.out.clone().into_os_string();
    public_path.push(".pub");
    let public_path = PathBuf::from(public_path);
    crypto::write_key_file(&args.out, pair.secret_bytes()).map_err(|e| Failure::io(args.out.display(), e))?;
    fs::write(&public_path, pair.public_key()).map_err(|e| Failure::io(public_path.display(), e))?;
    eprintln!("wrote {} and {}", args.out.display(), public_path.display());
    Ok(())
}
