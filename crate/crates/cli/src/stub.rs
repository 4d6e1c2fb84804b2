//! `serve-stub`: a table model behind the bridge protocol, for tests and benchmarks.

use std::io::{self, BufWriter};
use std::net::TcpListener;
use std::time::Duration;

use clap::Args;
use groundguide::bridge::{serve, serve_tcp, ServeOptions};

use crate::backend_spec::{load_table_model, BUILTIN_BIASED};
use crate::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct ServeStubArgs {
    /// Table fixture JSON, or `@biased` for the built-in model.
    #[arg(long, default_value = BUILTIN_BIASED)]
    pub fixture: String,
    /// Listen on this TCP address instead of standard input/output.
    #[arg(long)]
    pub listen: Option<String>,
    /// Artificial delay added to every step, in milliseconds.
    #[arg(long, default_value_t = 0)]
    pub step_delay_ms: u64,
    /// Exit after this many TCP connections.
    #[arg(long)]
    pub max_connections: Option<usize>,
}

pub fn cmd_serve_stub(args: &ServeStubArgs) -> CliResult<()> {
    let model = load_table_model(&args.fixture).map_err(CliError::Input)?;
    let options = ServeOptions { step_delay: Duration::from_millis(args.step_delay_ms) };
    let io_failure = |e: io::Error| CliError::Backend { image_id: None, message: e.to_string() };
    match &args.listen {
        Some(addr) => {
            let listener = TcpListener::bind(addr).map_err(|e| CliError::Input(format!("{addr}: {e}")))?;
            let local = listener.local_addr().map_err(io_failure)?;
            eprintln!("listening on {local}");
            serve_tcp(listener, || model.clone(), options, args.max_connections).map_err(io_failure)
        }
        None => {
            let mut model = model;
            let stdin = io::stdin().lock();
            let stdout = BufWriter::new(io::stdout().lock());
            serve(&mut model, stdin, stdout, &options).map(|_| ()).map_err(io_failure)
        }
    }
}
