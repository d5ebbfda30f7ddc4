use issgeo::net::{SystemClock, UreqTransport};
use issgeo_cli::{run, Context};

fn main() {
    let transport = UreqTransport::default();
    let clock = SystemClock::default();
    let env = |k: &str| std::env::var(k).ok();
    let ctx = Context {
        env: &env,
        transport: &transport,
        clock: &clock,
    };
    let code = run(
        std::env::args_os(),
        &ctx,
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
