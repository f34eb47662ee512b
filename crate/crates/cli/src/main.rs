fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let env = |name: &str| std::env::var(name).ok();
    let code = oope_cli::app::run_with(std::env::args_os(), &env, &mut std::io::stdout().lock());
    std::process::exit(code);
}
