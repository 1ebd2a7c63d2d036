fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOCUSGATE_LOG", "warn")).init();
    std::process::exit(focusgate_cli::main_with_args(std::env::args_os()));
}
