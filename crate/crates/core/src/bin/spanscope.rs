fn main() -> std::process::ExitCode {
    spanscope::cli::main_with(std::env::args_os())
}
