fn main() -> std::process::ExitCode {
    culb::cli::main()
}
