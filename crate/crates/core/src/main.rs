fn main() -> std::process::ExitCode {
    accvit::cli::main()
}
